use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reflow_core::checkpoint::read_header;
use reflow_core::data::{load_dataset, Dataset};
use reflow_core::metrics::EvalReport;
use reflow_core::pipeline::SampleMetrics;
use tempfile::TempDir;

fn reflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "failed: {}\n{}", stderr(&o), stdout(&o));
    o
}

const TINY: &str = r#"
task = "toy2d"
seed = 3

[model]
n_blocks = 1
channels = 8
step_hidden = 8

[optim]
iters = 8
batch = 16

[train]
log_every = 1
"#;

/// Toy data plus a tiny trained checkpoint.
fn toy_setup(dir: &TempDir) -> (PathBuf, PathBuf) {
    let data = p(dir, "toy.rfds");
    ok(reflow(&["gen-data", "--task", "toy2d", "--seed", "1", "--n-train", "128", "--out", s(&data)]));
    let cfg = p(dir, "tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let ckpt = p(dir, "model.rftt");
    ok(reflow(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]));
    (data, ckpt)
}

fn losses(log: &Path) -> Vec<String> {
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().find(|kv| kv.starts_with("loss=")).unwrap().to_string())
        .collect()
}

#[test]
fn gen_data_reports_default_synth_split() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "corpus.rfds");
    let o = ok(reflow(&["gen-data", "--task", "synth_tts", "--seed", "0", "--out", s(&out)]));
    let text = stdout(&o);
    assert!(text.contains("train=512 val=32 test=64"), "{text}");
    assert!(text.contains("norm.mean=") && text.contains("norm.std="));
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.rfds"), p(&dir, "b.rfds"));
    for path in [&a, &b] {
        ok(reflow(&["gen-data", "--task", "synth_tts", "--seed", "7", "--n-utts", "40", "--out", s(path)]));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn gen_data_without_out_is_usage_error() {
    let o = reflow(&["gen-data", "--task", "toy2d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--out"), "{}", stderr(&o));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn invalid_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "toy.rfds");
    ok(reflow(&["gen-data", "--task", "toy2d", "--n-train", "64", "--out", s(&data)]));
    let cfg = p(&dir, "bad.toml");
    std::fs::write(&cfg, "[optim]\nlearning_rate = 0.1\n").unwrap();
    let o = reflow(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&p(&dir, "m.rftt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim().lines().count(), 1);
}

#[test]
fn resume_continues_bit_exactly() {
    let dir = TempDir::new().unwrap();
    let (data, full) = toy_setup(&dir);
    let half_cfg = p(&dir, "half.toml");
    std::fs::write(&half_cfg, TINY.replace("iters = 8", "iters = 4")).unwrap();
    let full_cfg = p(&dir, "tiny.toml");
    let half = p(&dir, "half.rftt");
    ok(reflow(&["train", "--config", s(&half_cfg), "--data", s(&data), "--out", s(&half)]));
    let resumed = p(&dir, "resumed.rftt");
    let log = p(&dir, "resumed.log");
    ok(reflow(&[
        "train", "--config", s(&full_cfg), "--data", s(&data), "--out", s(&resumed), "--resume", s(&half), "--log",
        s(&log),
    ]));
    let uninterrupted = losses(&PathBuf::from(format!("{}.log", full.display())));
    assert_eq!(losses(&log), uninterrupted[4..].to_vec());
    let (a, b) = (std::fs::read(&full).unwrap(), std::fs::read(&resumed).unwrap());
    assert_eq!(a, b, "final checkpoints differ");
}

#[test]
fn resume_with_changed_config_lists_keys() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = toy_setup(&dir);
    let cfg = p(&dir, "changed.toml");
    std::fs::write(&cfg, TINY.replace("batch = 16", "batch = 32\nlr = 0.01")).unwrap();
    let o = reflow(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&p(&dir, "x.rftt")), "--resume", s(&ckpt),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("optim.batch") && err.contains("optim.lr"), "{err}");
}

#[test]
fn euler_nfe_and_seeded_samples() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = toy_setup(&dir);
    for steps in ["1", "50"] {
        let out = p(&dir, &format!("euler{steps}.rfds"));
        ok(reflow(&[
            "sample", "--ckpt", s(&ckpt), "--data", s(&data), "--solver", "euler", "--steps", steps, "--n", "40",
            "--seed", "5", "--out", s(&out),
        ]));
        let side = std::fs::read_to_string(format!("{}.metrics.json", out.display())).unwrap();
        let m = SampleMetrics::from_json(&side).unwrap();
        assert_eq!(m.samples.len(), 40);
        assert!(m.samples.iter().all(|r| r.nfe.to_string() == steps));
    }
    let again = p(&dir, "again.rfds");
    ok(reflow(&[
        "sample", "--ckpt", s(&ckpt), "--data", s(&data), "--solver", "euler", "--steps", "50", "--n", "40", "--seed",
        "5", "--out", s(&again),
    ]));
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(p(&dir, "euler50.rfds")).unwrap());
}

#[test]
fn solver_failures_exit_4() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = toy_setup(&dir);
    let o = reflow(&[
        "sample", "--ckpt", s(&ckpt), "--data", s(&data), "--solver", "rk45", "--max-steps", "1", "--n", "10",
        "--out", s(&p(&dir, "fail.rfds")),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn reflow_increments_generation() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = toy_setup(&dir);
    let out = p(&dir, "gen2.rftt");
    let couplings = p(&dir, "pairs.rfds");
    let o = ok(reflow(&[
        "reflow", "--ckpt", s(&ckpt), "--data", s(&data), "--pairs", "32", "--out", s(&out), "--iters", "4",
        "--couplings-out", s(&couplings), "--straightness-paths", "16",
    ]));
    let text = stdout(&o);
    assert!(text.contains("straightness.before=") && text.contains("straightness.after="), "{text}");
    let (before, _) = read_header(&std::fs::read(&ckpt).unwrap()).unwrap();
    let (after, _) = read_header(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!((before.generation, after.generation), (1, 2));
    match load_dataset(&couplings).unwrap() {
        Dataset::Couplings(c) => assert_eq!((c.generation(), c.len()), (2, 32)),
        other => panic!("wrong kind {}", other.kind_name()),
    }
}

#[test]
fn reflow_with_zero_pairs_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = toy_setup(&dir);
    let o = reflow(&["reflow", "--ckpt", s(&ckpt), "--data", s(&data), "--pairs", "0", "--out", s(&p(&dir, "x"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_paths() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = toy_setup(&dir);
    let gen = p(&dir, "gen.rfds");
    ok(reflow(&[
        "sample", "--ckpt", s(&ckpt), "--data", s(&data), "--solver", "euler", "--steps", "4", "--n", "64", "--out",
        s(&gen),
    ]));
    let report = p(&dir, "self.json");
    let o = ok(reflow(&["eval", "--gen", s(&gen), "--ref", s(&gen), "--out", s(&report)]));
    assert!(stdout(&o).starts_with("fd="));
    let r = EvalReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r.fd < 1e-8, "{}", r.fd);
    assert_eq!(r.mean_nfe, Some(4.0));

    let o = ok(reflow(&["eval", "--gen", s(&gen), "--ref", s(&data), "--out", s(&report)]));
    assert!(stdout(&o).contains("n_ref=4096"));

    let o = reflow(&["eval", "--gen", s(&gen), "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(2));

    let few = p(&dir, "few.rfds");
    ok(reflow(&[
        "sample", "--ckpt", s(&ckpt), "--data", s(&data), "--solver", "euler", "--steps", "1", "--n", "2", "--out",
        s(&few),
    ]));
    let o = reflow(&["eval", "--gen", s(&few), "--ref", s(&data), "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("at least 3"), "{}", stderr(&o));
}

#[test]
fn unreadable_inputs_exit_3() {
    let dir = TempDir::new().unwrap();
    let junk = p(&dir, "junk.rftt");
    std::fs::write(&junk, b"RFTTnope").unwrap();
    let o = reflow(&["sample", "--ckpt", s(&junk), "--n", "1", "--out", s(&p(&dir, "o"))]);
    assert_eq!(o.status.code(), Some(3));
    let o = reflow(&["sample", "--ckpt", s(&p(&dir, "missing")), "--n", "1", "--out", s(&p(&dir, "o"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn synth_end_to_end() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "corpus.rfds");
    ok(reflow(&["gen-data", "--task", "synth_tts", "--n-utts", "40", "--out", s(&data)]));
    let cfg = p(&dir, "synth.toml");
    std::fs::write(
        &cfg,
        "task = \"synth_tts\"\n[model]\nn_blocks = 1\nchannels = 8\nstep_hidden = 8\nfrontend_channels = 8\nduration_channels = 8\n[optim]\niters = 3\nbatch = 2\n",
    )
    .unwrap();
    let ckpt = p(&dir, "m.rftt");
    ok(reflow(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]));
    for durations in ["oracle", "predicted"] {
        let gen = p(&dir, &format!("{durations}.rfds"));
        ok(reflow(&[
            "sample", "--ckpt", s(&ckpt), "--data", s(&data), "--solver", "euler", "--steps", "2", "--durations",
            durations, "--out", s(&gen),
        ]));
        let report = p(&dir, "r.json");
        let o = ok(reflow(&["eval", "--gen", s(&gen), "--ref", s(&data), "--oracle", s(&data), "--out", s(&report)]));
        if durations == "oracle" {
            assert!(stdout(&o).contains("mse_oracle="), "{}", stdout(&o));
        }
    }
    let o = reflow(&["sample", "--ckpt", s(&ckpt), "--n", "2", "--out", s(&p(&dir, "x"))]);
    assert_eq!(o.status.code(), Some(2));
}
