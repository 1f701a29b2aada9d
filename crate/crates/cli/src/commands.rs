use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use reflow_core::checkpoint::Checkpoint;
use reflow_core::config::{RunConfig, Task};
use reflow_core::data::{load_dataset, save_dataset, Dataset, Split};
use reflow_core::ode::{SolverKind, SolverSpec};
use reflow_core::pipeline::{self, SampleMetrics};
use reflow_core::reflow::{generate_coupling, reflow_round, straightness, ReflowOptions};
use reflow_core::sampler::Target;
use reflow_core::Error;

use crate::{EvalArgs, GenDataArgs, ReflowArgs, SampleArgs, TrainArgs};

/// A problem with the invocation itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => 2,
                Error::Io(_) | Error::Format(_) | Error::Version { .. } => 3,
                Error::Solver { .. }
                | Error::MaxSteps { .. }
                | Error::TooManyFailures { .. }
                | Error::NonFinite(_)
                | Error::NanGradient(_) => 4,
                Error::MetricPrecondition(_) => 5,
                Error::NonScalarLoss(_) => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))
}

fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".metrics.json");
    PathBuf::from(s)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(","))
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.task = a.task;
    cfg.seed = a.seed;
    if let Some(t) = a.toy {
        cfg.data.toy = t;
    }
    if let Some(n) = a.n_utts {
        cfg.data.n_utts = n;
    }
    if let Some(n) = a.n_train {
        cfg.data.toy_train = n;
    }
    let ds = pipeline::gen_data(&cfg)?;
    save_dataset(&a.out, &ds).with_context(|| format!("writing {}", a.out.display()))?;
    match &ds {
        Dataset::Points(p) => {
            println!(
                "points kind={:?} n={} dim={} train={} val={} test={} seed={}",
                cfg.data.toy,
                p.len(),
                p.dim(),
                p.count(Split::Train),
                p.count(Split::Val),
                p.count(Split::Test),
                cfg.seed
            );
        }
        Dataset::Corpus(c) => {
            println!(
                "corpus utterances={} train={} val={} test={} vocab={} mel_bins={} train_frames={} seed={}",
                c.utterances.len(),
                c.count(Split::Train),
                c.count(Split::Val),
                c.count(Split::Test),
                c.vocab_size,
                c.mel_bins,
                c.total_frames(Split::Train),
                c.seed
            );
            println!("norm.mean={}", fmt_vec(&c.norm.mean));
            println!("norm.std={}", fmt_vec(&c.norm.std));
        }
        _ => unreachable!("gen_data builds points or corpora"),
    }
    Ok(())
}

fn check_task(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    match (cfg.task, ds) {
        (Task::Toy2d, Dataset::Points(_)) | (Task::SynthTts, Dataset::Corpus(_)) => Ok(()),
        (task, other) => Err(usage(format!(
            "config task {task} cannot train on a {} file",
            other.kind_name()
        ))),
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let ds = load(&a.data)?;
    check_task(&cfg, &ds)?;
    let optim = cfg.optim_config();
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_ckpt(path)?;
            if let Some(saved) = &ck.config {
                let diff = saved.resume_mismatch(&cfg)?;
                if !diff.is_empty() {
                    return Err(usage(format!(
                        "config differs from the checkpoint in: {}",
                        diff.join(", ")
                    )));
                }
            }
            let (dim, vocab) = pipeline::data_dims(&ds)?;
            if ck.model.config() != &cfg.model_config(dim, vocab)? {
                return Err(usage("checkpoint model does not match the config and data"));
            }
            ck.into_trainer(optim.clone())?
        }
        None => reflow_core::train::Trainer::new(pipeline::init_model(&cfg, &ds)?, optim.clone(), cfg.seed)?,
    };
    let data = pipeline::train_data(&ds)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log");
        PathBuf::from(s)
    });
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let (every, ckpt_every) = (cfg.train.log_every.max(1), cfg.train.checkpoint_every);
    let out = a.out.clone();
    trainer
        .run(&data, optim.iters, |tr, s| {
            let line = s.log_line();
            writeln!(log, "{line}")?;
            if s.iter % every == 0 || s.iter == optim.iters {
                println!("{line}");
            }
            if ckpt_every > 0 && s.iter % ckpt_every == 0 && s.iter < optim.iters {
                let path = format!("{}.iter{}", out.display(), s.iter);
                Checkpoint::from_trainer(tr, Some(cfg.clone())).save(path)?;
            }
            Ok(())
        })
        .context("training")?;
    Checkpoint::from_trainer(&trainer, Some(cfg.clone()))
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "saved {} iteration={} generation={}",
        a.out.display(),
        trainer.iteration(),
        trainer.model().generation()
    );
    Ok(())
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let ck = load_ckpt(&a.ckpt)?;
    let spec = match a.solver {
        SolverKind::Euler => SolverSpec::euler(a.steps),
        SolverKind::Rk45 => SolverSpec {
            max_steps: a.max_steps,
            ..SolverSpec::rk45(a.rtol, a.atol)
        },
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let batch = a
        .batch
        .or(ck.config.as_ref().map(|c| c.sample.batch))
        .unwrap_or(256);
    let model = &ck.model;
    let ds = a.data.as_deref().map(load).transpose()?;
    let (targets, norm) = match &ds {
        Some(ds) => (
            pipeline::targets_for(model, ds, a.n, a.durations)?,
            pipeline::output_normalization(ds),
        ),
        None if model.is_conditional() => return Err(usage("conditional models need --data")),
        None if a.n == 0 => return Err(usage("--n must be positive without --data")),
        None => (vec![Target::unconditional(1); a.n], None),
    };
    let (set, metrics) = pipeline::sample(model, &targets, &spec, a.seed, batch, norm).context("sampling")?;
    save_dataset(&a.out, &Dataset::Samples(set)).with_context(|| format!("writing {}", a.out.display()))?;
    let side = sidecar(&a.out);
    std::fs::write(&side, metrics.to_json()?).with_context(|| format!("writing {}", side.display()))?;
    println!(
        "samples={} failures={} solver={} mean_nfe={} mean_rtf={:.6} out={}",
        metrics.generated,
        metrics.failures,
        metrics.solver,
        metrics.mean_nfe,
        metrics.mean_rtf,
        a.out.display()
    );
    Ok(())
}

/// Conditions used for coupling generation: every training item.
fn coupling_targets(model: &reflow_core::model::VelocityModel, ds: &Dataset) -> Result<Vec<Target>> {
    match ds {
        Dataset::Points(_) => Ok(vec![Target::unconditional(1)]),
        Dataset::Corpus(c) => c
            .split(Split::Train)
            .map(|u| {
                let (cond, plan) = model.condition(&u.tokens, Some(&u.durations))?;
                Ok(Target {
                    cond_ref: Some(u.id),
                    cond: Some(cond),
                    frames: plan.total_frames(),
                })
            })
            .collect(),
        other => Err(usage(format!("reflow needs a points or corpus file, got {}", other.kind_name()))),
    }
}

pub fn reflow(a: ReflowArgs) -> Result<()> {
    if a.pairs == 0 {
        return Err(usage("--pairs must be at least 1"));
    }
    let ck = load_ckpt(&a.ckpt)?;
    let ds = load(&a.data)?;
    let mut cfg = match (&a.config, &ck.config) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(c)) => c.clone(),
        (None, None) => RunConfig::for_task(if ck.model.is_conditional() {
            Task::SynthTts
        } else {
            Task::Toy2d
        }),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    check_task(&cfg, &ds)?;
    let base = &ck.model;
    let targets = coupling_targets(base, &ds)?;
    let n_paths = a.straightness_paths.min(a.pairs).max(1);
    let probe = SolverSpec::default();
    let batch = cfg.sample.batch;
    let before = straightness(base, &targets, n_paths, a.time_points, &probe, cfg.seed ^ 0x5354, batch)
        .context("straightness of the base model")?;
    println!("straightness.before={} generation={}", before.s, base.generation());

    let run = generate_coupling(base, &targets, a.pairs, &cfg.coupling_solver(), cfg.seed, batch)
        .context("coupling generation")?;
    println!(
        "couplings={} dropped={} mean_nfe={} generation={}",
        run.set.len(),
        run.dropped,
        run.mean_nfe,
        run.set.generation()
    );
    if let Some(p) = &a.couplings_out {
        save_dataset(p, &Dataset::Couplings(run.set.clone())).with_context(|| format!("writing {}", p.display()))?;
    }

    let mut optim = cfg.optim_config();
    if let Some(it) = a.iters.or(cfg.reflow.iters) {
        optim.iters = it;
    }
    let opts = ReflowOptions {
        optim,
        finetune: a.finetune || cfg.reflow.finetune,
        freeze_frontend: a.freeze_frontend || cfg.reflow.freeze_frontend,
        seed: cfg.seed,
    };
    let corpus = match &ds {
        Dataset::Corpus(c) => Some(c),
        _ => None,
    };
    let every = cfg.train.log_every.max(1);
    let model = reflow_round(base, &run.set, corpus, &opts, |s| {
        if s.iter % every == 0 {
            println!("{}", s.log_line());
        }
        Ok(())
    })
    .context("reflow training")?;

    let after = straightness(&model, &targets, n_paths, a.time_points, &probe, cfg.seed ^ 0x5354, batch)
        .context("straightness of the new model")?;
    println!("straightness.after={} generation={}", after.s, model.generation());
    let generation = model.generation();
    let mut out = Checkpoint::from_model(model, Some(cfg));
    out.iteration = opts.optim.iters;
    out.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("saved {} generation={generation}", a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let gen = match load(&a.gen)? {
        Dataset::Samples(s) => s,
        other => return Err(usage(format!("--gen must be a samples file, got {}", other.kind_name()))),
    };
    let reference = load(&a.reference)?;
    let oracle = match a.oracle.as_deref().map(load).transpose()? {
        Some(Dataset::Corpus(c)) => Some(c),
        Some(other) => return Err(usage(format!("--oracle must be a corpus file, got {}", other.kind_name()))),
        None => None,
    };
    let metrics = read_metrics(&a.gen, a.metrics.as_deref())?;
    let report = pipeline::evaluate(&gen, &reference, oracle.as_ref(), metrics.as_ref()).context("evaluation")?;
    std::fs::write(&a.out, report.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    print!("{}", report.to_text());
    Ok(())
}

fn read_metrics(gen: &Path, explicit: Option<&Path>) -> Result<Option<SampleMetrics>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let p = sidecar(gen);
            if !p.exists() {
                return Ok(None);
            }
            p
        }
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(SampleMetrics::from_json(&text)?))
}
