use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reflow_core::config::Task;
use reflow_core::data::ToyKind;
use reflow_core::ode::SolverKind;
use reflow_core::pipeline::DurationSource;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "reflow", version, about = "Rectified-flow training, sampling and reflow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy point set or a synthetic token/spectrogram corpus.
    GenData(GenDataArgs),
    /// Train a velocity model.
    Train(TrainArgs),
    /// Sample from a checkpoint.
    Sample(SampleArgs),
    /// Generate couplings with a checkpoint and train the next generation on them.
    Reflow(ReflowArgs),
    /// Compare generated samples with reference features.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Read the `[data]` section from a run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_toy)]
    pub toy: Option<ToyKind>,
    /// Number of utterances (synth_tts).
    #[arg(long)]
    pub n_utts: Option<usize>,
    /// Number of training points (toy2d).
    #[arg(long)]
    pub n_train: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Training log; defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset supplying held-out conditions (required for conditional models).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_solver, default_value = "rk45")]
    pub solver: SolverKind,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub rtol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub atol: f64,
    /// Step limit for rk45 before a solve counts as failed.
    #[arg(long, default_value_t = 10_000)]
    pub max_steps: usize,
    /// Number of samples; 0 means one per held-out item.
    #[arg(long, default_value_t = 0)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_durations, default_value = "oracle")]
    pub durations: DurationSource,
    /// Unconditional samples integrated together.
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReflowArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Couplings to generate.
    #[arg(long)]
    pub pairs: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Run config for the new round; defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training iterations for the new model.
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub finetune: bool,
    #[arg(long)]
    pub freeze_frontend: bool,
    /// Also write the generated couplings here.
    #[arg(long)]
    pub couplings_out: Option<PathBuf>,
    /// Paths used for the straightness estimate.
    #[arg(long, default_value_t = 256)]
    pub straightness_paths: usize,
    #[arg(long, default_value_t = 8)]
    pub time_points: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Generated samples file.
    #[arg(long)]
    pub gen: PathBuf,
    /// Reference dataset: points, corpus or samples.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Corpus used for the oracle error.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Sampling sidecar; defaults to `<gen>.metrics.json` when present.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: reflow_core::Error| e.to_string())
}

fn parse_toy(s: &str) -> Result<ToyKind, String> {
    s.parse().map_err(|e: reflow_core::Error| e.to_string())
}

fn parse_solver(s: &str) -> Result<SolverKind, String> {
    s.parse().map_err(|e: reflow_core::Error| e.to_string())
}

fn parse_durations(s: &str) -> Result<DurationSource, String> {
    s.parse().map_err(|e: reflow_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Reflow(a) => commands::reflow(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
