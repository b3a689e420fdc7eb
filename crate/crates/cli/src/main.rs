//! `snapshot`: synthetic data, benchmark construction, training, evaluation,
//! ablation, latency and single-scene prediction.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use snapshot_core::benchmark::{STRIDE, WINDOW};
use snapshot_core::features::Selection;
use snapshot_core::scene::GeneratorConfig;
use snapshot_core::training::TrainConfig;

#[derive(Debug, Parser)]
#[command(
    name = "snapshot",
    version,
    about = "Pedestrian trajectory prediction pipeline"
)]
pub struct Cli {
    /// Worker threads; 1 keeps runs deterministic
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// TOML run configuration; flags take precedence over its values [default: none]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root of the default input and output paths
    #[arg(long, global = true, env = "SNAPSHOT_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenarios as JSON lines
    GenSynthetic(GenArgs),
    /// Window scenarios into train/val/test samples with a manifest
    BuildBenchmark(BenchArgs),
    /// Train a model; writes metrics.csv, init/last/best checkpoints
    Train(TrainArgs),
    /// Score a checkpoint on one split
    Eval(EvalArgs),
    /// Train and score one model per map-size/selection cell
    Ablate(AblateArgs),
    /// Measure batched inference latency
    Bench(LatencyArgs),
    /// Predict the future of one pedestrian in a scenario file
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output file [default: <data-dir>/scenarios.jsonl]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of scenarios
    #[arg(long, default_value_t = GeneratorConfig::default().num_scenarios)]
    pub num: usize,
    /// Agents per scenario
    #[arg(long, default_value_t = GeneratorConfig::default().agents_per_scenario)]
    pub agents: usize,
    /// Timesteps per scenario
    #[arg(long, default_value_t = GeneratorConfig::default().length)]
    pub length: usize,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Scenario file [default: <data-dir>/scenarios.jsonl]
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output directory [default: <data-dir>/benchmark]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Window length in timesteps
    #[arg(long, default_value_t = WINDOW)]
    pub window: usize,
    /// Window stride in timesteps
    #[arg(long, default_value_t = STRIDE)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Benchmark directory [default: <data-dir>/benchmark]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory [default: <data-dir>/run]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training stage: 1, 2 or both
    #[arg(long, default_value = "both", value_parser = ["1", "2", "both"])]
    pub stage: String,
    /// Starting checkpoint; required for --stage 2 [default: fresh initialization]
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Epochs per stage
    #[arg(long, default_value_t = TrainConfig::default().max_epochs)]
    pub epochs: usize,
    /// Batch size
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    /// Decoupled weight decay
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub wd: f64,
    /// Std of Gaussian noise added to training inputs, in meters
    #[arg(long, default_value_t = TrainConfig::default().noise_std)]
    pub noise_std: f64,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
    /// Neighbor selection
    #[arg(long, default_value = "l2", value_parser = parse_selection)]
    pub selection: Selection,
    /// Continue from <out>/last.ckpt with its stored settings
    #[arg(long)]
    pub resume: bool,
    /// Write 0 instead of wall-clock seconds into metrics.csv
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint [default: <data-dir>/run/best.ckpt]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Benchmark directory [default: <data-dir>/benchmark]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split to score: train, val or test
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    /// Also score 2..=10 observed steps; writes sweep.csv and sweep.svg
    #[arg(long)]
    pub sweep: bool,
    /// Neighbor selection
    #[arg(long, default_value = "l2", value_parser = parse_selection)]
    pub selection: Selection,
    /// Output directory [default: eval-<split> beside the checkpoint]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Benchmark directory [default: <data-dir>/benchmark]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Grid such as maps=0,50,100,200;selection=l2,risk,none
    #[arg(long, default_value = "maps=0,50,100,200;selection=l2,risk,none")]
    pub grid: String,
    /// Output directory [default: <data-dir>/ablation]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Split to score: val or test
    #[arg(long, default_value = "test", value_parser = ["val", "test"])]
    pub split: String,
    /// Epochs per cell
    #[arg(long, default_value_t = TrainConfig::default().max_epochs)]
    pub epochs: usize,
    /// Batch size
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    /// Decoupled weight decay
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub wd: f64,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    /// Checkpoint [default: <data-dir>/run/best.ckpt]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Benchmark directory supplying inputs [default: <data-dir>/benchmark]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated, strictly increasing batch sizes
    #[arg(long, default_value = "1,16,128,1024")]
    pub batch_sizes: String,
    /// Untimed runs per batch size
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Timed runs per batch size
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    /// CSV output file [default: standard output only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint [default: <data-dir>/run/best.ckpt]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Scenario file (JSON lines)
    #[arg(long)]
    pub scenario: PathBuf,
    /// Track id of the focal pedestrian
    #[arg(long)]
    pub focal: String,
    /// Scenario timestep of the first observed step
    #[arg(long, default_value_t = 0)]
    pub start: i64,
    /// Neighbor selection
    #[arg(long, default_value = "l2", value_parser = parse_selection)]
    pub selection: Selection,
    /// JSON output file [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_selection(s: &str) -> Result<Selection, String> {
    s.parse().map_err(|e: snapshot_core::Error| e.to_string())
}

/// Failure of a subcommand, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input content (exit 1).
    Usage(String),
    /// Missing, unreadable or corrupt files (exit 2).
    Io(String),
    /// NaN loss or gradient during training (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<snapshot_core::Error> for CliError {
    fn from(e: snapshot_core::Error) -> Self {
        use snapshot_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. } | E::Format(_) | E::Corrupt(_) => CliError::Io(msg),
            E::Numerical { .. } => CliError::Numerical(msg),
            _ => CliError::Usage(msg),
        }
    }
}

fn run(cli: &Cli, matches: &ArgMatches) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match &cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(cli, a, sub),
        Command::BuildBenchmark(a) => commands::build_benchmark(cli, a, sub),
        Command::Train(a) => commands::train(cli, a, sub),
        Command::Eval(a) => commands::eval(cli, a, sub),
        Command::Ablate(a) => commands::ablate(cli, a, sub),
        Command::Bench(a) => commands::bench(cli, a),
        Command::Predict(a) => commands::predict(cli, a, sub),
    }
}

/// Help and version go to stdout with exit 0; parse errors are validation
/// errors (exit 1).
fn clap_exit(e: clap::Error) -> ExitCode {
    let _ = e.print();
    if e.use_stderr() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => return clap_exit(e),
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return clap_exit(e),
    };
    match run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
