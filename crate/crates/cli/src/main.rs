mod cache;
mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tmtsc_core::data::{SplitFractions, Task};
use tmtsc_core::models::ModelKind;
use tmtsc_core::Error;

/// Company-success classification on monthly company time series.
#[derive(Parser, Debug)]
#[command(name = "tmtsc", version = manifest::VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (JSONL).
    Synth(SynthArgs),
    /// Filter, split by investor group and encode a dataset into panels.
    Prepare(PrepareArgs),
    /// Train one model on prepared panels and save a checkpoint.
    Train(TrainArgs),
    /// Score the test split: metrics JSON and ROC curve CSV.
    Eval(EvalArgs),
    /// Monte-Carlo portfolio simulation over positive test companies.
    Simulate(SimulateArgs),
    /// Median seconds per training step for each model.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Generator settings (TOML or JSON); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long, env = "TMTSC_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "vc")]
    pub task: Task,
    /// Train/validation/test fractions; a zero validation part is allowed.
    #[arg(long, default_value = "0.73/0.13/0.14")]
    pub split: SplitFractions,
    #[arg(long, env = "TMTSC_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub panels: PathBuf,
    #[arg(long, default_value = "tmtsc")]
    pub model: ModelKind,
    /// File with optional `[model]` and `[train]` tables (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed from the config file.
    #[arg(long, env = "TMTSC_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub panels: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Runs to aggregate; runs after the first retrain with the next seeds.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub panels: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "10,25,50,100")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub repeats: usize,
    #[arg(long, env = "TMTSC_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Draw companies independently per model instead of sharing draws.
    #[arg(long)]
    pub unpaired: bool,
    /// Add the GC reference success rate as a labeled overlay line.
    #[arg(long)]
    pub gc_reference: bool,
    /// Also write every repeat's rate as JSON.
    #[arg(long)]
    pub raw: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub panels: PathBuf,
    /// `all` or a comma-separated list.
    #[arg(long, default_value = "all")]
    pub models: String,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    /// Model settings, as for `train`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Category name and exit code of an error.
fn category(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ("missing-file", 3),
        Error::Io { .. } => ("io", 4),
        Error::Parse { .. } | Error::Validation { .. } | Error::Serde(_) | Error::EmptyRecord(_) => {
            ("schema-violation", 5)
        }
        Error::SchemaMismatch { .. } => ("schema-mismatch", 6),
        Error::SplitInfeasible(_) => ("infeasible-split", 7),
        Error::Divergence { .. } => ("divergence", 8),
        Error::InfeasibleSize { .. } => ("infeasible-size", 9),
        Error::Config(_) | Error::Precondition(_) => ("config", 10),
        Error::Checkpoint(_) => ("checkpoint", 11),
        Error::Vocabulary { .. } => ("vocabulary", 12),
        Error::Dimension(_)
        | Error::NumericInput(_)
        | Error::Degenerate(_)
        | Error::Domain(_)
        | Error::UndefinedMetric(_) => ("numeric", 13),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (name, code) = category(&e);
            eprintln!("error[{name}]: {e}");
            ExitCode::from(code)
        }
    }
}
