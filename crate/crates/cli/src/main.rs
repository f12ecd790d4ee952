mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kgalign::Error;

/// Entity alignment between two knowledge graphs.
#[derive(Parser)]
#[command(name = "kgalign", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset directory and report what was read.
    Validate {
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        fold: u8,
    },
    /// Train a model; writes the resolved config, history, checkpoint and test metrics.
    Train(RunArgs),
    /// Score a checkpoint on test (or train/valid) links.
    Eval(EvalArgs),
    /// Train once per deletion ratio (and seed) and tabulate the results.
    Sweep(SweepArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    LeakyReluSign,
}

#[derive(Args, Clone, Default)]
pub struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic task, e.g. "n=200 deg=5 rel=20 perturb=0.15".
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    fold: Option<u8>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Upper bound on the edge deletion ratio.
    #[arg(long)]
    pr: Option<f64>,
    /// Contrastive loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// Disable a component: no-contrastive, no-relation, no-aug-alignment.
    #[arg(long)]
    ablation: Vec<String>,
    /// Accept a deletion ratio outside {0, 0.05, 0.1, 0.15}.
    #[arg(long)]
    allow_any_pr: bool,
    /// Any configuration key, as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (defaults to the one the checkpoint was trained on).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    fold: Option<u8>,
    /// Which links to score.
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Output directory (defaults to the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write predictions.tsv.
    #[arg(long)]
    predictions: bool,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Deletion ratios to train with.
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.15")]
    pr_list: Vec<f64>,
    /// Seeds per ratio (defaults to the configured seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Run this many trainings at once as separate processes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Ingest { .. } | Error::Malformed { .. } | Error::Io(_) | Error::Checkpoint(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Validate { data, fold } => commands::validate(&data, fold),
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Sweep(args) => commands::sweep(&args),
        Command::Gradcheck { inject_fault } => commands::gradcheck(inject_fault.map(|f| match f {
            FaultArg::LeakyReluSign => kgalign::diffmath::Fault::LeakyReluBackwardSign,
        })),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
