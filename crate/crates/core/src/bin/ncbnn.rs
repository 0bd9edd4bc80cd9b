//! Command-line front end for the experiment pipelines.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ncbnn::experiment::{self, ExperimentConfig, Task};
use ncbnn::Error;

#[derive(Parser)]
#[command(
    name = "ncbnn",
    version,
    about = "Contextuality prediction with standard and Bayesian neural networks"
)]
struct Cli {
    /// TOML file overriding the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed (replicate r uses seed + r).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Task of the single-model pipelines: kcbs or rhombus.
    #[arg(long, global = true, value_parser = parse_task)]
    task: Option<Task>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write training and test datasets with metadata.
    Generate,
    /// Train the point-estimate network on every replicate.
    TrainNn,
    /// Sample the weight posterior with HMC on every replicate.
    TrainBnn,
    /// Accuracy against training-set size for NN and BNN.
    AccuracySweep,
    /// Uncertainty histograms of all and of wrong predictions.
    Histograms,
    /// Misclassification probability above and below uncertainty thresholds.
    Calibration,
    /// Grid predictions and uncertainties on the rhombus task.
    Rhombus,
    /// Every experiment above, in sequence.
    RunAll,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "kcbs" => Ok(Task::Kcbs),
        "rhombus" => Ok(Task::Rhombus),
        other => Err(format!("unknown task `{other}` (expected kcbs or rhombus)")),
    }
}

fn resolve(cli: &Cli) -> ncbnn::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(task) = cli.task {
        cfg.task = task;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> ncbnn::Result<()> {
    let cfg = resolve(cli)?;
    let dirs = match cli.command {
        Command::Generate => vec![experiment::run_generate(&cfg)?],
        Command::TrainNn => vec![experiment::run_train(&cfg, false)?],
        Command::TrainBnn => vec![experiment::run_train(&cfg, true)?],
        Command::AccuracySweep => vec![experiment::run_accuracy_sweep(&cfg)?],
        Command::Histograms => vec![experiment::run_histograms(&cfg)?],
        Command::Calibration => vec![experiment::run_calibration(&cfg)?],
        Command::Rhombus => vec![experiment::run_rhombus(&cfg)?],
        Command::RunAll => experiment::run_all(&cfg)?,
    };
    for d in dirs {
        println!("{}", d.display());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence(_) | Error::AcceptanceCollapse { .. } | Error::LpInconclusive { .. } => 3,
        Error::Io { .. } | Error::Parse { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
