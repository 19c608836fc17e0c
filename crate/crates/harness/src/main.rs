use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kronprior_harness::config::{ExperimentConfig, ExperimentKind};
use kronprior_harness::experiments::run_experiment;
use kronprior_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "kronprior", version, about = "Learned Kronecker priors and PAC-Bayes bounds at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Power method vs factor-sum baseline on random Kronecker sums.
    KronBench(Common),
    /// Five-rung bound ladder on a transfer pair.
    Ablation(Common),
    /// Accuracy of the prior arms against samples per class.
    SmallData(Common),
    /// Accuracy of the prior arms over the temperature grid.
    ColdPosterior(Common),
    /// Sequential tasks with a Bayesian progressive network.
    Continual(Common),
    /// Learn a prior on the source task and write it as JSON.
    LearnPrior(Common),
    /// Bound report on the target task for a stored prior.
    BoundReport(Common),
}

fn execute(kind: ExperimentKind, c: &Common) -> Result<()> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    let text = run_experiment(kind, &cfg)?;
    match c.out.as_ref().or(cfg.out.as_ref()) {
        Some(path) => std::fs::write(path, text).map_err(HarnessError::Io)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = match &cli.command {
        Command::KronBench(c) => (ExperimentKind::KronBench, c),
        Command::Ablation(c) => (ExperimentKind::Ablation, c),
        Command::SmallData(c) => (ExperimentKind::SmallData, c),
        Command::ColdPosterior(c) => (ExperimentKind::ColdPosterior, c),
        Command::Continual(c) => (ExperimentKind::Continual, c),
        Command::LearnPrior(c) => (ExperimentKind::LearnPrior, c),
        Command::BoundReport(c) => (ExperimentKind::BoundReport, c),
    };
    match execute(kind, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
