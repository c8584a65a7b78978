//! Batch front end: reads a JSON run configuration, runs an analysis or a
//! simulation study and writes JSON, CSV and text reports.

pub mod analyze;
pub mod config;
pub mod output;
pub mod simulate;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;

pub use config::{Command, RunConfig};

#[derive(Debug, Clone, Parser)]
#[command(name = "flexor", version, about = "Balancing weights and weighted estimates for multi-study, multi-group data")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for bootstrap and simulation replicates.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Replaces every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub struct RunOutcome {
    pub written: Vec<PathBuf>,
    pub summary: String,
}

/// Loads the config, applies flag overrides and checks it.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = Some(dir.clone());
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cfg: &RunConfig) -> Result<RunOutcome> {
    let (files, summary) = match cfg.command {
        Command::Analyze | Command::WeightsOnly => {
            let run = analyze::run_analysis(cfg)?;
            (run.files, run.summary)
        }
        Command::Simulate => {
            let run = simulate::run_simulation(cfg)?;
            (run.files, run.summary)
        }
    };
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("flexor-output"));
    let written = output::write_all(&dir, &files)?;
    Ok(RunOutcome { written, summary })
}

/// Runs one invocation, inside a dedicated thread pool when a thread count is set.
pub fn run(cli: &Cli) -> Result<RunOutcome> {
    let cfg = resolve_config(cli)?;
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building thread pool")?
            .install(|| execute(&cfg)),
        None => execute(&cfg),
    }
}

/// Remedy for a failure, keyed on the module that raised it.
pub fn hint(err: &anyhow::Error) -> Option<&'static str> {
    use flexor_core::Error;
    let e = err.chain().find_map(|c| c.downcast_ref::<Error>())?;
    Some(match e {
        Error::Data(_) => "check the schema column names, label columns (positive integers) and that every (study, group) cell has subjects",
        Error::Mps(_) => "the propensity model could not be fitted; a small `analysis.mps.ridge` such as 0.01 stabilizes separated data",
        Error::Weights(_) => "check method gamma/theta lengths against the data, or raise `analysis.probability_floor`",
        Error::Flexor(_) => "fixed gamma/theta must be probability vectors and `analysis.simplex_floor` must stay below 1/J and 1/K",
        Error::Estimation(_) => "estimand outcome indices and group labels are 1-based and must exist in the data",
        Error::Uncertainty(_) => "bootstrap needs n_boot >= 2 and a level in (0, 1); sparse cells may need fewer covariates",
        Error::Simulation(_) => "scenarios support two groups; raise `simulation.max_failure_fraction` to tolerate failed replicates",
    })
}
