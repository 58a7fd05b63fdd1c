mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "gridtwin", version, about = "Grid simulator, learned surrogate and PPO experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// Experiment configuration (TOML). Library defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Run directory; every command reads its prerequisites from here.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub n_envs: Option<usize>,
    #[arg(long, global = true)]
    pub buffer_size: Option<usize>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// `generative` or `agent`; both when omitted.
    #[arg(long, global = true)]
    pub dataset_kind: Option<String>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Train the generator, DES and power-balance nets and the terminal classifier.
    TrainSurrogate,
    /// Build the generative and agent-based transition datasets.
    GenDatasets,
    /// Fit linear and MLP baselines on each dataset.
    FitBaselines,
    /// PPO against the oracle, the surrogate or a baseline.
    TrainPolicy {
        /// `oracle`, `pinn`, or a baseline name such as `linear-agent`.
        #[arg(long, default_value = "oracle")]
        env: String,
    },
    /// Structural parameter sweep over n_envs x buffer_size.
    Sweep {
        #[arg(long, default_value = "oracle")]
        env: String,
    },
    /// Closed-loop error of every model under random and expert policies.
    EpisodicMae,
    /// Single-transition inference timing, oracle vs surrogate.
    Bench,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    commands::run(&cli.command, &cli.common)
}
