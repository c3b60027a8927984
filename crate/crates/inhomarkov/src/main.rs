use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use inhomarkov::pipeline::{self, with_overrides};
use inhomarkov::{exit_code, RunConfig};

/// Learn and diagnose time-inhomogeneous Markov operators.
#[derive(Parser)]
#[command(name = "inhomarkov", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align prices and features, discretize returns, split chronologically.
    Ingest(Common),
    /// Train state-conditioned and state-free networks per horizon.
    Train(Common),
    /// Per-timestep row heterogeneity, entropy and Dobrushin coefficient.
    Diagnose(Common),
    /// Chapman-Kolmogorov consistency on the test segment.
    Ck {
        #[command(flatten)]
        common: Common,
        /// Horizon to compose (defaults to `model.ck_horizon`).
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Test-set NLL, ΔNLL with bootstrap CIs, and calibration.
    Eval(Common),
    /// Generate a synthetic regime-switching dataset with known operators.
    Synth(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        Ok(with_overrides(RunConfig::load(&self.config)?, self.out.as_deref(), self.seed))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(c) => pipeline::cmd_ingest(&c.load()?),
        Command::Train(c) => pipeline::cmd_train(&c.load()?),
        Command::Diagnose(c) => pipeline::cmd_diagnose(&c.load()?),
        Command::Ck { common, horizon } => pipeline::cmd_ck(&common.load()?, horizon),
        Command::Eval(c) => pipeline::cmd_eval(&c.load()?),
        Command::Synth(c) => pipeline::cmd_synth(&c.load()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
