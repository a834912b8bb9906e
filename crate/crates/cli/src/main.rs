//! `ancl-lab`: batch front-end for continual-learning experiments on
//! synthetic task streams.
//!
//! Exit codes: 0 success, 1 output could not be written, 2 configuration
//! error, 3 training failure, 4 missing inputs, 5 verification failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use ancl_core::mutation::{self, Mutation};
use clap::{Args, Parser, Subcommand};

use crate::commands::{CliError, Context};
use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "ancl-lab", version, about = "Continual learning with an auxiliary network on synthetic task streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); omitted keys take their documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `seeds` from the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Suppress progress messages.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured sequence for every seed.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write the final network state of every seed.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Weight distance, CKA and landscape tables from analysis checkpoints.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Directory holding `seed_<s>/analysis.json`; defaults to the config's `out`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Check the closed-form results and every gradient numerically.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Choose λ under the classic objective, then λ_a with λ fixed.
    Gridsearch {
        #[command(flatten)]
        common: Common,
    },
}

fn context(common: Common) -> Result<Context, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Config(format!("config file {} does not exist", path.display())));
            }
            ExperimentConfig::load(path).map_err(CliError::Config)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = common.seeds {
        cfg.seeds = seeds;
    }
    if let Some(out) = common.out {
        cfg.out = out;
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(Context { out: cfg.out.clone(), cfg, quiet: common.quiet })
}

fn setup_environment() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("ANCL_LAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("ANCL_LAB_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    // fault injection for the mutation test; see README
    if let Ok(v) = std::env::var("ANCL_LAB_MUTATION") {
        let m: Mutation = v.parse().map_err(CliError::Config)?;
        mutation::enable(m);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    setup_environment()?;
    match cli.command {
        Command::Run { common, checkpoints } => commands::run(&context(common)?, checkpoints),
        Command::Analyze { common, checkpoints } => {
            let ctx = context(common)?;
            let dir = checkpoints.unwrap_or_else(|| ctx.cfg.out.clone());
            commands::analyze(&ctx, &dir)
        }
        Command::Verify { seed } => commands::verify(seed),
        Command::Gridsearch { common } => commands::gridsearch(&context(common)?),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ancl-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
