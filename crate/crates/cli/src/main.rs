//! `tripatch`: train, evaluate, transfer and ablate adversarial patches from
//! a TOML run config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config or validation error,
//! 3 detector adapter failure.

mod commands;
mod config;
mod error;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Axis;
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "tripatch", version, about = "Adversarial patches against person detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `out_dir` from the config, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a patch against the configured detector.
    Train(Common),
    /// Score a patch under the clean-output pseudo ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Patch sidecar (`.tpch`) to apply.
        #[arg(long, required_unless_present = "no_patch")]
        patch: Option<PathBuf>,
        /// Evaluate the clean scenes against themselves.
        #[arg(long, conflicts_with = "patch")]
        no_patch: bool,
    },
    /// Evaluate every patch in a directory against every configured victim.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Directory of `.tpch` patches; overrides `transfer.patch_dir`.
        #[arg(long)]
        patch: Option<PathBuf>,
    },
    /// Run one ablation sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
    },
}

fn setup(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    if let Some(n) = common.jobs {
        if n == 0 {
            return Err(CliError::config("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    let cfg = RunConfig::load(&common.config, common.seed)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, out) = setup(&common)?;
            commands::cmd_train(&cfg, &out)
        }
        Command::Eval { common, patch, .. } => {
            let (cfg, out) = setup(&common)?;
            commands::cmd_eval(&cfg, &out, patch.as_deref())
        }
        Command::Transfer { common, patch } => {
            let (cfg, out) = setup(&common)?;
            commands::cmd_transfer(&cfg, &out, patch.as_deref())
        }
        Command::Ablate { common, axis } => {
            let (cfg, out) = setup(&common)?;
            commands::cmd_ablate(&cfg, &out, axis)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
