//! `dca` — train and evaluate deep combinatorial aggregation models from
//! flat config files.

mod commands;
mod config;
mod manifest;

use clap::{Args, Parser, Subcommand};
use dca_core::error::Result;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dca", version, about = "Deep combinatorial aggregation trainer and evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Config file (flat `key = value` lines) or a manifest.json to replay.
    config: PathBuf,
    /// Overrides applied after the file, e.g. `train.lr=0.01 seed=7`.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method and write checkpoints + training log.
    Train(RunArgs),
    /// Evaluate a checkpoint (eval.checkpoint) on the configured test data.
    Eval(RunArgs),
    /// Train the harness methods and evaluate under input corruption.
    Shift(RunArgs),
    /// Train the harness methods and score OOD detection.
    Ood(RunArgs),
    /// Sweep one ablation axis (granularity, loss, instance_count).
    Ablate(RunArgs),
    /// Per-member analysis of modelwise banks trained with NLL vs CEL.
    Diversity(RunArgs),
    /// Print a checkpoint's header and verify its CRC.
    InspectCheckpoint {
        /// Path to a .dca checkpoint file.
        path: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InspectCheckpoint { path } => commands::cmd_inspect(&path),
        Command::Train(args) => with_config(args, commands::cmd_train),
        Command::Eval(args) => with_config(args, commands::cmd_eval),
        Command::Shift(args) => with_config(args, commands::cmd_shift),
        Command::Ood(args) => with_config(args, commands::cmd_ood),
        Command::Ablate(args) => with_config(args, commands::cmd_ablate),
        Command::Diversity(args) => with_config(args, commands::cmd_diversity),
    }
}

fn with_config(
    args: RunArgs,
    f: fn(&config::ConfigMap, &mut config::RunConfig) -> Result<()>,
) -> Result<()> {
    let mut map = config::ConfigMap::load(&args.config)?;
    map.apply_env_seed(&args.overrides)?;
    map.apply_overrides(&args.overrides)?;
    let mut cfg = config::resolve(&map)?;
    map.reject_unknown()?;
    commands::preflight(&cfg)?;
    f(&map, &mut cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
