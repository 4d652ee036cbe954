use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use coda_cli::{parse_config, run, Command, Overrides, UsageError};

/// Consistency training with stacked augmentations and momentum contrast.
///
/// Keys not given as flags come from `--config` (flat `key = value` lines) or
/// `--manifest` (a manifest.json written by an earlier run).
#[derive(Parser, Debug)]
#[command(name = "coda", version)]
struct Cli {
    /// train, eval, augment, mmd or sweep; overrides the config's `command`.
    #[arg(value_enum)]
    command: Option<Command>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run from a saved manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accept loss weights outside the recommended windows.
    #[arg(long)]
    force_weights: bool,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Only resolve and print the manifest.
    #[arg(long)]
    dry_run: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let flags = Overrides {
        command: cli.command,
        config: cli.config,
        manifest: cli.manifest,
        seed: cli.seed,
        out: cli.out,
        force_weights: cli.force_weights,
        sets: cli.sets,
    };
    let result = parse_config(&flags).and_then(|m| {
        if cli.dry_run {
            print!("{}", m.to_json());
            Ok(())
        } else {
            run(&m)
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
