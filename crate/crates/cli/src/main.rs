//! `nmke`: batch front end for the neuron-masked editing engine.
//!
//! Configuration layers, lowest to highest precedence: built-in defaults,
//! `--config FILE` (TOML), `NMKE_SECTION__KEY` environment variables,
//! `--set key=value` flags, then purpose-specific flags like `--edits`.
//! Exit codes: 0 success, 1 usage error, 2 data or schema error,
//! 3 numerical failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nmke_core::Error;

#[derive(Parser)]
#[command(name = "nmke", version, about = "Neuron-masked knowledge editing engine")]
struct Cli {
    /// TOML config file overlaying the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Dotted-key override, e.g. --set masking.alpha=2.0; repeatable.
    #[arg(long, global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker threads for evaluation; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fact world.
    World(commands::world::WorldArgs),
    /// Train a model on a world until it recalls the facts.
    Train(commands::train::TrainArgs),
    /// Apply a single edit request to a checkpoint.
    Edit(commands::edit::EditArgs),
    /// Run a sequential or batched lifelong-editing experiment.
    Run(commands::run::RunArgs),
    /// Mask-mode and neuron-role ablation experiments.
    Ablate(commands::ablate::AblateArgs),
    /// Drift and neuron-role diagnostics between two checkpoints.
    Diagnose(commands::diagnose::DiagnoseArgs),
    /// Export weights and attribution matrices for external tools.
    Export(commands::export::ExportArgs),
    /// Chain world, train, run, and diagnostics into one reproducible
    /// report tree.
    Reproduce(commands::reproduce::ReproduceArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            report_error("usage", &Error::Config(e.to_string()));
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            report_error("usage", &Error::Config(format!("thread pool: {e}")));
            return ExitCode::from(1);
        }
    }
    let stage = match &cli.command {
        Command::World(_) => "world",
        Command::Train(_) => "train",
        Command::Edit(_) => "edit",
        Command::Run(_) => "run",
        Command::Ablate(_) => "ablate",
        Command::Diagnose(_) => "diagnose",
        Command::Export(_) => "export",
        Command::Reproduce(_) => "reproduce",
    };
    let cfg = match config::load(cli.config.as_deref(), &cli.set) {
        Ok(c) => c,
        Err(e) => {
            report_error(stage, &e);
            return ExitCode::from(e.exit_code());
        }
    };
    let result = match cli.command {
        Command::World(args) => commands::world::run(&cfg, &args),
        Command::Train(args) => commands::train::run(&cfg, &args),
        Command::Edit(args) => commands::edit::run(&cfg, &args),
        Command::Run(args) => commands::run::run(&cfg, &args),
        Command::Ablate(args) => commands::ablate::run(&cfg, &args),
        Command::Diagnose(args) => commands::diagnose::run(&cfg, &args),
        Command::Export(args) => commands::export::run(&cfg, &args),
        Command::Reproduce(args) => commands::reproduce::run(&cfg, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(stage, &e);
            ExitCode::from(e.exit_code())
        }
    }
}

/// One machine-readable error record on stderr.
fn report_error(stage: &str, err: &Error) {
    let record = serde_json::json!({
        "error": {
            "stage": stage,
            "kind": err.kind(),
            "message": err.to_string(),
        }
    });
    eprintln!("{record}");
}
