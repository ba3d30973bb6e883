//! `fmx`: train and evaluate crosscoders / fmxcoders over multi-layer
//! activation caches.
//!
//! Every subcommand reads a TOML config plus trailing `--key value`
//! overrides, runs deterministically given the resolved settings, and writes
//! the resolved config next to its outputs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/format error,
//! 4 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fmx_core::error::{Error, ErrorClass};

use crate::config::Config;

#[derive(Parser)]
#[command(name = "fmx", version, about = "crosscoder / fmxcoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file (flat dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trailing overrides: `--key value [--key value ...]`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic activation cache with planted features.
    Generate(CommonArgs),
    /// Train a crosscoder variant on an activation cache.
    Train(CommonArgs),
    /// Reconstruction metrics (MSE / EV / CS) for a checkpoint.
    Eval(CommonArgs),
    /// Norm and functional coherence report plus histograms.
    Coherence(CommonArgs),
    /// Sparse probing: best-latent F1 and Wasserstein distance.
    Probe(CommonArgs),
    /// Grid over masking probability and rank reduction.
    Sweep(CommonArgs),
    /// LLM-judge evaluation of top-activating latents.
    Judge(CommonArgs),
    /// Rank selection for a parameter budget.
    Ranks(CommonArgs),
}

fn run(command: &Command) -> Result<(), Error> {
    let (args, handler): (&CommonArgs, fn(&Config) -> Result<(), Error>) = match command {
        Command::Generate(a) => (a, commands::cmd_generate),
        Command::Train(a) => (a, commands::cmd_train),
        Command::Eval(a) => (a, commands::cmd_eval),
        Command::Coherence(a) => (a, commands::cmd_coherence),
        Command::Probe(a) => (a, commands::cmd_probe),
        Command::Sweep(a) => (a, commands::cmd_sweep),
        Command::Judge(a) => (a, commands::cmd_judge),
        Command::Ranks(a) => (a, commands::cmd_ranks),
    };
    let cfg = Config::load(args.config.as_deref(), &args.overrides)?;
    handler(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err.class() {
                ErrorClass::Config => ExitCode::from(2),
                ErrorClass::Data => ExitCode::from(3),
                ErrorClass::Runtime => ExitCode::from(4),
            }
        }
    }
}
