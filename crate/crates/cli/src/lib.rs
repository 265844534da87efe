//! Command-line driver: data generation, pre-training, fine-tuning,
//! benchmarks, gradient checks and reconstruction panels.

pub mod config;
mod commands;
pub mod recon;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad command line or configuration; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<miram::Error> for CliError {
    fn from(e: miram::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "miram", version, about = "Multi-scale masked autoencoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "miram-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write a labelled synthetic set as PGM files.
    GenData,
    /// Pre-train the masked autoencoder and save a checkpoint.
    Pretrain,
    /// Fine-tune encoder and classifier from a checkpoint.
    Finetune,
    /// Time the attention mechanisms over sequence lengths.
    Bench,
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Render reconstruction panels from a checkpoint.
    Reconstruct,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let env_seed = std::env::var("MIRAM_SEED").ok();
    let result = RunConfig::resolve(env_seed.as_deref(), cli.config.as_deref(), &cli.set)
        .and_then(|cfg| commands::dispatch(cli.command, &cfg, &cli.out));
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nUsage: miram <COMMAND> [--config <PATH>] [--set KEY=VALUE]... [--out <DIR>]");
            eprintln!("Keys: {}", RunConfig::KEYS.join(", "));
            EXIT_USAGE
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}
