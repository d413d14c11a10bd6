//! The `csalign` command line: estimator queries, reference values, gradient
//! checks, training runs, sweeps and data generation.
//!
//! Every command returns its standard-output text; `main` prints it and maps
//! a [`CliError`] to its exit code.

pub mod commands;
pub mod config;

use std::fmt;

use clap::{Args, Parser, Subcommand};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NON_OVERLAPPING: u8 = 3;
pub const EXIT_GRADCHECK: u8 = 4;
pub const EXIT_TRAINING_ABORT: u8 = 5;

/// A failure with its process exit code. `stdout` is printed before the
/// diagnostic goes to the error stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
    pub stdout: String,
}

impl CliError {
    pub fn usage(message: String) -> Self {
        Self {
            code: EXIT_USAGE,
            message,
            stdout: String::new(),
        }
    }

    pub fn with_stdout(code: u8, message: String, stdout: String) -> Self {
        Self { code, message, stdout }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "csalign", version, about = "Cauchy-Schwarz divergence alignment toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the CS divergence between two EMBT files.
    Estimate(EstimateArgs),
    /// Print closed-form Gaussian reference values.
    Toy,
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Train adapters from a JSON run config and write per-epoch metrics.
    Train(RunArgs),
    /// Train once per (lambda, sigma) grid point and write final metrics.
    Sweep(RunArgs),
    /// Write synthetic datasets to files.
    #[command(subcommand)]
    Gen(GenCommand),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub x: std::path::PathBuf,
    #[arg(long)]
    pub y: std::path::PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Use the normalized-inner-product form.
    #[arg(long)]
    pub rkhs: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// One of cs, infonce, objective, token.
    #[arg(long)]
    pub loss: String,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = csalign_core::gradients::DEFAULT_STEP)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: std::path::PathBuf,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum GenCommand {
    /// Paired embeddings with a modality gap.
    Paired(PairedArgs),
    /// Unpaired draws from the same generative process.
    Unpaired(UnpairedArgs),
    /// Ragged token clouds in the JSON token format.
    Tokens(TokenArgs),
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub n_pairs: usize,
    #[arg(long, default_value_t = 8)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 4.0)]
    pub gap: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub shared_map: bool,
}

#[derive(Debug, Args)]
pub struct PairedArgs {
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    #[arg(long)]
    pub out_x: std::path::PathBuf,
    #[arg(long)]
    pub out_y: std::path::PathBuf,
}

#[derive(Debug, Args)]
pub struct UnpairedArgs {
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    #[arg(long)]
    pub m_x: usize,
    #[arg(long)]
    pub m_y: usize,
    #[arg(long)]
    pub out_x: std::path::PathBuf,
    #[arg(long)]
    pub out_y: std::path::PathBuf,
}

#[derive(Debug, Args)]
pub struct TokenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub v_range: Vec<usize>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub l_range: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.0)]
    pub gap: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub center_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_vision: std::path::PathBuf,
    #[arg(long)]
    pub out_text: std::path::PathBuf,
}

/// Runs a parsed command. `threads` caps sweep parallelism.
pub fn run(cli: &Cli, threads: usize) -> Result<String, CliError> {
    match &cli.command {
        Command::Estimate(a) => commands::estimate(a),
        Command::Toy => Ok(commands::toy()),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Train(a) => commands::train(a),
        Command::Sweep(a) => commands::sweep(a, threads),
        Command::Gen(g) => commands::gen(g),
    }
}

/// Parses the `CSALIGN_THREADS` value; absent means one thread.
pub fn thread_cap(value: Option<&str>) -> Result<usize, CliError> {
    match value {
        None => Ok(1),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::usage(format!(
                "CSALIGN_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}
