//! Experiment driver: one binary, five subcommands, one config per run.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration error,
//! 3 protocol error, 4 verification violations. Diagnostics go to stderr;
//! stdout carries a single summary line.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod manifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Protocol(_) => 3,
        }
    }
}

impl From<vqsp_core::Error> for CliError {
    fn from(e: vqsp_core::Error) -> Self {
        use vqsp_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Protocol { .. } | E::CorruptIndex { .. } => CliError::Protocol(msg),
            E::Precondition(_)
            | E::Contract(_)
            | E::Plan(_)
            | E::Domain(_)
            | E::Mode(_)
            | E::Format(_)
            | E::InsufficientData(_) => CliError::Config(msg),
            E::Dimension { .. } | E::InvalidMask { .. } | E::Lifecycle(_) => CliError::Internal(msg),
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATIONS: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "vqsp", version, about = "Sequence-parallel inference with vector-quantized token exchange")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override a config value, e.g. `--set infer.devices=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Distributed inference on the cluster simulator.
    Infer(RunArgs),
    /// Latency and bandwidth sweeps from the analytical model.
    Bench(RunArgs),
    /// Numerical theorem checks.
    Verify(RunArgs),
    /// Train one model on a synthetic task.
    Train(RunArgs),
    /// Grid of training runs.
    Ablate(RunArgs),
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return code;
        }
    };
    let (name, args) = match &cli.command {
        Command::Infer(a) => ("infer", a),
        Command::Bench(a) => ("bench", a),
        Command::Verify(a) => ("verify", a),
        Command::Train(a) => ("train", a),
        Command::Ablate(a) => ("ablate", a),
    };
    let result = config::load_config(&args.config, &args.set).and_then(|cfg| {
        let out = match name {
            "infer" => commands::cmd_infer(&cfg),
            "bench" => commands::cmd_bench(&cfg),
            "verify" => commands::cmd_verify(&cfg),
            "train" => commands::cmd_train(&cfg),
            _ => commands::cmd_ablate(&cfg),
        }?;
        manifest::write_outputs(name, &cfg, &out)?;
        Ok(out)
    });
    match result {
        Ok(out) => {
            for line in &out.diagnostics {
                let _ = writeln!(stderr, "{line}");
            }
            let _ = writeln!(stdout, "{}", out.summary);
            if out.violations > 0 {
                EXIT_VIOLATIONS
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            let _ = writeln!(stderr, "vqsp {name}: {e}");
            e.exit_code()
        }
    }
}
