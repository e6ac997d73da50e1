//! `fqh-graviton`: geometric-quench simulations from the command line.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Command, Overrides, Settings};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Compute(#[from] fqh_graviton::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "fqh-graviton", version, about = "Geometric-quench dynamics of the thin-cylinder Laughlin state")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Exact quench: intrinsic-metric trace and bimetric fit.
    Quench(Overrides),
    /// Spectra in the squeezed and Fock bases and the broadened quadrupole response.
    Spectrum(Overrides),
    /// Optimal two-parameter ansatz angles along the quench.
    Variational(Overrides),
    /// 1/N extrapolation of optimal angles.
    Extrapolate(Overrides),
    /// Trotter circuits: exact, noiseless and noisy post-selected observables.
    Trotter(Overrides),
    /// Full versus truncated model, plus the circumference sweep.
    Compare(Overrides),
    /// Fit the bimetric solution to an existing metric trace.
    BimetricFit(Overrides),
}

fn run(sub: Sub) -> Result<(), CliError> {
    let (cmd, flags) = match sub {
        Sub::Quench(o) => (Command::Quench, o),
        Sub::Spectrum(o) => (Command::Spectrum, o),
        Sub::Variational(o) => (Command::Variational, o),
        Sub::Extrapolate(o) => (Command::Extrapolate, o),
        Sub::Trotter(o) => (Command::Trotter, o),
        Sub::Compare(o) => (Command::Compare, o),
        Sub::BimetricFit(o) => (Command::BimetricFit, o),
    };
    let settings = Settings::resolve(cmd, &flags)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    commands::execute(cmd, &settings)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
