mod cli;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use crate::cli::Cli;

/// A failed run, grouped by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config values or inputs that contradict each other.
    Usage(String),
    Io(String),
    /// A check suite reported a failing case.
    Verification(String),
    Runtime(String),
}

impl Failure {
    pub fn usage(e: ogflow::Error) -> Self {
        Failure::Usage(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Verification(_) => 4,
        }
    }
}

impl From<ogflow::Error> for Failure {
    fn from(e: ogflow::Error) -> Self {
        use ogflow::Error as E;
        let msg = e.to_string();
        match e.root() {
            E::Io(_)
            | E::BadMagic { .. }
            | E::UnsupportedVersion(_)
            | E::Truncated(_)
            | E::Inconsistent(_)
            | E::Json(_) => Failure::Io(msg),
            E::InvalidArgument(_) | E::ConfigMismatch(_) | E::MissingGroundTruth | E::LevelMismatch { .. } => {
                Failure::Usage(msg)
            }
            _ => Failure::Runtime(msg),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage error", m),
            Failure::Io(m) => ("i/o error", m),
            Failure::Verification(m) => ("verification failed", m),
            Failure::Runtime(m) => ("error", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ogflow: {f}");
            ExitCode::from(f.code())
        }
    }
}
