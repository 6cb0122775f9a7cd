mod cli;
mod commands;
mod report;

use std::process::ExitCode;

use rsc_core::Error;

/// Why a run stopped. Usage and validation problems exit with 1, anything
/// that goes wrong after the inputs were accepted exits with 2.
#[derive(Debug)]
pub enum Failure {
    Usage(clap::Error),
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn validation(msg: impl std::fmt::Display) -> Self {
        Failure::Validation(anyhow::anyhow!("{msg}"))
    }

    pub fn runtime(err: impl Into<anyhow::Error>) -> Self {
        Failure::Runtime(err.into())
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        match err {
            Error::Io(_) | Error::NonFinite(_) => Failure::Runtime(err.into()),
            _ => Failure::Validation(err.into()),
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<_> = std::env::args_os().collect();
    let outcome = cli::parse(argv).and_then(|args| {
        if let Some(jobs) = args.jobs {
            if jobs == 0 {
                return Err(Failure::validation("--jobs must be positive"));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global()
                .map_err(Failure::runtime)?;
        }
        commands::run(args)
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            let _ = e.print();
            if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
