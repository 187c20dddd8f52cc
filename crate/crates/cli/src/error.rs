//! Command-level failures and the mapping of any error chain onto exit codes.

use std::path::PathBuf;

use agenet::error::{
    BenchError, DatasetError, EvalError, HpoError, ModelError, ParityError, TrainError, TransformError,
};
use agenet::ErrorKind;

use crate::config::ConfigError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    /// An input another command should have produced is absent.
    MissingArtifact { path: PathBuf, producer: &'static str },
    /// The run directory already holds a manifest.
    Exists { dir: PathBuf },
    Usage(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::MissingArtifact { path, producer } => write!(
                f,
                "{} does not exist; run `agenet {producer}` first to produce it",
                path.display()
            ),
            CliError::Exists { dir } => write!(
                f,
                "run directory {} exists with a manifest; pass --force to overwrite or choose another --run-id",
                dir.display()
            ),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

fn code_of(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
        ErrorKind::Io | ErrorKind::Other => EXIT_OTHER,
    }
}

/// The first classifiable error in the chain decides the exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::MissingArtifact { .. } | CliError::Exists { .. } | CliError::Usage(_) => EXIT_CONFIG,
            };
        }
        macro_rules! classify {
            ($($t:ty),*) => {
                $(if let Some(e) = cause.downcast_ref::<$t>() {
                    return code_of(e.kind());
                })*
            };
        }
        classify!(
            agenet::Error,
            DatasetError,
            ModelError,
            TrainError,
            HpoError,
            EvalError,
            ParityError,
            BenchError
        );
        if cause.downcast_ref::<TransformError>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_OTHER
}
