use std::io;

use thiserror::Error;

pub use crate::bench::BenchError;
pub use crate::dataset::DatasetError;
pub use crate::evaluation::EvalError;
pub use crate::hpo::HpoError;
pub use crate::model::ModelError;
pub use crate::parity::ParityError;
pub use crate::training::TrainError;
pub use crate::transforms::TransformError;

#[derive(Debug, Clone, Error)]
#[error("shape error: {0}")]
pub struct ShapeError(String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        ShapeError(msg.into())
    }
}

/// Coarse classification used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
    Io,
    Other,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Hpo(#[from] HpoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Parity(#[from] ParityError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Dataset(e) => e.kind(),
            Error::Transform(_) => ErrorKind::Data,
            Error::Model(e) => e.kind(),
            Error::Train(e) => e.kind(),
            Error::Hpo(e) => e.kind(),
            Error::Eval(e) => e.kind(),
            Error::Parity(e) => e.kind(),
            Error::Bench(e) => e.kind(),
            Error::Shape(_) => ErrorKind::Other,
            Error::Io(_) => ErrorKind::Io,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
