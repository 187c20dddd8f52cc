//! Age regression from face crops on a MobileNetV3-Large backbone: data
//! curation and splitting, preprocessing, a CPU training engine, search,
//! evaluation, export parity checks and latency benchmarking.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod hpo;
pub mod io;
pub mod loader;
pub mod model;
pub mod nn;
pub mod parity;
pub mod seed;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use dataset::{Corpus, Sample, Split, SplitManifest};
pub use error::{Error, ErrorKind, Result, ShapeError};
pub use model::{AgeModel, Mode, ModelSpec, Pretrained, Stage};
pub use tensor::Tensor;
pub use transforms::{Pipeline, TransformSpec};
