//! Learned forward models of DLO shape change: a small reverse-mode autodiff
//! graph, three network families, training, evaluation and persistence.

pub mod eval;
pub mod graph;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

pub use model::{Architecture, FeatureStats, ModelParams, Normalization, TrainingMeta};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NeuroError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NaN { epoch: usize, batch: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad model file: {0}")]
    Format(String),
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error(transparent)]
    Repr(#[from] dlo_core::ReprError),
    #[error(transparent)]
    Data(#[from] dlo_core::data::DataError),
}
