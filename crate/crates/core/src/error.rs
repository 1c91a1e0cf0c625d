use thiserror::Error;

use crate::corpus::CorpusError;
use crate::numkit::NumError;

/// Errors raised by the model, training, and evaluation layers.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("checkpoint {path}: format version {found} is incompatible with {expected}")]
    Incompatible { path: String, found: u32, expected: u32 },
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (ce={ce}, sup={sup}, diff={diff})"
    )]
    NonFiniteLoss { epoch: usize, batch: usize, ce: f64, sup: f64, diff: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    /// True for failures caused by numerics rather than input data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, ModelError::Num(_) | ModelError::NonFiniteLoss { .. })
    }
}
