//! Error types shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/matrix dimensions do not satisfy an operation's contract.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A value violates an operation's domain (non-finite, out of range, ...).
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// A mass distribution with zero total; entropy is undefined.
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    /// A selection policy produced an empty layer set.
    #[error("no layers selected: {0}")]
    NoLayersSelected(String),

    /// Malformed token sequence or text input; `position` is the first
    /// offending token (0-based).
    #[error("parse error at token {position}: {message}")]
    Parse { position: usize, message: String },

    /// Malformed binary file (bad magic, version, dtype, or payload).
    #[error("invalid file format: {0}")]
    Format(String),

    /// An error from a named pipeline stage.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// An error annotated with the layer index it occurred at.
    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn at_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }
}
