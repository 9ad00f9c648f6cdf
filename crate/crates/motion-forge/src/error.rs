use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value violates a stated constraint.
    #[error("config error: {0}")]
    Config(String),

    /// A 2x2 affine matrix too close to singular to invert.
    #[error("singular affine matrix: |det| = {det:.3e} <= {threshold:.1e}")]
    SingularAffine { det: f64, threshold: f64 },

    /// Non-finite value where the contract requires finite data.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// backward() called on a non-scalar tensor.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// Checkpoint file or model/checkpoint mismatch problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset layout or content problems.
    #[error("data error: {0}")]
    Data(String),

    /// Training aborted; the message carries the last good checkpoint if any.
    #[error("training aborted: {0}")]
    Training(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {detail}")]
    Image { path: String, detail: String },
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
