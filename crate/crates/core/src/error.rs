//! Error type shared by every module of the simulator.

use std::path::PathBuf;

/// Failures surfaced by the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or tensor geometry.
    #[error("configuration error: {0}")]
    Config(String),

    /// Operand shapes that do not fit together.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input data violating a value contract (e.g. a non-binary mask).
    #[error("data error: {0}")]
    Data(String),

    /// NaN or infinity produced by a forward computation.
    #[error("numeric failure in {0}: non-finite value")]
    Numeric(String),

    /// Batch statistics are undefined for the given input.
    #[error("degenerate batch in {0}: need more than one element per channel")]
    DegenerateBatch(String),

    /// API misuse (non-scalar loss, empty class, mismatched masks, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed binary file.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Federated protocol violation (layout mismatch between updates).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Value outside the fixed-point encoding range.
    #[error("range error: {0}")]
    Range(String),

    #[error("generation error: {0}")]
    Generation(String),

    /// Checkpoint incompatible with the current model layout.
    #[error("version error: {0}")]
    Version(String),

    #[error("NaN loss at round {round}, client {client}, batch {batch}")]
    NanLoss {
        round: usize,
        client: usize,
        batch: usize,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is the model diverging to non-finite values
    /// (as opposed to a bug, bad input or I/O trouble).
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::NanLoss { .. })
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
