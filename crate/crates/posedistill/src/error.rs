use thiserror::Error;

/// Unified error type for the whole crate. Variants are grouped by how the
/// CLI maps them to process exit codes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// Bad run configuration: unknown key, unparsable value, invalid
    /// combination of options, or an otherwise invalid request.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file existed but its contents are malformed: bad magic, truncated
    /// blob, checksum mismatch, unparsable manifest.
    #[error("format error: {0}")]
    Format(String),

    /// Structurally valid artifacts that do not fit together: checkpoint
    /// topology vs. requested model, dataset resolution vs. encoder input.
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// Tensor shape contract violated by an operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An op produced NaN/Inf on the forward pass.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// Training loss became non-finite; records the offending batch.
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// Domain error on otherwise-valid-looking input (empty metric list,
    /// zero-norm embedding row, batch too small, ...).
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    /// Process exit code used by the CLI: 2 = configuration, 3 = I/O or
    /// corrupt file, 4 = incompatible artifacts, 5 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Io(_) | Error::Format(_) => 3,
            Error::Incompatible(_) => 4,
            Error::Shape { .. } | Error::NonFinite(_) | Error::Divergence { .. } => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
