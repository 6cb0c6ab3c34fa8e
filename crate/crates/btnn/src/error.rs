use std::path::PathBuf;

/// Crate-wide error type.  Variants carry enough context to name the
/// offending layer, state, frame or file without the caller re-deriving it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown state {state}")]
    UnknownState { state: u32 },

    #[error("no positive frames for state {state}")]
    EmptyClass { state: u32 },

    #[error("out-of-vocabulary unit '{unit}'")]
    Oov { unit: String },

    #[error("training diverged at epoch {epoch} for state {state}: loss is not finite")]
    Diverged { epoch: usize, state: u32 },

    #[error("degenerate score range: all {count} scores equal {value}")]
    DegenerateRange { value: f64, count: usize },

    #[error("missing confidence for state {state} at frame {frame}")]
    MissingConfidence { state: u32, frame: u64 },

    #[error("evaluation error: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
