use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate triangle (|det| = {0:e})")]
    DegenerateTriangle(f64),
    #[error("singular affine transform (|det| = {0:e})")]
    SingularTransform(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tiles leave column {0} uncovered")]
    GapBetweenTiles(usize),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("glyph {0:?} is not in the atlas")]
    UnknownGlyph(char),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint mismatch: {0}")]
    ArtifactMismatch(String),
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("external process failed: {0}")]
    External(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
