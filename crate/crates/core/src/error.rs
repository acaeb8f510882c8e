use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value in {op} at row {row}")]
    NonFinite { op: &'static str, row: usize },

    #[error("{op} requires at least one patch")]
    Empty { op: &'static str },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no subject signal: attention map is all zero")]
    NoSubjectSignal,

    #[error("zero-norm feature vector at {role} patch {patch}")]
    ZeroNorm { role: &'static str, patch: usize },

    #[error("anchor image {anchor} has an empty subject mask")]
    EmptyAnchorMask { anchor: usize },

    #[error("image {image} has an empty subject mask (max attention weight {max_weight:.6}); lower tau")]
    EmptySubjectMask { image: usize, max_weight: f32 },

    #[error("mask index {index} out of range for image {image} with {patches} patches")]
    MaskOutOfRange { image: usize, index: usize, patches: usize },

    #[error("no correspondence map for image {image}")]
    MissingCorrespondence { image: usize },

    #[error("value store has no entry for step {step}, layer {layer}, image {image}")]
    MissingStoreEntry { step: usize, layer: String, image: usize },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("corrupt artifact {path}: {reason} (byte offset {offset})")]
    Corrupt { path: PathBuf, offset: u64, reason: String },

    #[error("parse error in {path} line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("at step {step}, layer {layer}: {source}")]
    Hook {
        step: usize,
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        match self {
            already @ Error::Phase { .. } => already,
            other => Error::Phase {
                phase,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error, with hook and phase wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Hook { source, .. } | Error::Phase { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config { .. })
    }

    pub fn is_corruption(&self) -> bool {
        matches!(self.root(), Error::Corrupt { .. } | Error::Parse { .. })
    }
}
