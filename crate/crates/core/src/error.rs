use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module in the crate.
///
/// The CLI maps these onto process exit codes: validation-class errors
/// (anything malformed in inputs, shapes, or parameters) exit with 2,
/// [`Error::NonConvergence`] with 3, [`Error::Dependency`] with 4, and
/// plain I/O failures with 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A frame sequence is missing an index (frame files must be contiguous).
    #[error("frame sequence gap in {path}: missing index {missing}")]
    Gap { path: PathBuf, missing: usize },

    /// A file exists but is not what the format requires (e.g. non-RGBA PNG).
    #[error("format error at {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A metric whose denominator is empty (e.g. hole residue with no holes).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A clip spec that cannot be rendered (e.g. sprite leaves the canvas).
    #[error("invalid clip spec: {0}")]
    Spec(String),

    /// A training stage finished without reaching its configured target.
    #[error("non-convergence: {metric} reached {achieved} but needs {threshold}")]
    NonConvergence {
        metric: String,
        achieved: f64,
        threshold: f64,
    },

    /// A stage was asked to run without its prerequisite checkpoints.
    #[error("missing dependency: {0}")]
    Dependency(String),

    /// Checkpoint metadata disagrees with the run configuration.
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    /// Dataset generation aborted partway; lists the clips that completed.
    #[error("aborted after writing {} clips ({reason}); completed ids: {}", completed.len(), completed.join(", "))]
    PartialOutput {
        completed: Vec<String>,
        reason: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        got: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } => 3,
            Error::Dependency(_) => 4,
            Error::Io { .. } | Error::Image { .. } | Error::PartialOutput { .. } => 1,
            _ => 2,
        }
    }
}
