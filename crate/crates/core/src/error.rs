use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SvtrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SvtrError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("sample {sample}: label of length {label_len} needs {needed} frames, only {frames} available")]
    Feasibility {
        sample: usize,
        label_len: usize,
        needed: usize,
        frames: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("incompatible config, differing fields: {}", .0.join(", "))]
    Compatibility(Vec<String>),

    #[error("render error: {0}")]
    Render(String),

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("image error: {0}")]
    Image(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checksum mismatch in checkpoint record `{0}`")]
    Checksum(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SvtrError {
    /// Stable short name, used for machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            SvtrError::Shape(_) => "shape",
            SvtrError::Dimension { .. } => "dimension",
            SvtrError::Geometry(_) => "geometry",
            SvtrError::Contract(_) => "contract",
            SvtrError::Index(_) => "index",
            SvtrError::Feasibility { .. } => "feasibility",
            SvtrError::Config(_) => "config",
            SvtrError::Compatibility(_) => "compatibility",
            SvtrError::Render(_) => "render",
            SvtrError::Dataset { .. } => "dataset",
            SvtrError::Image(_) => "image",
            SvtrError::Checkpoint(_) => "checkpoint",
            SvtrError::Checksum(_) => "checksum",
            SvtrError::Divergence { .. } => "divergence",
            SvtrError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SvtrError::Io {
            path: path.into(),
            source,
        }
    }
}
