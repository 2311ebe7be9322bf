use thiserror::Error;

/// Errors raised anywhere in the sphere-encoder pipeline.
#[derive(Debug, Error)]
pub enum SphereError {
    #[error("degenerate latent: norm {norm:e} is below the 1e-12 threshold")]
    DegenerateLatent { norm: f64 },

    #[error("invalid angle {0}°: must lie in [0, 90)")]
    InvalidAngle(f64),

    #[error("invalid noise policy: {0}")]
    InvalidPolicy(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid class id {id} (model has {n_classes} classes)")]
    InvalidClass { id: usize, n_classes: usize },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("non-finite sample produced at step {step}")]
    NonFiniteSample { step: usize },

    #[error("non-finite loss at training step {step} (batch index {batch_index}): {detail}")]
    NonFiniteLoss {
        step: u64,
        batch_index: usize,
        detail: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("I/O error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[cfg(feature = "model")]
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[cfg(feature = "model")]
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl SphereError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        SphereError::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        SphereError::ShapeMismatch {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, SphereError>;

impl SphereError {
    /// Process exit status: 2 configuration, 3 numeric, 4 I/O or data.
    pub fn exit_code(&self) -> i32 {
        match self {
            SphereError::InvalidAngle(_)
            | SphereError::InvalidPolicy(_)
            | SphereError::ShapeMismatch { .. }
            | SphereError::ConfigMismatch(_)
            | SphereError::Config(_)
            | SphereError::InvalidClass { .. } => 2,
            SphereError::DegenerateLatent { .. }
            | SphereError::NonFiniteSample { .. }
            | SphereError::NonFiniteLoss { .. } => 3,
            #[cfg(feature = "model")]
            SphereError::Tensor(_) => 3,
            #[cfg(feature = "model")]
            SphereError::Image(_) => 4,
            SphereError::VersionMismatch { .. }
            | SphereError::CorruptCheckpoint(_)
            | SphereError::EmptyDataset(_)
            | SphereError::Io { .. } => 4,
        }
    }
}
