use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("ingestion error: sample `{sample}`, modality `{modality}`: {reason}")]
    Ingestion {
        sample: String,
        modality: String,
        reason: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid synthetic dataset spec: {0}")]
    SynthSpec(String),

    #[error("invalid modality subset: {0}")]
    Subset(String),

    #[error("operation not allowed in {mode} mode: {what}")]
    Mode { mode: &'static str, what: String },

    #[error("invalid sampling distribution: {0}")]
    Distribution(String),

    #[error("loss is not finite ({0})")]
    NonFiniteLoss(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("schedule step {step} exceeds total {total}")]
    Schedule { step: usize, total: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Wrap an I/O failure at `path`; a missing file becomes [`Error::MissingFile`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
