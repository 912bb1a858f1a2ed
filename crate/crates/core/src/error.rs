use std::path::PathBuf;

/// Crate-wide error type. Contract violations carry enough context to name
/// the offending shapes or values.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {lhs} vs {rhs}")]
    ShapeMismatch {
        context: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty {region} region: no pixels selected by the mask")]
    EmptyRegion { region: &'static str },

    #[error("non-finite {what} in parameter `{name}`")]
    NonFinite { what: &'static str, name: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
