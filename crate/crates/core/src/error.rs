use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("phantom construction failed: {0}")]
    Phantom(String),

    #[error("{format} decode error at byte offset {offset}: {message}")]
    Decode {
        format: &'static str,
        offset: usize,
        message: String,
    },

    #[error("backward was already called on this recording")]
    BackwardTwice,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("seed position {0:?} is outside the tract mask")]
    SeedOutsideMask([f64; 3]),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("unknown bundle: {0}")]
    UnknownBundle(String),

    #[error("configuration error:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("provenance check failed: {0}")]
    Provenance(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
