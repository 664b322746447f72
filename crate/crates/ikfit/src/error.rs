use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("unknown site '{0}'")]
    UnknownSite(String),

    #[error("unknown camera '{0}'")]
    UnknownCamera(String),

    #[error("invalid camera '{id}': {reason}")]
    InvalidCamera { id: String, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at solver start")]
    NonFiniteLoss,

    #[error("normal equations singular even after damping")]
    SingularStep,

    #[error("triangulation needs at least 2 usable cameras, got {0}")]
    InsufficientViews(usize),

    #[error("triangulation consensus collapsed: all camera weights below {0}")]
    DegenerateConsensus(f64),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("degenerate point configuration: {0}")]
    DegenerateAlignment(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("skeleton mismatch: {0}")]
    SkeletonMismatch(String),

    #[error("no overlapping data: {0}")]
    NoData(String),

    #[error("invalid scene spec: {0}")]
    InvalidScene(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
