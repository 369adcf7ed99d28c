use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiecError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("degenerate cluster {cluster}: zero assignment mass")]
    DegenerateCluster { cluster: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<DiecError>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DiecError>;

impl DiecError {
    pub fn shape(msg: impl Into<String>) -> Self {
        DiecError::Shape(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        DiecError::Param(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        DiecError::Stage { stage, source: Box::new(self) }
    }

    /// Process exit code used by the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            DiecError::Config(_) | DiecError::Json(_) | DiecError::Param(_) => 2,
            DiecError::Format(_) | DiecError::Io(_) => 3,
            DiecError::Shape(_) | DiecError::Singular(_) | DiecError::DegenerateCluster { .. } => 4,
            DiecError::Stage { source, .. } => source.exit_code(),
        }
    }
}
