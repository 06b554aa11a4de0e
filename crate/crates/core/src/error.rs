use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate demixing matrix at frequency {freq}: |det| = {det:e}")]
    DegenerateState { freq: usize, det: f64 },

    #[error("background update failed at frequency {freq}: {source}")]
    BackgroundSolve {
        freq: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite demixing state after iteration {0}")]
    Diverged(usize),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyInput(_) => "empty_input",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidConfig(_) => "invalid_config",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Singular(_) => "singular",
            Error::DegenerateState { .. } => "degenerate_state",
            Error::BackgroundSolve { .. } => "background_solve",
            Error::Diverged(_) => "diverged",
            Error::Wav(_) => "wav",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
