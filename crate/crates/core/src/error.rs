use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("requested order {requested} exceeds available rank {available}")]
    RankTooLarge { requested: usize, available: usize },
    #[error("singular value {index} ({value:e}) is below the truncation guard {guard:e}")]
    IllConditioned { index: usize, value: f64, guard: f64 },
    #[error("model evaluation overflowed at t = {t} s; horizon too long for model")]
    EvaluationOverflow { t: f64 },
    #[error("no detectable solar disk")]
    NoDisk,
    #[error("first temporal mode has near-zero mean; no constant component")]
    NoConstantComponent,
    #[error("no wind observable")]
    NoWind,
    #[error("zero wind speed")]
    ZeroWind,
    #[error("empty upwind region")]
    EmptyUpwind,
    #[error("arrival time {arrival_s:.3} s is outside the forecast horizon [0, {max_s:.3}] s")]
    BeyondHorizon { arrival_s: f64, max_s: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Json(_) => 1,
            Error::NonFinite(_)
            | Error::RankTooLarge { .. }
            | Error::IllConditioned { .. }
            | Error::EvaluationOverflow { .. }
            | Error::BeyondHorizon { .. } => 3,
            _ => 2,
        }
    }
}
