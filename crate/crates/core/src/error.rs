use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Fit,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Fit => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("data quality: {malformed} of {total} rows malformed")]
    DataQuality { malformed: usize, total: usize },

    #[error("assignment error: {0}")]
    Assignment(String),

    #[error("estimation error: no nighttime staypoints")]
    NoNighttimeStaypoints,

    #[error("insufficient observation: {nights} distinct nights, {required} required")]
    InsufficientObservation { nights: usize, required: usize },

    #[error("no observation for night {0}")]
    NoObservation(chrono::NaiveDate),

    #[error("undetermined: no observed nights in the post-event window")]
    Undetermined,

    #[error("no data at intensity {0}")]
    NoDataAtIntensity(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("unidentifiable: {0}")]
    Unidentifiable(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("undefined MAPE: every observed rate is zero")]
    UndefinedMape,

    #[error("empty distribution: no samples inside the range")]
    EmptyDistribution,

    #[error("insufficient samples: {got} in range, {need} required")]
    InsufficientSamples { got: usize, need: usize },

    #[error("nothing to compare: {0}")]
    NothingToCompare(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config { .. } => ErrorClass::Config,
            Error::DegenerateData(_)
            | Error::Unidentifiable(_)
            | Error::UndefinedCorrelation(_)
            | Error::UndefinedMape
            | Error::InsufficientSamples { .. }
            | Error::EmptyDistribution
            | Error::NothingToCompare(_) => ErrorClass::Fit,
            _ => ErrorClass::Data,
        }
    }
}
