use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{segment}`: expected {expected}, found {found}")]
    Shape {
        segment: String,
        expected: String,
        found: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric abort: {0}")]
    NumericAbort(String),

    #[error("data error at byte {offset}: {message}")]
    Data { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("all prunable weights are already pruned")]
    NothingToPrune,

    #[error("all gates collapsed to zero; lower `eta_pen` (currently {eta_pen})")]
    GateCollapse { eta_pen: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 2 config, 3 data, 4 numeric abort, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
            Error::Data { .. } | Error::Io(_) | Error::Csv(_) | Error::Shape { .. } => 3,
            Error::NumericAbort(_) | Error::GateCollapse { .. } => 4,
            Error::NothingToPrune => 1,
        }
    }

    pub(crate) fn shape(
        segment: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Shape {
            segment: segment.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn data(offset: u64, msg: impl Into<String>) -> Self {
        Error::Data {
            offset,
            message: msg.into(),
        }
    }
}
