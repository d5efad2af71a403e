use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("joint {joint} angle {angle} rad outside [{min}, {max}]")]
    JointOutOfLimits {
        joint: usize,
        angle: f64,
        min: f64,
        max: f64,
    },

    #[error("scenario not loaded: no initial snapshot registered")]
    ScenarioNotLoaded,

    #[error("unknown topic `{0}`")]
    UnknownTopic(String),

    #[error("topic `{topic}` cannot be published by the {publisher}")]
    DirectionViolation { topic: String, publisher: &'static str },

    #[error("payload does not match topic `{0}`")]
    PayloadMismatch(String),

    #[error("empty log: {0}")]
    EmptyLog(&'static str),

    #[error("no overlapping time range between commanded and measured trajectories")]
    NoOverlap,

    #[error("insufficient distinct settled positions ({0}) to estimate joint resolution")]
    InsufficientPositions(usize),

    #[error("telemetry is missing odometry")]
    MissingOdometry,

    #[error("inconsistent friction measurement: {0}")]
    InconsistentMeasurement(String),

    #[error("malformed command log: {0}")]
    MalformedLog(String),

    #[error("missing scenario start event")]
    MissingStart,

    #[error("config mismatch: log was recorded with {recorded}, replay config hashes to {actual}")]
    ConfigMismatch { recorded: String, actual: String },

    #[error("connection error: {0}")]
    Connection(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
