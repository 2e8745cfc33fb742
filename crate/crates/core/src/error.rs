use thiserror::Error;

use crate::model::Timestamp;

pub type Result<T> = std::result::Result<T, LocaterError>;

#[derive(Debug, Error)]
pub enum LocaterError {
    #[error("format error: {0}")]
    Format(String),

    #[error("unknown access point `{0}`")]
    UnknownAp(String),

    #[error("unknown region `{0}`")]
    UnknownRegion(String),

    #[error("unknown device `{0}`")]
    UnknownDevice(String),

    #[error("time {time} is outside the observed horizon of device `{device}`")]
    OutOfHorizon { device: String, time: Timestamp },

    #[error("region `{0}` has no candidate rooms")]
    NoCandidateRooms(String),

    #[error("no bootstrap-labeled tuples; fall back to default thresholds")]
    EmptyLabeled,

    #[error("empty query set")]
    EmptyQuerySet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible-capacity: event `{event}` needs {demand} seats but has {capacity}")]
    InfeasibleCapacity {
        event: String,
        demand: usize,
        capacity: usize,
    },

    #[error("invalid space model: {0}")]
    InvalidSpace(String),

    #[error("query for `{device}` at {time}: {source}")]
    Query {
        device: String,
        time: Timestamp,
        #[source]
        source: Box<LocaterError>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LocaterError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LocaterError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Config and usage problems map to exit code 1, data problems to 2.
    pub fn is_usage(&self) -> bool {
        match self {
            LocaterError::InvalidConfig(_) => true,
            LocaterError::Query { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
