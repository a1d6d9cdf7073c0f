use std::path::PathBuf;

/// Errors produced by the simulator, models and experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown channel {channel} (valid range 1..={count})")]
    UnknownChannel { channel: usize, count: usize },

    #[error("packet injected at {time}s lies outside the current slot [{start}s, {end}s)")]
    OutsideSlot { time: f64, start: f64, end: f64 },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("records span more than one GoP ({first} and {other})")]
    MixedGop { first: u64, other: u64 },

    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("dataset contains a single class ({0}); both labels are required for training")]
    SingleClass(u8),

    #[error("model file not found: {0}")]
    MissingModel(PathBuf),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
