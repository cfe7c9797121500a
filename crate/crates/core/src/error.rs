use thiserror::Error;

/// Errors raised by the simulator and the algorithms running on top of it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("physical address space exhausted: need {needed} pages from {base:#x}")]
    Exhausted { base: u64, needed: u64 },

    #[error("virtual page {0:#x} is not mapped")]
    Unmapped(u64),

    #[error("unknown actor {0}")]
    UnknownActor(u32),

    #[error("invalid adversary script: {0}")]
    Script(String),

    /// The memory the OS handed out does not have the structure an honest
    /// allocation would have. The enclave refuses to build a channel on it.
    #[error("memory manipulation suspected: {0}")]
    MemoryManipulation(String),

    #[error("invalid detector config: {0}")]
    Config(String),

    #[error("no valid m for W={ways}, N={instances}")]
    NoValidM { ways: usize, instances: usize },

    #[error("anomaly: {0}")]
    Anomaly(crate::detector::AnomalyReason),

    #[error("classifier model has not been trained")]
    Untrained,

    #[error("invalid experiment spec: {0}")]
    Spec(String),

    #[error("io: {0}")]
    Io(String),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
