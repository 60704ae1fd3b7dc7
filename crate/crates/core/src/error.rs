use thiserror::Error;

use crate::model::Group;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{what}: need at least {needed} records for group {group}, got {got}")]
    TooFewRecords {
        what: &'static str,
        group: Group,
        needed: usize,
        got: usize,
    },

    #[error("singular least-squares design for {context}: {reason}")]
    SingularFit { context: String, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("price oracle has not been trained")]
    Untrained,

    #[error("exploitation pricing requested before the exploration phase ended")]
    NotFitted,

    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
