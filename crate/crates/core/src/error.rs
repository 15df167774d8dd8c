use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model syntax error on line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("invalid prior `{source_text}`: {message}")]
    Prior {
        source_text: String,
        message: String,
    },

    #[error("model specification: {0}")]
    Model(String),

    #[error("data: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("sampler: {0}")]
    Sampler(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn prior(src: &str, message: impl Into<String>) -> Self {
        Error::Prior {
            source_text: src.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn syntax(line: usize, message: impl Into<String>) -> Self {
        Error::Syntax {
            line,
            message: message.into(),
        }
    }
}
