use std::io;

/// Errors produced anywhere in the prior pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing {kind} embedding for {name:?}")]
    MissingEmbedding { kind: &'static str, name: String },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("record {index} (image {image_id:?}, phrase {phrase:?}): {source}")]
    Record {
        index: usize,
        image_id: String,
        phrase: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("stage {stage} failed for category {category:?}: {source}")]
    Stage {
        stage: &'static str,
        category: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// True for errors caused by malformed data or files, as opposed to I/O failures.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Io(_) => false,
            Error::Stage { source, .. } | Error::Record { source, .. } => source.is_data_error(),
            _ => true,
        }
    }
}
