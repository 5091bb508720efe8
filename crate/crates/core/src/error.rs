use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument is outside its admissible domain (axis, pool size, beam width...).
    #[error("argument error: {0}")]
    Argument(String),

    /// An index (token id, class id) is out of range.
    #[error("range error: {0}")]
    Range(String),

    /// A caller violated an operation contract (non-scalar backward, empty input...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("input too short: {have} samples, need at least {need}")]
    InputTooShort { have: usize, need: usize },

    #[error("transfer error: {0}")]
    Transfer(String),

    /// Bad dataset content, usually naming the offending record.
    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad input data or files, as opposed to programming/usage errors.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::InputTooShort { .. }
                | Error::Data(_)
                | Error::Io { .. }
                | Error::Transfer(_)
        )
    }
}
