use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("id {id} out of range for table `{table}` ({rows} rows)")]
    IdOutOfRange { table: String, id: u64, rows: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;

macro_rules! bail {
    ($variant:ident, $($fmt:tt)+) => {
        return Err($crate::error::Error::$variant(format!($($fmt)+)))
    };
}
pub(crate) use bail;
