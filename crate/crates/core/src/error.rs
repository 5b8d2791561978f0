use std::fmt;

/// Errors raised anywhere in the toolkit.
///
/// Every variant maps onto one [`ErrorClass`], which the CLI turns into an
/// exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("rank deficiency: {0}")]
    Rank(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("non-finite value in {term}: {detail}")]
    NonFinite { term: String, detail: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Contract,
    Numerical,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Contract => 3,
            ErrorClass::Numerical => 4,
            ErrorClass::Io => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Contract => "contract",
            ErrorClass::Numerical => "numerical",
            ErrorClass::Io => "io",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Dimension(_) | Error::Contract(_) => ErrorClass::Contract,
            Error::Rank(_) | Error::DegenerateVariance(_) | Error::NonFinite { .. } => ErrorClass::Numerical,
            Error::Format(_) | Error::Checksum { .. } | Error::Io(_) => ErrorClass::Io,
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
