use std::path::PathBuf;

/// Errors raised across the toolkit.
///
/// The variants map onto the coarse categories the command-line front end
/// turns into exit codes: data problems (format, parse, range, argument) and
/// numeric failures are kept apart so callers can react differently.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported codec: {0}")]
    UnsupportedCodec(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("frequency {freq} Hz is at or above the spatial aliasing limit {f_sup} Hz")]
    Aliasing { freq: f64, f_sup: f64 },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite or ill-conditioned numbers.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
