use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{}format error at byte offset {offset}: {message}", fmt_path(path))]
    Format {
        path: Option<PathBuf>,
        offset: u64,
        message: String,
    },

    #[error("{}bad magic: expected {expected:?}, found {found:?}", fmt_path(path))]
    BadMagic {
        path: Option<PathBuf>,
        expected: String,
        found: String,
    },

    #[error("{}unsupported format version {found} (expected {expected})", fmt_path(path))]
    UnsupportedVersion {
        path: Option<PathBuf>,
        expected: u32,
        found: u32,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("codebook mismatch: {0}")]
    CodebookMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

fn fmt_path(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!("{}: ", p.display()),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// Attaches a file path to format-level errors that were raised by a reader
    /// working on an anonymous byte stream.
    pub(crate) fn with_path(self, p: impl Into<PathBuf>) -> Self {
        match self {
            Error::Format {
                path: None,
                offset,
                message,
            } => Error::Format {
                path: Some(p.into()),
                offset,
                message,
            },
            Error::BadMagic {
                path: None,
                expected,
                found,
            } => Error::BadMagic {
                path: Some(p.into()),
                expected,
                found,
            },
            Error::UnsupportedVersion {
                path: None,
                expected,
                found,
            } => Error::UnsupportedVersion {
                path: Some(p.into()),
                expected,
                found,
            },
            Error::Io { source, .. } => Error::Io {
                path: p.into(),
                source,
            },
            other => other,
        }
    }

    /// Process exit code used by the command-line front end:
    /// 2 for usage/configuration problems, 3 for data/format problems and
    /// 4 for internal invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { source, .. } => match source.kind() {
                io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied => 2,
                _ => 3,
            },
            Error::BadMagic { .. }
            | Error::DimensionMismatch { .. }
            | Error::CodebookMismatch(_)
            | Error::InvalidArgument(_) => 2,
            Error::Format { .. } | Error::UnsupportedVersion { .. } => 3,
            Error::Invariant(_) => 4,
        }
    }
}
