//! Companion-side errors: file-format failures keep their own distinct
//! variants so callers (and tests) can tell a bad magic from a truncation.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// File does not start with the expected magic bytes.
    BadMagic { path: PathBuf, found: [u8; 4] },
    /// Container format version is not supported.
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    /// File ends before the header or a tensor declared in it.
    Truncated { path: PathBuf, detail: String },
    /// Header disagrees with itself or with the body (undecodable header,
    /// shape/size mismatch, unknown dtype, missing tensor).
    HeaderMismatch { path: PathBuf, detail: String },
    Io { path: PathBuf, source: std::io::Error },
    Config(String),
    Core(srlab_core::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::BadMagic { path, found } => {
                write!(f, "{}: bad magic {found:?}", path.display())
            }
            Error::VersionMismatch { path, found, expected } => {
                write!(f, "{}: format version {found}, expected {expected}", path.display())
            }
            Error::Truncated { path, detail } => {
                write!(f, "{}: truncated file ({detail})", path.display())
            }
            Error::HeaderMismatch { path, detail } => {
                write!(f, "{}: header mismatch ({detail})", path.display())
            }
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Core(e) => Some(e),
            _ => None,
        }
    }
}

impl From<srlab_core::Error> for Error {
    fn from(e: srlab_core::Error) -> Self {
        Error::Core(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}
