use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] agam_core::Error),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("extent mismatch in {}: expected {expected:?}, found {found:?}", path.display())]
    ExtentMismatch {
        path: PathBuf,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("attribute length mismatch for {what}: expected {expected}, found {found}")]
    AttributeLength {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("split overlap: class {class} is in both {first} and {second}")]
    SplitOverlap {
        class: u32,
        first: &'static str,
        second: &'static str,
    },
    #[error("manifest error in {}: {msg}", path.display())]
    Manifest { path: PathBuf, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{0} gradient check row(s) failed")]
    GradCheck(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        let path = path.into();
        if source.kind() == io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 1 for usage and configuration problems, 2 for
    /// everything that went wrong at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Core(agam_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}
