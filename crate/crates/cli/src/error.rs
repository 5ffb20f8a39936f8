use std::fmt;
use std::path::{Path, PathBuf};

use olor_core::ErrorCategory;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    Syntax,
    UnknownKey,
    MissingKey,
    Type,
    Invariant,
}

impl fmt::Display for DiagnosticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Syntax => "syntax error",
            Self::UnknownKey => "unknown key",
            Self::MissingKey => "missing required key",
            Self::Type => "type error",
            Self::Invariant => "invalid value",
        })
    }
}

/// A configuration problem, located in the file when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub file: Option<PathBuf>,
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl Diagnostic {
    pub fn new(kind: DiagnosticKind, key: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            kind,
            file: None,
            line: None,
            key: key.map(str::to_string),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.file, self.line) {
            (Some(file), Some(line)) => write!(f, "{}:{line}: ", file.display())?,
            (Some(file), None) => write!(f, "{}: ", file.display())?,
            (None, _) => {}
        }
        write!(f, "{}", self.kind)?;
        if let Some(key) = &self.key {
            write!(f, " `{key}`")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(Diagnostic),
    #[error(transparent)]
    Core(#[from] olor_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("output directory {0} already exists; pass --overwrite to replace it")]
    OutputExists(PathBuf),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Core(e) => match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Numeric => 3,
                ErrorCategory::Io => 4,
            },
            Self::CheckFailed(_) => 3,
            Self::Io { .. } | Self::OutputExists(_) => 4,
        }
    }
}

impl From<Diagnostic> for CliError {
    fn from(d: Diagnostic) -> Self {
        Self::Config(d)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
