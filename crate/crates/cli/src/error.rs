use std::path::{Path, PathBuf};

/// Process exit codes.
pub mod code {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const UNREADABLE: u8 = 2;
    pub const BAD_WEIGHTS: u8 = 3;
    pub const MISSING_PROMPT: u8 = 4;
    pub const COUNT_MISMATCH: u8 = 5;
    pub const PARSE: u8 = 6;
    /// Command-line usage errors.
    pub const USAGE: u8 = 64;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read {path}: {detail}")]
    Unreadable { path: PathBuf, detail: String },

    #[error("frame {index} ({path}): {detail}")]
    UnreadableFrame {
        index: usize,
        path: PathBuf,
        detail: String,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad weights {path}: {detail}")]
    BadWeights { path: PathBuf, detail: String },

    #[error("missing or empty prompt: {0}")]
    MissingPrompt(PathBuf),

    #[error("{what}: {left} vs {right} lines")]
    CountMismatch {
        what: String,
        left: usize,
        right: usize,
    },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] nightrack_core::Error),

    #[error("self-test failed: {0}")]
    SelfTest(String),
}

impl CliError {
    pub fn unreadable(path: &Path, detail: impl ToString) -> Self {
        CliError::Unreadable {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        }
    }

    pub fn write(path: &Path, source: std::io::Error) -> Self {
        CliError::Write {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Unreadable { .. } | CliError::UnreadableFrame { .. } => code::UNREADABLE,
            CliError::BadWeights { .. } => code::BAD_WEIGHTS,
            CliError::MissingPrompt(_) => code::MISSING_PROMPT,
            CliError::CountMismatch { .. } => code::COUNT_MISMATCH,
            CliError::Parse { .. } | CliError::Config(_) => code::PARSE,
            CliError::Write { .. } | CliError::Core(_) | CliError::SelfTest(_) => code::FAILURE,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
