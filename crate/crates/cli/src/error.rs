use std::fmt;

use atamlab_core::Error;

/// Exit status contract: 1 for invalid input or configuration, 2 for failures while running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Validation = 1,
    Runtime = 2,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Validation,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Runtime,
            message: message.into(),
        }
    }

    pub fn from_core(e: Error) -> Self {
        let kind = match e {
            Error::Io { .. }
            | Error::Diverged { .. }
            | Error::StaleCache
            | Error::NonUnitWeight { .. }
            | Error::AngleOutOfRange(_)
            | Error::EmptyVector
            | Error::DegenerateVector
            | Error::InvalidMargin { .. } => ExitKind::Runtime,
            _ => ExitKind::Validation,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub fn write_file(path: &std::path::Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn create_dir(path: &std::path::Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::runtime(format!("cannot create output directory {}: {e}", path.display())))
}
