//! Process exit codes: 0 ok, 2 usage or config, 3 training failure,
//! 4 missing or failed prerequisite, 5 incompatible inputs.

use std::fmt;

use headpool::Error;

pub const USAGE: i32 = 2;
pub const TRAINING: i32 = 3;
pub const PREREQUISITE: i32 = 4;
pub const INCOMPATIBLE: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(USAGE, message)
    }

    pub fn prerequisite(message: impl Into<String>) -> Self {
        Self::new(PREREQUISITE, message)
    }

    /// Maps a library error; `fallback` covers kinds without a fixed code.
    pub fn from_core(e: Error, fallback: i32) -> Self {
        let code = match &e {
            Error::ArchMismatch(_) => INCOMPATIBLE,
            Error::TeacherGate(_) | Error::Untrained(_) => PREREQUISITE,
            Error::InvalidArgument(_) | Error::TimestepOutOfRange { .. } | Error::MissingCondition { .. } => USAGE,
            Error::NonFinite(_) => TRAINING,
            _ => fallback,
        };
        Self::new(code, e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub trait Context<T> {
    /// Library error mapped with `fallback`, prefixed by `what`.
    fn ctx(self, fallback: i32, what: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for headpool::Result<T> {
    fn ctx(self, fallback: i32, what: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            let mut c = CliError::from_core(e, fallback);
            c.message = format!("{what}: {}", c.message);
            c
        })
    }
}
