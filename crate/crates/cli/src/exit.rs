use std::fmt;

use modelshift::Error;
use serde::Serialize;

pub const OK: i32 = 0;
pub const OTHER: i32 = 1;
pub const USAGE: i32 = 2;
pub const FORMAT: i32 = 3;
pub const COLLAPSE: i32 = 4;
pub const DIVERGENCE: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad configuration, or a missing input path.
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e {
                Error::Config(_) => "usage",
                Error::Format { .. }
                | Error::CorruptPackage { .. }
                | Error::Trace { .. }
                | Error::Json(_)
                | Error::Dataset(_)
                | Error::Shape { .. }
                | Error::Structure(_)
                | Error::Tensor(_) => "format",
                Error::Collapse { .. } => "collapse",
                Error::Divergence { .. } => "divergence",
                Error::Io(_) | Error::Csv(_) => "io",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "usage" => USAGE,
            "format" => FORMAT,
            "collapse" => COLLAPSE,
            "divergence" => DIVERGENCE,
            _ => OTHER,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            error: &'a str,
            exit_code: i32,
            message: String,
        }
        let r = Report { error: self.kind(), exit_code: self.exit_code(), message: self.to_string() };
        serde_json::to_string(&r).expect("error report serialises")
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
