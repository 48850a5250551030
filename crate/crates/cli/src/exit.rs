use std::fmt;

use taocache::trace::TraceError;
use taocache::Error;

pub const SUCCESS: u8 = 0;
pub const CONFIG: u8 = 2;
pub const INFEASIBLE: u8 = 3;
pub const DATA: u8 = 4;
pub const INTERNAL: u8 = 5;

/// Invalid or missing configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Inputs are readable but inconsistent (missing pairs, mismatched shapes).
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

fn library_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible { .. } => INFEASIBLE,
        Error::Parameter(_) | Error::PlanInvalid(_) => CONFIG,
        Error::TerminalState | Error::UndefinedScore { .. } => INTERNAL,
        Error::Shape { .. }
        | Error::Length { .. }
        | Error::NonFinite { .. }
        | Error::TraceIncomplete { .. }
        | Error::Metadata(_)
        | Error::Trace(_)
        | Error::Io(_)
        | Error::Json(_) => DATA,
    }
}

/// Exit status for an error, from the first classifiable cause in its chain.
pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return CONFIG;
        }
        if cause.is::<DataError>() || cause.is::<TraceError>() {
            return DATA;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return library_code(e);
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() || cause.is::<csv::Error>() {
            return DATA;
        }
    }
    INTERNAL
}
