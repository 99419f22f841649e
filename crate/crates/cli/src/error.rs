use riskadj_core::Error as CoreError;

/// Failures raised by the front end itself.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Numerical(String),
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

fn core_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_) | CoreError::InvalidInput(_) | CoreError::Shape(_) | CoreError::NotInterpretable(_) => {
            EXIT_USAGE
        }
        CoreError::Io { .. } | CoreError::Parse { .. } | CoreError::Json(_) => EXIT_IO,
        CoreError::Numerical { .. } | CoreError::Divergence { .. } => EXIT_NUMERICAL,
    }
}

/// Exit status for an error chain. The first classified cause wins.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Parse(_) => EXIT_IO,
                CliError::Numerical(_) => EXIT_NUMERICAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return core_code(e);
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_IO;
        }
    }
    1
}
