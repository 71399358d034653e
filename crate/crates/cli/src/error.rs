use mocha_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),

    #[error("check failed: {0}")]
    Check(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FORMAT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(CoreError::Format { .. }) => EXIT_FORMAT,
            CliError::Core(CoreError::Numerical(_) | CoreError::Degenerate(_)) | CliError::Check(_) => EXIT_NUMERICAL,
            CliError::Core(_) | CliError::Usage(_) | CliError::Config(_) | CliError::Io(..) => EXIT_USAGE,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let fmt = CliError::from(CoreError::Format { offset: 3, msg: "x".into() });
        assert_eq!(fmt.exit_code(), 2);
        assert_eq!(CliError::from(CoreError::Numerical("nan".into())).exit_code(), 3);
        assert_eq!(CliError::from(CoreError::Dimension("d".into())).exit_code(), 1);
        assert_eq!(CliError::Usage("u".into()).exit_code(), 1);
        assert_eq!(CliError::Check("row".into()).exit_code(), 3);
    }
}
