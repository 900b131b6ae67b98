use vasg_core::Error;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Internal,
    /// Missing or malformed inputs and configuration.
    Input,
    /// Unknown ids in a recommendation query.
    Query,
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Input,
            message: message.into(),
        }
    }

    pub fn query(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Query,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Internal,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Internal => 1,
            ErrorKind::Input => 2,
            ErrorKind::Query => 3,
        }
    }

    /// Wraps a library error with the stage it came from.
    pub fn stage(stage: &str) -> impl FnOnce(Error) -> CliError + '_ {
        move |e| {
            let kind = match &e {
                Error::Io { .. }
                | Error::Parse { .. }
                | Error::EmptyInput(_)
                | Error::NoUsersSurvive
                | Error::MissingFeatures(_)
                | Error::Json { .. }
                | Error::Config(_)
                | Error::UnknownId { .. } => ErrorKind::Input,
                _ => ErrorKind::Internal,
            };
            CliError {
                kind,
                message: format!("{stage}: {e}"),
            }
        }
    }
}
