use std::fmt;

/// Exit status for configuration and usage errors.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status for failures while a stage runs.
pub const EXIT_RUNTIME: u8 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub stage: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(stage: &'static str, cause: impl fmt::Display) -> Self {
        CliError { code: EXIT_CONFIG, stage, message: cause.to_string() }
    }

    pub fn runtime(stage: &'static str, cause: impl fmt::Display) -> Self {
        CliError { code: EXIT_RUNTIME, stage, message: cause.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.message)
    }
}

impl From<recap_core::pipeline::PipelineError> for CliError {
    fn from(e: recap_core::pipeline::PipelineError) -> Self {
        let code = if e.stage == "config" { EXIT_CONFIG } else { EXIT_RUNTIME };
        CliError { code, stage: e.stage, message: e.message }
    }
}

pub type CliResult<T> = Result<T, CliError>;
