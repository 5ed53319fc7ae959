use std::fmt;

/// A failure with a stable code. The binary prints it as a single
/// `CODE message` line.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new("E_IO", format!("{}: {e}", path.display()))
    }

    /// The one-line form, with any embedded newlines flattened.
    pub fn line(&self) -> String {
        format!("{} {}", self.code, self.message.replace(['\n', '\r'], " "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<uapath::Error> for CliError {
    fn from(e: uapath::Error) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new("E_JSON", e.to_string())
    }
}
