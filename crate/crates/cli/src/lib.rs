//! Command-line pipeline (`simulate`, `generate`, `build-dataset`, `train`,
//! `eval`, `predict`, `serve`) and the HTTP prediction service.

pub mod commands;
pub mod heatmap;
pub mod service;

use std::fmt;

pub use commands::{run, Cli, Command};

/// A failure reported as `error: code=<CODE> msg=<message>`.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        CliError {
            code: code.into(),
            message: message.into(),
        }
    }

    /// Single line, safe for `grep`/`cut`.
    pub fn line(&self) -> String {
        let msg: String = self.message.chars().map(|c| if c == '\n' || c == '\r' { ' ' } else { c }).collect();
        format!("error: code={} msg={}", self.code, msg)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<radiomap_core::Error> for CliError {
    fn from(e: radiomap_core::Error) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

impl From<radiomap_nn::NnError> for CliError {
    fn from(e: radiomap_nn::NnError) -> Self {
        radiomap_core::Error::from(e).into()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("IO", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("JSON", e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::new("IMAGE", e.to_string())
    }
}
