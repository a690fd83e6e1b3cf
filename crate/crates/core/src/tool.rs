//! The boundary between the engine and whatever actually runs tools.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::value::Params;

/// A failed tool invocation. `code` is the machine-readable tag used for
/// error classification; free-text errors have none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolError {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    pub message: String,
}

impl ToolError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: Some(code.into()),
            message: message.into(),
        }
    }

    pub fn untagged(message: impl Into<String>) -> Self {
        Self {
            code: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ToolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.code {
            Some(code) => write!(f, "[{code}] {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ToolError {}

/// Executes tools on behalf of the engine.
pub trait ToolExecutor {
    fn is_registered(&self, tool: &str) -> bool;
    fn execute(&mut self, tool: &str, params: &Params) -> Result<Value, ToolError>;
}

impl<T: ToolExecutor + ?Sized> ToolExecutor for &mut T {
    fn is_registered(&self, tool: &str) -> bool {
        (**self).is_registered(tool)
    }

    fn execute(&mut self, tool: &str, params: &Params) -> Result<Value, ToolError> {
        (**self).execute(tool, params)
    }
}

impl<T: ToolExecutor + ?Sized> ToolExecutor for Box<T> {
    fn is_registered(&self, tool: &str) -> bool {
        (**self).is_registered(tool)
    }

    fn execute(&mut self, tool: &str, params: &Params) -> Result<Value, ToolError> {
        (**self).execute(tool, params)
    }
}
