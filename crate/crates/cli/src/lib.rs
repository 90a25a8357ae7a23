//! Experiment harness: config-driven seeded runs over the estimators in
//! the core library, aggregation across seeds, result-table emission, and
//! plot-ready data export.

pub mod config;
pub mod emit;
pub mod plot;
pub mod presets;
pub mod runner;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: relkit::error::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown preset '{0}'")]
    UnknownPreset(String),

    #[error("fit exceeded the time budget: {context} took {secs:.1}s, limit {limit}s")]
    Timeout {
        context: String,
        secs: f64,
        limit: u64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config parse: {0}")]
    Toml(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Attach run coordinates to an error from the core library.
    pub fn core(context: impl Into<String>, source: relkit::error::Error) -> HarnessError {
        HarnessError::Core {
            context: context.into(),
            source,
        }
    }

    fn kind_tag(&self) -> &'static str {
        match self {
            HarnessError::Core { .. } => "core",
            HarnessError::Config(_) => "config",
            HarnessError::UnknownPreset(_) => "unknown_preset",
            HarnessError::Timeout { .. } => "timeout",
            HarnessError::Unsupported(_) => "unsupported",
            HarnessError::Toml(_) => "toml",
            HarnessError::Io(_) => "io",
            HarnessError::Json(_) => "json",
        }
    }

    /// Machine-readable form for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.to_string(),
            "kind": self.kind_tag(),
        })
        .to_string()
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
