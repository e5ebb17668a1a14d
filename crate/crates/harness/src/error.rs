use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] groupmuon_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("diverged at step {step} (loss {loss})")]
    Diverged { step: u64, loss: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),
    #[error("config write error: {0}")]
    TomlWrite(#[from] toml::ser::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
