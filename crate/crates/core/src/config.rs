//! Run configuration: a single TOML file with flag overrides applied by
//! the CLI (flags win).

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::llm::DecodeParams;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: Option<String>,
    pub url: Option<String>,
    pub model: Option<String>,
    pub replay_path: Option<PathBuf>,
    pub api_key_env: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: Some("mock".into()),
            url: None,
            model: None,
            replay_path: None,
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub shots: u8,
    pub exemplar_id: Option<String>,
    pub system_template: Option<PathBuf>,
    pub token_budget: usize,
    pub truncate_on_overflow: bool,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection {
            shots: 0,
            exemplar_id: None,
            system_template: None,
            token_budget: 8192,
            truncate_on_overflow: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out_dir: PathBuf,
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            out_dir: PathBuf::from("out"),
            jobs: 1,
        }
    }
}

/// The whole config file. Every section is optional; defaults match the
/// zero-shot mock setup.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusPaths,
    pub backend: BackendConfig,
    pub decode: DecodeParams,
    pub prompt: PromptSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run.jobs == 0 {
            return Err(ConfigError::Invalid("run.jobs must be at least 1".into()));
        }
        if self.prompt.token_budget == 0 {
            return Err(ConfigError::Invalid(
                "prompt.token_budget must be positive".into(),
            ));
        }
        if self.prompt.shots > 1 {
            return Err(ConfigError::Invalid(
                "prompt.shots must be 0 or 1".into(),
            ));
        }
        Ok(())
    }
}
