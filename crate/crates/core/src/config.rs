//! Run configuration: one JSON file, relative paths resolved against the
//! file's directory, `SCHEMALINK_DATA_ROOT` overriding the data root.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    BackendError, ChatCompletionProvider, LlmClient, Provider, ProviderConfig, ReplayProvider,
    ResponseCache, RetryPolicy, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE,
};
use crate::corpus::{BenchmarkFormat, DatabaseLocator, SampleOptions};
use crate::linker::LinkOptions;
use crate::prompts::{PromptError, PromptSet};
use crate::sqlgen::{CompareMode, ExecOptions, Setting};

pub const DATA_ROOT_ENV: &str = "SCHEMALINK_DATA_ROOT";
pub const REPLAY_BACKEND: &str = "replay";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Settings generated by `run`; empty skips generation.
    pub settings: Vec<Setting>,
    pub compare: CompareMode,
    pub timeout_s: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            settings: Vec::new(),
            compare: CompareMode::Bag,
            timeout_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dataset: PathBuf,
    #[serde(default = "default_format")]
    pub format: BenchmarkFormat,
    pub data_root: PathBuf,
    #[serde(default = "default_db_template")]
    pub db_template: String,
    #[serde(default)]
    pub samples: SampleOptions,
    #[serde(default)]
    pub providers: BTreeMap<String, ProviderConfig>,
    /// `replay`, or the name of an entry in `providers`.
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub replay_fixtures: Option<PathBuf>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub linking: LinkOptions,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub strict_scope: bool,
    #[serde(default = "default_runs_root")]
    pub runs_root: PathBuf,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
}

fn default_format() -> BenchmarkFormat {
    BenchmarkFormat::Bird
}
fn default_db_template() -> String {
    DatabaseLocator::DEFAULT_TEMPLATE.to_string()
}
fn default_backend() -> String {
    REPLAY_BACKEND.to_string()
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}
fn default_workers() -> usize {
    4
}
fn default_runs_root() -> PathBuf {
    PathBuf::from("runs")
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Config {
    /// Reads a config file and resolves its relative paths against its directory.
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Config = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        // absolute, so the copy frozen into a run directory resolves the same way
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        cfg.resolve_paths(&base);
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.dataset);
        resolve(base, &mut self.data_root);
        resolve(base, &mut self.runs_root);
        if let Some(p) = &mut self.replay_fixtures {
            resolve(base, p);
        }
        if let Some(p) = &mut self.prompts_dir {
            resolve(base, p);
        }
    }

    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.data_root = PathBuf::from(root);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ConfigError::Invalid(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.generation.timeout_s <= 0.0 {
            return Err(ConfigError::Invalid("generation.timeout_s must be positive".into()));
        }
        if self.backend == REPLAY_BACKEND {
            if self.replay_fixtures.is_none() {
                return Err(ConfigError::Invalid(
                    "the replay backend needs `replay_fixtures`".into(),
                ));
            }
        } else if !self.providers.contains_key(&self.backend) {
            return Err(ConfigError::Invalid(format!(
                "backend `{}` is neither `replay` nor a configured provider",
                self.backend
            )));
        }
        Ok(())
    }

    pub fn locator(&self) -> DatabaseLocator {
        DatabaseLocator {
            root: self.data_root.clone(),
            template: self.db_template.clone(),
        }
    }

    pub fn exec_options(&self) -> ExecOptions {
        ExecOptions {
            timeout: std::time::Duration::from_secs_f64(self.generation.timeout_s),
            compare: self.generation.compare,
        }
    }

    pub fn prompts(&self) -> Result<PromptSet, ConfigError> {
        Ok(match &self.prompts_dir {
            Some(dir) => PromptSet::with_overrides(dir)?,
            None => PromptSet::default(),
        })
    }

    /// Short digest of the configuration, used in run directory names.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..8].to_string()
    }

    /// Builds the completion client. Credentials are checked here, before
    /// any work starts.
    pub fn client(&self, cache_dir: Option<&Path>) -> Result<LlmClient, ConfigError> {
        let (provider, rpm): (Arc<dyn Provider>, Option<u32>) = if self.backend == REPLAY_BACKEND {
            let path = self.replay_fixtures.as_ref().expect("validated");
            (Arc::new(ReplayProvider::load(path)?), None)
        } else {
            let pc = &self.providers[&self.backend];
            (
                Arc::new(ChatCompletionProvider::from_config(&self.backend, pc)?),
                pc.requests_per_minute,
            )
        };
        let mut client = LlmClient::new(provider)
            .with_rate_limit(rpm)
            .with_retry(self.retry)
            .with_sampling(self.temperature, self.max_tokens);
        if let Some(dir) = cache_dir {
            client = client.with_cache(ResponseCache::open(dir)?);
        }
        Ok(client)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults_and_resolved_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"dataset": "dev.json", "data_root": "dbs", "replay_fixtures": "replay"}"#,
        )
        .unwrap();
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.dataset, dir.path().join("dev.json"));
        assert_eq!(cfg.replay_fixtures.as_deref(), Some(dir.path().join("replay").as_path()));
        assert_eq!(cfg.workers, 4);
        assert_eq!(cfg.temperature, 0.3);
        assert_eq!(cfg.samples, SampleOptions::default());
        assert_eq!(cfg.generation.compare, CompareMode::Bag);
        assert_eq!(cfg.digest().len(), 8);
    }

    #[test]
    fn unknown_backend_and_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"dataset": "d", "data_root": "r", "backend": "nope"}"#).unwrap();
        assert!(matches!(Config::load(&path), Err(ConfigError::Invalid(_))));
        std::fs::write(&path, r#"{"dataset": "d", "data_root": "r", "typo": 1}"#).unwrap();
        assert!(matches!(Config::load(&path), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn missing_credentials_fail_at_client_construction() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"dataset": "d", "data_root": "r", "backend": "live",
                "providers": {"live": {"base_url": "http://127.0.0.1:9", "model": "m",
                                       "api_key_env": "SCHEMALINK_UNSET_KEY_FOR_TEST"}}}"#,
        )
        .unwrap();
        let cfg = Config::load(&path).unwrap();
        assert!(matches!(
            cfg.client(None),
            Err(ConfigError::Backend(BackendError::Config(_)))
        ));
    }
}
