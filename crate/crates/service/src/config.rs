//! Service configuration: a TOML file plus environment overrides for
//! secrets and paths.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use mnemo_core::analyzer::{ModelAnalyzer, RemoteChatModel};
use mnemo_core::embedding::{CachedEmbedder, RemoteEmbedder, DEFAULT_DIMENSION, DEFAULT_TIMEOUT};
use mnemo_core::remote::RemoteConfig;
use mnemo_core::{Analyzer, EmbeddingProvider, Engine, EngineConfig, HashedBowEmbedder, RuleBasedAnalyzer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_ENV: &str = "MNEMO_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    #[default]
    Hashed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub provider: EmbeddingKind,
    pub dimension: usize,
    pub seed: u64,
    /// Cached texts; 0 disables the cache.
    pub cache_capacity: usize,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub token: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_concurrent: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            provider: EmbeddingKind::Hashed,
            dimension: DEFAULT_DIMENSION,
            seed: HashedBowEmbedder::DEFAULT_SEED,
            cache_capacity: 50_000,
            endpoint: None,
            model: None,
            token: None,
            timeout_ms: DEFAULT_TIMEOUT.as_millis() as u64,
            retries: 2,
            max_concurrent: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzerKind {
    #[default]
    RuleBased,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzerSection {
    pub provider: AnalyzerKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub token: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_concurrent: usize,
    pub temperature: f64,
}

impl Default for AnalyzerSection {
    fn default() -> Self {
        AnalyzerSection {
            provider: AnalyzerKind::RuleBased,
            endpoint: None,
            model: None,
            token: None,
            timeout_ms: 60_000,
            retries: 2,
            max_concurrent: 4,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
    /// Where snapshots live. Without one the server keeps memory in RAM only.
    pub data_dir: Option<PathBuf>,
    /// Bearer token required on every request when set.
    pub token: Option<String>,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection { bind: "127.0.0.1:8080".into(), data_dir: Some(PathBuf::from("mnemo-data")), token: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub engine: EngineConfig,
    pub embedding: EmbeddingSection,
    pub analyzer: AnalyzerSection,
    pub server: ServerSection,
}

fn remote(
    what: &str,
    endpoint: &Option<String>,
    model: &Option<String>,
    token: &Option<String>,
    timeout_ms: u64,
    retries: u32,
    max_concurrent: usize,
) -> Result<RemoteConfig, ConfigError> {
    let need = |v: &Option<String>, field: &str| {
        v.clone()
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| ConfigError::Invalid(format!("[{what}] {field} is required for the remote provider")))
    };
    Ok(RemoteConfig {
        endpoint: need(endpoint, "endpoint")?,
        model: need(model, "model")?,
        token: token.clone(),
        timeout: Duration::from_millis(timeout_ms),
        retries,
        max_concurrent: max_concurrent.max(1),
    })
}

impl ServiceConfig {
    /// Reads `path` (or defaults when `None`) and applies environment
    /// overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?;
                Self::from_toml(&text).map_err(|e| match e {
                    ConfigError::Invalid(message) => ConfigError::Syntax { path: p.to_path_buf(), message },
                    other => other,
                })?
            }
            None => ServiceConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// `MNEMO_EMBEDDING_TOKEN`, `MNEMO_ANALYZER_TOKEN`, `MNEMO_SERVER_TOKEN`,
    /// `MNEMO_DATA_DIR` and `MNEMO_BIND` override the file.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get("MNEMO_EMBEDDING_TOKEN") {
            self.embedding.token = Some(v);
        }
        if let Some(v) = get("MNEMO_ANALYZER_TOKEN") {
            self.analyzer.token = Some(v);
        }
        if let Some(v) = get("MNEMO_SERVER_TOKEN") {
            self.server.token = Some(v);
        }
        if let Some(v) = get("MNEMO_DATA_DIR") {
            self.server.data_dir = Some(PathBuf::from(v));
        }
        if let Some(v) = get("MNEMO_BIND") {
            self.server.bind = v;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.engine.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.embedding.dimension == 0 {
            return Err(ConfigError::Invalid("embedding dimension must be positive".into()));
        }
        if self.embedding.provider == EmbeddingKind::Remote {
            self.embedding_remote()?;
        }
        if self.analyzer.provider == AnalyzerKind::Remote {
            self.analyzer_remote()?;
        }
        Ok(())
    }

    fn embedding_remote(&self) -> Result<RemoteConfig, ConfigError> {
        let e = &self.embedding;
        remote("embedding", &e.endpoint, &e.model, &e.token, e.timeout_ms, e.retries, e.max_concurrent)
    }

    fn analyzer_remote(&self) -> Result<RemoteConfig, ConfigError> {
        let a = &self.analyzer;
        remote("analyzer", &a.endpoint, &a.model, &a.token, a.timeout_ms, a.retries, a.max_concurrent)
    }

    pub fn build_embedder(&self) -> Result<Arc<dyn EmbeddingProvider>, ConfigError> {
        let invalid = |e: mnemo_core::Error| ConfigError::Invalid(e.to_string());
        let base: Arc<dyn EmbeddingProvider> = match self.embedding.provider {
            EmbeddingKind::Hashed => {
                Arc::new(HashedBowEmbedder::new(self.embedding.dimension, self.embedding.seed).map_err(invalid)?)
            }
            EmbeddingKind::Remote => {
                Arc::new(RemoteEmbedder::new(self.embedding_remote()?, self.embedding.dimension).map_err(invalid)?)
            }
        };
        Ok(if self.embedding.cache_capacity > 0 {
            Arc::new(CachedEmbedder::new(base, self.embedding.cache_capacity))
        } else {
            base
        })
    }

    pub fn build_analyzer(&self) -> Result<Arc<dyn Analyzer>, ConfigError> {
        Ok(match self.analyzer.provider {
            AnalyzerKind::RuleBased => Arc::new(RuleBasedAnalyzer::new()),
            AnalyzerKind::Remote => {
                let model = RemoteChatModel::new(self.analyzer_remote()?)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?
                    .with_temperature(self.analyzer.temperature);
                Arc::new(ModelAnalyzer::new(model))
            }
        })
    }

    pub fn build_engine(&self) -> Result<Engine, ConfigError> {
        Engine::new(self.engine.clone(), self.build_analyzer()?, self.build_embedder()?)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = ServiceConfig::from_toml("").unwrap();
        assert_eq!(cfg, ServiceConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn sections_parse() {
        let cfg = ServiceConfig::from_toml(
            r#"
            [engine]
            k_topics = 5
            max_tokens = 800
            channel_order = "working_first"

            [analyzer]
            provider = "remote"
            endpoint = "http://localhost:9999/v1/chat/completions"
            model = "small"

            [server]
            bind = "0.0.0.0:9000"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.engine.k_topics, 5);
        assert_eq!(cfg.analyzer.provider, AnalyzerKind::Remote);
        cfg.validate().unwrap();
        assert!(cfg.build_engine().is_ok());
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(ServiceConfig::from_toml("[engine]\nk_topic = 3").is_err());
        let cfg = ServiceConfig::from_toml("[engine]\nmax_tokens = 10").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ServiceConfig::from_toml("[analyzer]\nprovider = \"remote\"").unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn env_overrides_secrets() {
        let mut cfg = ServiceConfig::default();
        cfg.apply_env(|k| (k == "MNEMO_ANALYZER_TOKEN").then(|| "s3cret".to_string()));
        assert_eq!(cfg.analyzer.token.as_deref(), Some("s3cret"));
        assert_eq!(cfg.server.token, None);
    }
}
