//! Engine configuration, read from a TOML file.
//!
//! Every section and key is optional; missing keys take the defaults below.
//! Relative paths are resolved against the directory holding the file.
//!
//! ```toml
//! [embedding]
//! provider = "mock"        # or "store"
//! dim = 256
//! seed = 17
//! image_jitter = 0.3       # mock only: per-image noise added to image embeddings
//! store_path = "emb.bin"   # store only
//!
//! [weights]
//! gamma = 0.5
//! alpha = 0.5
//! beta = 0.5
//! eta = 0.5
//! w_head = 0.25
//! w_upper = 0.25
//! w_lower = 0.25
//! w_acc = 0.25
//!
//! [retrieval]
//! top_n = 50
//! theta = 0.5
//!
//! [paths]
//! index_dir = "index"
//! snapshot = "graph.json"
//!
//! [service]
//! session_ttl_secs = 1800
//! cors_origins = []        # empty allows any origin
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use pedsearch_core::encoders::{EmbeddingProvider, EmbeddingStore, MockProvider, StoreProvider};
use pedsearch_core::index::RetrievalParams;
use pedsearch_core::qhr::FusionWeights;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Overrides the config path given on the command line.
pub const CONFIG_ENV: &str = "PEDSEARCH_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Store,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: ProviderKind,
    pub dim: usize,
    pub seed: u64,
    pub image_jitter: f64,
    pub store_path: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Mock,
            dim: 256,
            seed: 17,
            image_jitter: 0.3,
            store_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub w_head: f64,
    pub w_upper: f64,
    pub w_lower: f64,
    pub w_acc: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        let d = FusionWeights::default();
        Self {
            gamma: d.gamma,
            alpha: d.alpha,
            beta: d.beta,
            eta: d.eta,
            w_head: d.w[0],
            w_upper: d.w[1],
            w_lower: d.w[2],
            w_acc: d.w[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_n: usize,
    pub theta: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let p = RetrievalParams::default();
        Self {
            top_n: p.top_n,
            theta: p.theta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub index_dir: Option<PathBuf>,
    /// Where the service writes the graph snapshot on shutdown.
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub session_ttl_secs: u64,
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_ttl_secs: 30 * 60,
            cors_origins: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub embedding: EmbeddingConfig,
    pub weights: WeightsConfig,
    pub retrieval: RetrievalConfig,
    pub paths: PathsConfig,
    pub service: ServiceConfig,
}

impl EngineConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: EngineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: base_dir.to_owned(),
            msg: e.to_string(),
        })?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_owned(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            ConfigError::Parse { msg, .. } => ConfigError::Parse {
                path: path.to_owned(),
                msg,
            },
            other => other,
        })
    }

    /// Loads the file named by `$PEDSEARCH_CONFIG` if set, else `cli_path`,
    /// else the defaults.
    pub fn load(cli_path: Option<&Path>) -> Result<Self, ConfigError> {
        let env = std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        match env.as_deref().or(cli_path) {
            Some(p) => Self::from_file(p),
            None => Ok(Self::default()),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.embedding.store_path);
        fix(&mut self.paths.index_dir);
        fix(&mut self.paths.snapshot);
    }

    pub fn params(&self) -> RetrievalParams {
        let w = &self.weights;
        RetrievalParams {
            weights: FusionWeights {
                gamma: w.gamma,
                alpha: w.alpha,
                beta: w.beta,
                eta: w.eta,
                w: [w.w_head, w.w_upper, w.w_lower, w.w_acc],
            },
            top_n: self.retrieval.top_n,
            theta: self.retrieval.theta,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.embedding.provider == ProviderKind::Store && self.embedding.store_path.is_none() {
            return Err(ConfigError::Invalid("embedding.provider = \"store\" needs embedding.store_path".into()));
        }
        if !self.embedding.image_jitter.is_finite() || self.embedding.image_jitter < 0.0 {
            return Err(ConfigError::Invalid("embedding.image_jitter must be finite and >= 0".into()));
        }
        if self.service.session_ttl_secs == 0 {
            return Err(ConfigError::Invalid("service.session_ttl_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn provider(&self) -> Result<Arc<dyn EmbeddingProvider>, ConfigError> {
        let e = &self.embedding;
        match e.provider {
            ProviderKind::Mock => {
                let p = MockProvider::new(e.dim, e.seed).map_err(|err| ConfigError::Invalid(err.to_string()))?;
                Ok(Arc::new(p.with_image_jitter(e.image_jitter)))
            }
            ProviderKind::Store => {
                let path = e.store_path.as_ref().ok_or_else(|| ConfigError::Invalid("missing embedding.store_path".into()))?;
                let store = EmbeddingStore::load(path).map_err(|err| ConfigError::Io {
                    path: path.clone(),
                    msg: err.to_string(),
                })?;
                if store.dim() != e.dim {
                    return Err(ConfigError::Invalid(format!("store dimension {} differs from embedding.dim {}", store.dim(), e.dim)));
                }
                Ok(Arc::new(StoreProvider::new(store)))
            }
        }
    }
}
