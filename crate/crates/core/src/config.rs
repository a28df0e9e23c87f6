//! Versioned tool configuration (TOML). Every field has a default, so an
//! empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{Approach, LeakageMode};
use crate::miner::DEFAULT_KEYWORDS;
use crate::model::PipelineConfig;
use crate::optimizer::AblationMode;
use crate::perf::{DEFAULT_HOTSPOT_THRESHOLD, DEFAULT_RUNS};
use crate::provider::LiveSettings;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unsupported config version {0} (expected {CONFIG_VERSION})")]
    Version(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// OpenAI-compatible `/embeddings` endpoint from `[provider]`.
    Live,
    /// Local feature-hashing embedder; no network.
    Hashing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    /// Dimension of the hashing embedder.
    pub hashing_dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { kind: EmbedderKind::Live, hashing_dim: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub binary: String,
    /// Exact `semgrep --version` output required, when set.
    pub version: Option<String>,
    /// Memoize snippet runs during rule generation.
    pub cache: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { binary: "semgrep".into(), version: None, cache: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinerConfig {
    pub keywords: Vec<String>,
    pub llm_verify: bool,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self { keywords: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(), llm_verify: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub approach: Approach,
    pub leakage: LeakageMode,
    pub repeats: u32,
    pub k: usize,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub mode: AblationMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            approach: Approach::StrategyLib,
            leakage: LeakageMode::Standard,
            repeats: 3,
            k: 4,
            bm25_k1: 1.2,
            bm25_b: 0.75,
            mode: AblationMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerfConfig {
    pub runs: usize,
    pub hotspot_threshold: f64,
}

impl Default for PerfConfig {
    fn default() -> Self {
        Self { runs: DEFAULT_RUNS, hotspot_threshold: DEFAULT_HOTSPOT_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub version: u32,
    pub pipeline: PipelineConfig,
    pub provider: LiveSettings,
    pub embedder: EmbedderConfig,
    pub engine: EngineConfig,
    pub miner: MinerConfig,
    pub eval: EvalConfig,
    pub perf: PerfConfig,
    /// Worker threads; 0 lets the runtime pick one per core.
    pub workers: usize,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            pipeline: PipelineConfig::default(),
            provider: LiveSettings::default(),
            embedder: EmbedderConfig::default(),
            engine: EngineConfig::default(),
            miner: MinerConfig::default(),
            eval: EvalConfig::default(),
            perf: PerfConfig::default(),
            workers: 0,
        }
    }
}

impl ToolConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version(self.version));
        }
        self.pipeline.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let checks = [
            (self.eval.repeats >= 1, "eval.repeats must be at least 1"),
            (self.eval.k >= 1, "eval.k must be at least 1"),
            (self.perf.runs >= 2, "perf.runs must be at least 2"),
            ((0.0..=1.0).contains(&self.perf.hotspot_threshold), "perf.hotspot_threshold must lie in [0,1]"),
            (self.embedder.hashing_dim >= 1, "embedder.hashing_dim must be at least 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(ConfigError::Invalid(msg.to_string())),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        let cfg = ToolConfig::from_toml("", "empty").unwrap();
        assert_eq!(cfg, ToolConfig::default());
        assert_eq!(cfg.pipeline.m_summaries, 3);
        assert_eq!(cfg.eval.repeats, 3);
        assert_eq!(cfg.perf.runs, 6);
    }

    #[test]
    fn round_trip_and_overrides() {
        let cfg = ToolConfig::from_toml("[pipeline]\neps_sim = 0.95\nseed = 7\n[engine]\ncache = false\n", "t").unwrap();
        assert_eq!(cfg.pipeline.eps_sim, 0.95);
        assert!(!cfg.engine.cache);
        assert_eq!(ToolConfig::from_toml(&cfg.to_toml(), "rt").unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(ToolConfig::from_toml("version = 2", "v"), Err(ConfigError::Version(2))));
        assert!(ToolConfig::from_toml("[pipeline]\neps_sim = 1.5", "e").is_err());
        assert!(ToolConfig::from_toml("[perf]\nruns = 1", "r").is_err());
        assert!(ToolConfig::from_toml("typo = 1", "u").is_err());
    }
}
