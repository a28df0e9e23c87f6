//! Run manifests: provenance of a stage's outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ToolConfig;
use crate::store::{to_pretty_json, write_atomic, StoreError};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub stage: String,
    pub config: ToolConfig,
    pub seed: u64,
    /// `live:<endpoint>#<model>` or `replay:<script sha256>`.
    pub provider: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine: Option<String>,
    /// Content hash of every input actually read, by role.
    pub inputs: BTreeMap<String, String>,
    /// Hash over stage, config, inputs and service identities; a stage
    /// whose recorded key matches is skipped.
    pub input_key: String,
    pub outputs: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
    #[serde(default)]
    pub summary: Value,
}

impl RunManifest {
    pub fn load(path: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        write_atomic(path, to_pretty_json(self).as_bytes())
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
