//! Deterministic script-driven providers.
//!
//! A script is a JSON object keyed by the SHA-256 hex digest of the prompt
//! (or of the text to embed). Values are one of
//!
//! * `"text"`: the response for every sample of that prompt,
//! * `["t0", "t1", ...]`: the response for sample 0, 1, ...,
//! * `{"embedding": [..]}`: the vector returned by the replay embedder.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    normalize_embedding, prompt_key, CompletionProvider, CompletionRequest, Embedder, ProviderError,
};
use crate::digest::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReplayEntry {
    Text(String),
    Samples(Vec<String>),
    Embedding { embedding: Vec<f64> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplayScript {
    entries: BTreeMap<String, ReplayEntry>,
}

impl ReplayScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ProviderError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ProviderError> {
        let script: Self = serde_json::from_str(text).map_err(|e| ProviderError::Script(e.to_string()))?;
        if let Some(bad) = script.entries.keys().find(|k| !is_sha256_hex(k)) {
            return Err(ProviderError::Script(format!("key `{bad}` is not a SHA-256 hex digest")));
        }
        Ok(script)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("script serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_json())
    }

    /// Digest of the canonical script, recorded as the provider identity.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_json())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert_text(&mut self, prompt: &str, response: impl Into<String>) {
        self.entries.insert(prompt_key(prompt), ReplayEntry::Text(response.into()));
    }

    pub fn insert_samples(&mut self, prompt: &str, responses: Vec<String>) {
        self.entries.insert(prompt_key(prompt), ReplayEntry::Samples(responses));
    }

    pub fn insert_embedding(&mut self, text: &str, embedding: Vec<f64>) {
        self.entries.insert(prompt_key(text), ReplayEntry::Embedding { embedding });
    }

    pub fn contains(&self, prompt: &str) -> bool {
        self.entries.contains_key(&prompt_key(prompt))
    }

    fn get(&self, key: &str) -> Option<&ReplayEntry> {
        self.entries.get(key)
    }
}

fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

#[derive(Debug, Clone)]
pub struct ReplayProvider {
    script: Arc<ReplayScript>,
}

impl ReplayProvider {
    pub fn new(script: Arc<ReplayScript>) -> Self {
        Self { script }
    }
}

impl CompletionProvider for ReplayProvider {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        if request.prompt.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let key = prompt_key(request.prompt);
        match self.script.get(&key) {
            Some(ReplayEntry::Text(t)) => Ok(t.clone()),
            Some(ReplayEntry::Samples(list)) => list.get(request.sample as usize).cloned().ok_or(
                ProviderError::ScriptExhausted { key, sample: request.sample, available: list.len() },
            ),
            Some(ReplayEntry::Embedding { .. }) | None => Err(ProviderError::Unscripted { key }),
        }
    }

    fn identity(&self) -> String {
        format!("replay:{}", self.script.digest())
    }
}

#[derive(Debug, Clone)]
pub struct ReplayEmbedder {
    script: Arc<ReplayScript>,
    dim: usize,
}

impl ReplayEmbedder {
    /// Fails if the scripted vectors disagree on dimension.
    pub fn new(script: Arc<ReplayScript>) -> Result<Self, ProviderError> {
        let mut dim = None;
        for entry in script.entries.values() {
            if let ReplayEntry::Embedding { embedding } = entry {
                match dim {
                    None => dim = Some(embedding.len()),
                    Some(d) if d != embedding.len() => {
                        return Err(ProviderError::Dimension { expected: d, got: embedding.len() })
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { script, dim: dim.unwrap_or(0) })
    }
}

impl Embedder for ReplayEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let key = prompt_key(text);
        match self.script.get(&key) {
            Some(ReplayEntry::Embedding { embedding }) => normalize_embedding(embedding.clone()),
            _ => Err(ProviderError::Unscripted { key }),
        }
    }

    fn identity(&self) -> String {
        format!("replay-embedder:{}", self.script.digest())
    }

    fn dim(&self) -> usize {
        self.dim
    }
}
