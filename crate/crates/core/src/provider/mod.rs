//! Completion and embedding provider contracts.
//!
//! Every pipeline stage talks to language models through these two traits.
//! [`replay`] implements them from a script file so whole runs are
//! reproducible offline; [`live`] talks to an OpenAI-compatible HTTP API.

mod hashing;
pub mod live;
pub mod replay;

use thiserror::Error;

use crate::digest::sha256_hex;

pub use hashing::HashingEmbedder;
pub use live::{LiveEmbedder, LiveProvider, LiveSettings};
pub use replay::{ReplayEmbedder, ReplayEntry, ReplayProvider, ReplayScript};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider request failed after {attempts} attempt(s): {message}")]
    Retryable { attempts: u32, message: String },
    #[error("no scripted response for prompt {key}")]
    Unscripted { key: String },
    #[error("scripted responses for prompt {key} cover {available} sample(s), sample {sample} requested")]
    ScriptExhausted { key: String, sample: u32, available: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid replay script: {0}")]
    Script(String),
    #[error("malformed provider payload: {0}")]
    Malformed(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Retryable { .. })
    }
}

/// One completion call.
///
/// `sample` distinguishes independent draws of the same prompt (the m-way
/// summaries, the independent rule attempts, benchmark repeats) so replay
/// scripts can serve a different scripted response to each draw regardless
/// of call order.
#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub sample: u32,
    pub temperature: f64,
}

impl<'a> CompletionRequest<'a> {
    pub fn new(prompt: &'a str, temperature: f64) -> Self {
        Self { prompt, sample: 0, temperature }
    }

    pub fn with_sample(mut self, sample: u32) -> Self {
        self.sample = sample;
        self
    }

    /// Idempotency key sent with live requests; identical for retries of
    /// the same draw.
    pub fn idempotency_key(&self) -> String {
        format!("{}-{}", prompt_key(self.prompt), self.sample)
    }
}

pub trait CompletionProvider: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError>;
    /// Stable description recorded in run manifests.
    fn identity(&self) -> String;
}

pub trait Embedder: Send + Sync {
    /// Unit-norm embedding of fixed dimension [`Embedder::dim`].
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
    fn identity(&self) -> String;
    fn dim(&self) -> usize;
}

/// Replay-script key of a prompt (or of a text to embed).
pub fn prompt_key(prompt: &str) -> String {
    sha256_hex(prompt)
}

pub(crate) fn normalize_embedding(mut v: Vec<f64>) -> Result<Vec<f64>, ProviderError> {
    if v.is_empty() || !crate::scalar::normalize_in_place(&mut v) {
        return Err(ProviderError::Malformed("zero or non-finite embedding".into()));
    }
    Ok(v)
}
