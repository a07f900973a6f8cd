//! Uniform access to text models.
//!
//! A [`ModelBackend`] declares what it can do through [`BackendCapabilities`].
//! Detectors that need teacher-forced token scores refuse backends without
//! `supports_token_scoring`; prompt-based detectors accept anything that can
//! generate text (completion or chat).

mod http;
mod journal;
mod mock;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use http::{ApiFlavor, HttpBackend, HttpBackendConfig, RawResponse, RetryPolicy, Transport, TransportError};
pub use journal::{Journal, JournalRecord, ReplayIndex};
pub use mock::{CompletionMode, MockBackend, MockInterface, MockScript, ScoringMode, REF_MARKER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop_sequences: Vec<String>,
}

impl GenerationParams {
    /// Deterministic decoding.
    pub fn greedy(max_tokens: u32) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens,
            stop_sequences: Vec::new(),
        }
    }

    pub fn sampling(temperature: f64, top_p: f64, max_tokens: u32) -> Self {
        Self {
            temperature,
            top_p,
            max_tokens,
            stop_sequences: Vec::new(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self::greedy(256)
    }
}

/// One token of a teacher-forced scoring pass.
///
/// `logprob` is the natural log of the token's conditional probability and is
/// `None` when the backend had no context to condition on (usually the first
/// token). Such tokens are excluded from every downstream statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProb {
    pub token_text: String,
    pub logprob: Option<f64>,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub supports_completion: bool,
    pub supports_chat: bool,
    pub supports_token_scoring: bool,
}

impl BackendCapabilities {
    pub fn can_generate(&self) -> bool {
        self.supports_completion || self.supports_chat
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Other(String),
}

impl FinishReason {
    pub fn from_wire(s: Option<&str>) -> Self {
        match s {
            Some("stop") | None => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            Some(other) => FinishReason::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend `{backend}` does not support {capability}")]
    Capability {
        backend: String,
        capability: &'static str,
    },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("rate limited: HTTP 429 on all {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("canned completions have no entry for prompt hash {0}")]
    CannedMiss(String),
    #[error("scripted logprob table has no entry for {0:?}")]
    ScriptMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay journal has no response for {0}")]
    ReplayMiss(String),
}

pub trait ModelBackend: Send + Sync {
    /// Opaque model identity recorded in every result.
    fn model_id(&self) -> &str;

    fn capabilities(&self) -> BackendCapabilities;

    /// Generates a continuation (or, for chat backends, a reply) for `prompt`.
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, BackendError>;

    /// Teacher-forced per-token log-probabilities of `text` under the
    /// backend's own tokenization.
    fn score_tokens(&self, text: &str) -> Result<Vec<TokenLogProb>, BackendError>;
}

pub type SharedBackend = Arc<dyn ModelBackend>;

pub(crate) fn check_prompt(prompt: &str) -> Result<(), BackendError> {
    if prompt.is_empty() {
        Err(BackendError::InvalidRequest("prompt must be non-empty".into()))
    } else {
        Ok(())
    }
}

pub(crate) fn check_text(text: &str) -> Result<(), BackendError> {
    if text.is_empty() {
        Err(BackendError::InvalidRequest("text to score must be non-empty".into()))
    } else {
        Ok(())
    }
}

/// Declarative backend description as it appears in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendSpec {
    Http(HttpBackendConfig),
    Mock(MockScript),
}

impl BackendSpec {
    pub fn label(&self) -> &str {
        match self {
            BackendSpec::Http(c) => c.label(),
            BackendSpec::Mock(m) => &m.id,
        }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, BackendSpec::Http(_))
    }

    /// Instantiates the backend. Remote calls are appended to `journal` when
    /// one is given.
    pub fn build(&self, journal: Option<Arc<Journal>>) -> Result<SharedBackend, BackendError> {
        match self {
            BackendSpec::Http(c) => Ok(Arc::new(HttpBackend::connect(c.clone(), journal)?)),
            BackendSpec::Mock(m) => Ok(Arc::new(MockBackend::new(m.clone()))),
        }
    }

    /// Instantiates the backend so that remote calls are answered from a
    /// recorded journal instead of the network.
    pub fn build_replay(&self, index: &Arc<ReplayIndex>) -> Result<SharedBackend, BackendError> {
        match self {
            BackendSpec::Http(c) => Ok(Arc::new(HttpBackend::replaying(c.clone(), index.clone()))),
            BackendSpec::Mock(m) => Ok(Arc::new(MockBackend::new(m.clone()))),
        }
    }
}
