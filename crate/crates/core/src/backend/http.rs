//! OpenAI-compatible HTTP backend.
//!
//! Uses `POST {endpoint}/completions` (with `echo` + `logprobs` for token
//! scoring) or `POST {endpoint}/chat/completions` for chat-only models.
//! Request bodies are serialized once; every retry sends the same bytes.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::journal::{Journal, JournalRecord, ReplayIndex};
use super::{
    check_prompt, check_text, BackendCapabilities, BackendError, Completion, FinishReason,
    GenerationParams, ModelBackend, TokenLogProb,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApiFlavor {
    #[default]
    Completions,
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    /// Fraction of the nominal delay added as uniform random jitter.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 1000,
            max_delay_ms: 30_000,
            jitter: 0.25,
        }
    }
}

impl RetryPolicy {
    /// Nominal delay before retry number `attempt` (1-based), without jitter.
    pub fn nominal_delay(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    fn delay(&self, attempt: u32) -> Duration {
        let nominal = self.nominal_delay(attempt);
        if self.jitter <= 0.0 {
            return nominal;
        }
        let extra = nominal.as_secs_f64() * self.jitter * rand::rng().random::<f64>();
        nominal + Duration::from_secs_f64(extra)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Label used in results and journals; defaults to `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub api: ApiFlavor,
    /// Whether the completions endpoint honours `echo` with `logprobs`.
    #[serde(default = "yes")]
    pub token_scoring: bool,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn yes() -> bool {
    true
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}

impl HttpBackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            id: None,
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            api: ApiFlavor::Completions,
            token_scoring: true,
            retry: RetryPolicy::default(),
            max_in_flight: default_in_flight(),
            timeout_secs: default_timeout(),
        }
    }

    pub fn label(&self) -> &str {
        self.id.as_deref().unwrap_or(&self.model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug)]
pub enum TransportError {
    /// Connection-level failure; retried.
    Retryable(String),
    /// Not retried.
    Fatal(BackendError),
}

pub trait Transport: Send + Sync {
    fn post(&self, url: &str, body: &[u8], api_key: Option<&str>) -> Result<RawResponse, TransportError>;
}

struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl Transport for ReqwestTransport {
    fn post(&self, url: &str, body: &[u8], api_key: Option<&str>) -> Result<RawResponse, TransportError> {
        let mut req = self
            .client
            .post(url)
            .header("content-type", "application/json")
            .body(body.to_vec());
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .text()
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        Ok(RawResponse { status, body })
    }
}

struct ReplayTransport {
    backend: String,
    index: Arc<ReplayIndex>,
}

impl Transport for ReplayTransport {
    fn post(&self, url: &str, body: &[u8], _api_key: Option<&str>) -> Result<RawResponse, TransportError> {
        self.index
            .lookup(&self.backend, url, body)
            .ok_or_else(|| {
                TransportError::Fatal(BackendError::ReplayMiss(format!(
                    "{} {url} ({} byte body)",
                    self.backend,
                    body.len()
                )))
            })
    }
}

/// Counting gate bounding concurrent requests.
struct InFlightGate {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlightGate {
    fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut used = self.used.lock().expect("gate poisoned");
        while *used >= self.cap {
            used = self.freed.wait(used).expect("gate poisoned");
        }
        *used += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a InFlightGate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().expect("gate poisoned");
        *used -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    transport: Box<dyn Transport>,
    journal: Option<Arc<Journal>>,
    gate: InFlightGate,
    sleep: bool,
}

impl HttpBackend {
    pub fn connect(config: HttpBackendConfig, journal: Option<Arc<Journal>>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self::with_transport(config, Box::new(ReqwestTransport { client }), journal))
    }

    /// Answers every request from `index`; never touches the network.
    pub fn replaying(config: HttpBackendConfig, index: Arc<ReplayIndex>) -> Self {
        let backend = config.label().to_string();
        let mut b = Self::with_transport(config, Box::new(ReplayTransport { backend, index }), None);
        b.sleep = false;
        b
    }

    pub fn with_transport(
        config: HttpBackendConfig,
        transport: Box<dyn Transport>,
        journal: Option<Arc<Journal>>,
    ) -> Self {
        let gate = InFlightGate::new(config.max_in_flight);
        Self {
            config,
            transport,
            journal,
            gate,
            sleep: true,
        }
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    fn api_key(&self) -> Option<String> {
        self.config
            .api_key_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
    }

    /// Posts `body` with retries on 429, 5xx and connection failures.
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = self.url(path);
        let bytes = serde_json::to_vec(body).expect("JSON values always serialize");
        let key = self.api_key();
        let policy = &self.config.retry;
        let max_attempts = policy.max_attempts.max(1);
        let mut last_err = None;

        for attempt in 1..=max_attempts {
            let result = {
                let _slot = self.gate.acquire();
                self.transport.post(&url, &bytes, key.as_deref())
            };
            if let Some(journal) = &self.journal {
                journal.append(&JournalRecord::new(
                    self.config.label(),
                    &url,
                    &bytes,
                    &result,
                    attempt,
                ));
            }
            match result {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return serde_json::from_str(&resp.body).map_err(|e| {
                        BackendError::Protocol(format!("response is not JSON: {e}"))
                    });
                }
                Ok(resp) if resp.status == 429 => {
                    last_err = Some(BackendError::RateLimited { attempts: attempt });
                }
                Ok(resp) if resp.status >= 500 => {
                    last_err = Some(BackendError::Transport {
                        attempts: attempt,
                        message: format!("HTTP {}: {}", resp.status, resp.body),
                    });
                }
                Ok(resp) => {
                    return Err(BackendError::Http {
                        status: resp.status,
                        body: resp.body,
                    })
                }
                Err(TransportError::Fatal(e)) => return Err(e),
                Err(TransportError::Retryable(message)) => {
                    last_err = Some(BackendError::Transport {
                        attempts: attempt,
                        message,
                    });
                }
            }
            if attempt < max_attempts && self.sleep {
                let delay = policy.delay(attempt);
                log::debug!(
                    "{}: attempt {attempt}/{max_attempts} failed, retrying in {delay:?}",
                    self.config.label()
                );
                std::thread::sleep(delay);
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    fn generation_body(&self, prompt: &str, params: &GenerationParams) -> Value {
        let mut body = match self.config.api {
            ApiFlavor::Completions => json!({
                "model": self.config.model,
                "prompt": prompt,
            }),
            ApiFlavor::Chat => json!({
                "model": self.config.model,
                "messages": [{"role": "user", "content": prompt}],
            }),
        };
        let obj = body.as_object_mut().expect("object literal");
        obj.insert("max_tokens".into(), json!(params.max_tokens));
        obj.insert("temperature".into(), json!(params.temperature));
        obj.insert("top_p".into(), json!(params.top_p));
        if !params.stop_sequences.is_empty() {
            obj.insert("stop".into(), json!(params.stop_sequences));
        }
        body
    }
}

fn first_choice(resp: &Value) -> Result<&Value, BackendError> {
    resp.get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))
}

/// Extracts the echoed prompt tokens of a completions response.
pub(crate) fn parse_echo_logprobs(resp: &Value, text: &str) -> Result<Vec<TokenLogProb>, BackendError> {
    let choice = first_choice(resp)?;
    let lp = choice
        .get("logprobs")
        .filter(|v| !v.is_null())
        .ok_or_else(|| BackendError::Protocol("response carries no logprobs".into()))?;
    let tokens = lp
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Protocol("logprobs.tokens missing".into()))?;
    let values = lp
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Protocol("logprobs.token_logprobs missing".into()))?;
    if tokens.len() != values.len() {
        return Err(BackendError::Protocol(format!(
            "{} tokens but {} logprobs",
            tokens.len(),
            values.len()
        )));
    }
    let offsets = lp.get("text_offset").and_then(Value::as_array);

    let mut out = Vec::new();
    let mut covered = 0usize;
    for (i, (tok, val)) in tokens.iter().zip(values).enumerate() {
        let token_text = tok
            .as_str()
            .ok_or_else(|| BackendError::Protocol(format!("token {i} is not a string")))?
            .to_string();
        // Generated tokens follow the echoed prompt; stop at the prompt's end.
        let in_prompt = match offsets.and_then(|o| o.get(i)).and_then(Value::as_u64) {
            Some(off) => (off as usize) < text.len(),
            None => covered < text.len(),
        };
        if !in_prompt {
            break;
        }
        covered += token_text.len();
        let logprob = match val {
            Value::Null => None,
            v => {
                let x = v
                    .as_f64()
                    .ok_or_else(|| BackendError::Protocol(format!("logprob {i} is not a number")))?;
                if x > 1e-6 {
                    return Err(BackendError::Protocol(format!("positive logprob {x} at token {i}")));
                }
                Some(x.min(0.0))
            }
        };
        out.push(TokenLogProb {
            token_text,
            logprob,
            position: out.len(),
        });
    }

    let squash = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
    let joined: String = out.iter().map(|t| t.token_text.as_str()).collect();
    if out.is_empty() || !squash(&joined).contains(&squash(text)) {
        return Err(BackendError::Protocol(format!(
            "echoed tokens cover {} of {} prompt characters",
            joined.len(),
            text.len()
        )));
    }
    Ok(out)
}

impl ModelBackend for HttpBackend {
    fn model_id(&self) -> &str {
        self.config.label()
    }

    fn capabilities(&self) -> BackendCapabilities {
        match self.config.api {
            ApiFlavor::Completions => BackendCapabilities {
                supports_completion: true,
                supports_chat: false,
                supports_token_scoring: self.config.token_scoring,
            },
            ApiFlavor::Chat => BackendCapabilities {
                supports_completion: false,
                supports_chat: true,
                supports_token_scoring: false,
            },
        }
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, BackendError> {
        params.validate()?;
        check_prompt(prompt)?;
        let body = self.generation_body(prompt, params);
        let (path, pointer) = match self.config.api {
            ApiFlavor::Completions => ("completions", "/text"),
            ApiFlavor::Chat => ("chat/completions", "/message/content"),
        };
        let resp = self.post_json(path, &body)?;
        let choice = first_choice(&resp)?;
        let text = choice
            .pointer(pointer)
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Protocol(format!("choice has no {pointer}")))?;
        Ok(Completion {
            text: text.to_string(),
            finish_reason: FinishReason::from_wire(
                choice.get("finish_reason").and_then(Value::as_str),
            ),
        })
    }

    fn score_tokens(&self, text: &str) -> Result<Vec<TokenLogProb>, BackendError> {
        if !self.capabilities().supports_token_scoring {
            return Err(BackendError::Capability {
                backend: self.config.label().to_string(),
                capability: "token scoring",
            });
        }
        check_text(text)?;
        let body = json!({
            "model": self.config.model,
            "prompt": text,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 0,
        });
        let resp = self.post_json("completions", &body)?;
        parse_echo_logprobs(&resp, text)
    }
}
