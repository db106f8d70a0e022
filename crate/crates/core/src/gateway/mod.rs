//! Chat-completion client with record/replay fixtures.
//!
//! A [`Gateway`] runs in one of three [`Mode`]s:
//!
//! * `live`: every request goes to the provider.
//! * `cache`: a stored fixture answers if present; otherwise the provider
//!   is called and the reply recorded.
//! * `replay`: fixtures only. A missing fixture is [`GatewayError::NotRecorded`].
//!
//! Fixtures are keyed by [`request_digest`], which covers the provider,
//! model, temperature and messages but none of the transport settings.

mod fixtures;
mod http;
mod provider;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::RenderedPrompt;

pub use fixtures::{FixtureEntry, FixtureStore, FixtureSummary, RecordedRequest, RecordedResponse};
pub use http::{backoff_schedule, HttpCall, HttpReply, HttpTransport, Sleeper, ThreadSleeper, TransportError, UreqTransport};
pub use provider::WireFormat;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("API key environment variable `{var}` is not set")]
    AuthMissing { var: String },
    #[error("provider returned HTTP {status}: {body}")]
    ProviderError { status: u16, body: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("no fixture recorded for request {digest}")]
    NotRecorded { digest: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error("fixture store: {0}")]
    Fixture(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
}

fn default_max_output_tokens() -> u32 {
    2048
}

fn default_timeout_seconds() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider_name: String,
    pub endpoint_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the key, never the key.
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout_seconds")]
    pub timeout_seconds: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

impl ProviderConfig {
    pub fn openai(model_id: &str) -> Self {
        Self {
            provider_name: "openai".to_string(),
            endpoint_url: "https://api.openai.com/v1/chat/completions".to_string(),
            model_id: model_id.to_string(),
            api_key_env: "OPENAI_API_KEY".to_string(),
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            timeout_seconds: default_timeout_seconds(),
            max_retries: default_max_retries(),
        }
    }

    pub fn gemini(model_id: &str) -> Self {
        Self {
            provider_name: "gemini".to_string(),
            endpoint_url: "https://generativelanguage.googleapis.com/v1beta/models/{model}:generateContent"
                .to_string(),
            api_key_env: "GEMINI_API_KEY".to_string(),
            ..Self::openai(model_id)
        }
    }

    pub fn wire_format(&self) -> WireFormat {
        WireFormat::for_provider(&self.provider_name)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let err = |m: &str| Err(GatewayError::Config(m.to_string()));
        let absolute = ["http://", "https://"]
            .iter()
            .any(|scheme| self.endpoint_url.strip_prefix(scheme).is_some_and(|rest| !rest.is_empty()));
        if !absolute {
            return err("endpoint_url must be an absolute http(s) URL");
        }
        if self.model_id.trim().is_empty() {
            return err("model_id is empty");
        }
        if self.api_key_env.trim().is_empty() {
            return err("api_key_env is empty");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return err("temperature must be a finite value >= 0");
        }
        if self.max_output_tokens == 0 || self.timeout_seconds == 0 {
            return err("max_output_tokens and timeout_seconds must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub config: ProviderConfig,
}

impl ChatRequest {
    pub fn new(config: ProviderConfig, messages: Vec<ChatMessage>) -> Result<Self, GatewayError> {
        if !messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest("at least one user message is required".into()));
        }
        if messages.iter().any(|m| m.content.trim().is_empty()) {
            return Err(GatewayError::InvalidRequest("message content is empty".into()));
        }
        Ok(Self { messages, config })
    }

    pub fn from_prompt(config: ProviderConfig, prompt: &RenderedPrompt) -> Result<Self, GatewayError> {
        Self::new(config, vec![ChatMessage::user(prompt.text.clone())])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub from_cache: bool,
}

/// A provider reply plus the full response JSON, which fixtures keep for audit.
#[derive(Debug, Clone)]
pub struct BackendReply {
    pub response: ChatResponse,
    pub raw: serde_json::Value,
}

/// Whatever actually answers a request: the HTTP client in production, a
/// scripted stand-in in tests.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError>;
}

#[derive(Serialize)]
struct DigestInput<'a> {
    provider_name: &'a str,
    model_id: &'a str,
    temperature: f64,
    messages: &'a [ChatMessage],
}

/// Hex SHA-256 over provider name, model, temperature and messages.
pub fn request_digest(request: &ChatRequest) -> String {
    let input = DigestInput {
        provider_name: &request.config.provider_name,
        model_id: &request.config.model_id,
        temperature: request.config.temperature,
        messages: &request.messages,
    };
    let bytes = serde_json::to_vec(&input).expect("digest input serializes");
    hex::encode(Sha256::digest(&bytes))
}

type KeyLookup = dyn Fn(&str) -> Option<String> + Send + Sync;

/// Provider-backed [`ChatBackend`] with retry and exponential backoff.
pub struct HttpBackend {
    transport: Arc<dyn HttpTransport>,
    sleeper: Arc<dyn Sleeper>,
    key_lookup: Arc<KeyLookup>,
}

impl Default for HttpBackend {
    fn default() -> Self {
        Self::new(Arc::new(UreqTransport), Arc::new(ThreadSleeper))
    }
}

impl HttpBackend {
    pub fn new(transport: Arc<dyn HttpTransport>, sleeper: Arc<dyn Sleeper>) -> Self {
        Self {
            transport,
            sleeper,
            key_lookup: Arc::new(|var| std::env::var(var).ok()),
        }
    }

    /// Replaces the environment lookup used to resolve `api_key_env`.
    pub fn with_key_lookup(mut self, lookup: impl Fn(&str) -> Option<String> + Send + Sync + 'static) -> Self {
        self.key_lookup = Arc::new(lookup);
        self
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let config = &request.config;
        config.validate()?;
        let key = (self.key_lookup)(&config.api_key_env)
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| GatewayError::AuthMissing { var: config.api_key_env.clone() })?;
        let wire = config.wire_format();
        let call = wire.build_call(request, &key);

        let delays = backoff_schedule(config.max_retries);
        let mut attempts = 0u32;
        let mut last_error;
        let started = Instant::now();
        loop {
            attempts += 1;
            match self.transport.post(&call) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let parsed = wire.parse_reply(&reply.body)?;
                    return Ok(BackendReply {
                        response: ChatResponse {
                            content: parsed.content,
                            prompt_tokens: parsed.prompt_tokens,
                            completion_tokens: parsed.completion_tokens,
                            latency_ms: started.elapsed().as_millis() as u64,
                            from_cache: false,
                        },
                        raw: parsed.raw,
                    });
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    last_error = GatewayError::ProviderError { status: reply.status, body: reply.body };
                }
                Ok(reply) => {
                    return Err(GatewayError::ProviderError { status: reply.status, body: reply.body });
                }
                Err(TransportError::Timeout) => last_error = GatewayError::Timeout { attempts },
                Err(TransportError::Other(message)) => return Err(GatewayError::Transport(message)),
            }
            let Some(delay) = delays.get(attempts as usize - 1) else {
                return Err(last_error);
            };
            log::warn!("provider call failed ({last_error}); retrying in {delay:?}");
            self.sleeper.sleep(*delay);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Live,
    Cache,
    Replay,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Mode::Live),
            "cache" => Ok(Mode::Cache),
            "replay" => Ok(Mode::Replay),
            other => Err(format!("unknown mode `{other}` (expected live|cache|replay)")),
        }
    }
}

/// Counting semaphore bounding in-flight provider calls.
struct Limiter {
    available: Mutex<usize>,
    released: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(permits: usize) -> Self {
        Self { available: Mutex::new(permits.max(1)), released: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().expect("limiter poisoned");
        while *available == 0 {
            available = self.released.wait(available).expect("limiter poisoned");
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter poisoned") += 1;
        self.0.released.notify_one();
    }
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

pub struct Gateway {
    mode: Mode,
    store: Option<FixtureStore>,
    backend: Arc<dyn ChatBackend>,
    limiter: Limiter,
}

impl Gateway {
    pub fn new(mode: Mode, store: Option<FixtureStore>, backend: Arc<dyn ChatBackend>) -> Result<Self, GatewayError> {
        if mode != Mode::Live && store.is_none() {
            return Err(GatewayError::Config(format!("{mode:?} mode requires a fixture directory")));
        }
        Ok(Self { mode, store, backend, limiter: Limiter::new(DEFAULT_MAX_IN_FLIGHT) })
    }

    /// Replay-only gateway over `store`; never touches the network.
    pub fn replay(store: FixtureStore) -> Self {
        Self::new(Mode::Replay, Some(store), Arc::new(NoNetwork)).expect("store present")
    }

    pub fn with_max_in_flight(mut self, permits: usize) -> Self {
        self.limiter = Limiter::new(permits);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> Option<&FixtureStore> {
        self.store.as_ref()
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if request.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        match (self.mode, &self.store) {
            (Mode::Replay, Some(store)) => store.replay(request),
            (Mode::Cache, Some(store)) => match store.replay(request) {
                Ok(hit) => Ok(hit),
                Err(GatewayError::NotRecorded { .. }) => {
                    let reply = self.call_backend(request)?;
                    store.record(request, &reply)?;
                    Ok(reply.response)
                }
                Err(e) => Err(e),
            },
            _ => Ok(self.call_backend(request)?.response),
        }
    }

    fn call_backend(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let _permit = self.limiter.acquire();
        self.backend.send(request)
    }
}

/// Backend for replay-only runs. Any call is a bug in the caller's setup.
pub struct NoNetwork;

impl ChatBackend for NoNetwork {
    fn send(&self, _request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        Err(GatewayError::Transport("network access disabled".into()))
    }
}
