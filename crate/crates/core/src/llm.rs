//! Chat-completion gateway.
//!
//! Every model call in the crate goes through [`Gateway`]. The gateway
//! resolves the model's [`DecodingProfile`], fingerprints the request,
//! retries transient failures with exponential backoff and hands the request
//! to a [`ChatBackend`]: the OpenAI-compatible HTTP client, a replay store of
//! recorded fixtures, a recorder wrapping another backend, or any closure.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::retrieval::Embedder;

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileClass {
    /// Greedy decoding: temperature 0, top_p 1.
    Deterministic,
    /// Reasoning models with long outputs: temperature 1, top_p 1.
    #[serde(alias = "long-form")]
    LongForm,
    /// Explicit sampling temperature, used for self-consistency voting.
    Sampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecodingProfile {
    class: ProfileClass,
    temperature: f64,
    top_p: f64,
    max_output_tokens: u32,
}

impl DecodingProfile {
    pub fn deterministic(max_output_tokens: u32) -> Self {
        DecodingProfile {
            class: ProfileClass::Deterministic,
            temperature: 0.0,
            top_p: 1.0,
            max_output_tokens,
        }
    }

    pub fn long_form(max_output_tokens: u32) -> Self {
        DecodingProfile {
            class: ProfileClass::LongForm,
            temperature: 1.0,
            top_p: 1.0,
            max_output_tokens,
        }
    }

    pub fn sampling(temperature: f64, top_p: f64, max_output_tokens: u32) -> Result<Self> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::Invalid(format!(
                "temperature {temperature} must be >= 0"
            )));
        }
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(Error::Invalid(format!("top_p {top_p} must lie in (0, 1]")));
        }
        Ok(DecodingProfile {
            class: ProfileClass::Sampling,
            temperature,
            top_p,
            max_output_tokens,
        })
    }

    pub fn for_class(class: ProfileClass, max_output_tokens: u32) -> Self {
        match class {
            ProfileClass::Deterministic => Self::deterministic(max_output_tokens),
            ProfileClass::LongForm | ProfileClass::Sampling => Self::long_form(max_output_tokens),
        }
    }

    pub fn class(&self) -> ProfileClass {
        self.class
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn top_p(&self) -> f64 {
        self.top_p
    }

    pub fn max_output_tokens(&self) -> u32 {
        self.max_output_tokens
    }

    /// Values actually sent on the wire; the fixed classes always override
    /// whatever temperature and top_p they carry.
    fn wire_values(&self) -> (f64, f64) {
        match self.class {
            ProfileClass::Deterministic => (0.0, 1.0),
            ProfileClass::LongForm => (1.0, 1.0),
            ProfileClass::Sampling => (self.temperature, self.top_p),
        }
    }
}

/// A request as it leaves the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub class: ProfileClass,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Distinguishes repeated samples of the same prompt. Not sent over HTTP.
    pub sample_index: u32,
}

impl ChatRequest {
    /// SHA-256 over the canonical JSON form of the request.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection resets, 429, 5xx.
    Transient(String),
    /// Will fail again: bad request, auth failure, malformed response.
    Rejected(String),
    /// No recorded fixture for this fingerprint.
    ReplayMiss(String),
}

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendError::Transient(m) => write!(f, "transient: {m}"),
            BackendError::Rejected(m) => write!(f, "rejected: {m}"),
            BackendError::ReplayMiss(fp) => write!(f, "replay miss: {fp}"),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, BackendError>;
}

impl<F> ChatBackend for F
where
    F: Fn(&ChatRequest) -> std::result::Result<String, BackendError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        self(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            base_delay: Duration::from_secs(1),
            factor: 2,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
            factor: 2,
        }
    }

    /// Delay before attempt `attempt + 1`, counting attempts from 1.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(attempt.saturating_sub(1))
    }
}

/// Outcome of one gateway call.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub fingerprint: String,
    pub attempts: u32,
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub base_url: Option<String>,
    /// Name of the environment variable that holds the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub profile: ProfileClass,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
}

fn default_max_output_tokens() -> u32 {
    DEFAULT_MAX_OUTPUT_TOKENS
}

impl ModelConfig {
    pub fn new(profile: ProfileClass) -> Self {
        ModelConfig {
            base_url: None,
            api_key_env: None,
            profile,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    pub fn decoding_profile(&self) -> DecodingProfile {
        DecodingProfile::for_class(self.profile, self.max_output_tokens)
    }
}

/// Endpoint configuration file:
///
/// ```toml
/// [models.qwen2_5_72b]
/// base_url = "http://localhost:8000/v1"
/// api_key_env = "QWEN_API_KEY"
/// profile = "deterministic"
///
/// [embedders.bge_m3]
/// base_url = "http://localhost:8001/v1"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    #[serde(default)]
    pub models: BTreeMap<String, ModelConfig>,
    #[serde(default)]
    pub embedders: BTreeMap<String, EmbedderConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub base_url: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
}

impl EndpointConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    models: BTreeMap<String, ModelConfig>,
    retry: RetryPolicy,
    width: usize,
    warnings: Mutex<Vec<String>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Gateway {
            backend,
            models: BTreeMap::new(),
            retry: RetryPolicy::default(),
            width: 1,
            warnings: Mutex::new(Vec::new()),
        }
    }

    pub fn with_model(mut self, name: impl Into<String>, config: ModelConfig) -> Self {
        self.models.insert(name.into(), config);
        self
    }

    pub fn with_models(mut self, models: BTreeMap<String, ModelConfig>) -> Self {
        self.models.extend(models);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Maximum number of requests in flight from [`Gateway::map_parallel`].
    pub fn with_parallelism(mut self, width: usize) -> Self {
        self.width = width.max(1);
        self
    }

    pub fn parallelism(&self) -> usize {
        self.width
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    pub fn model(&self, name: &str) -> Result<&ModelConfig> {
        self.models
            .get(name)
            .ok_or_else(|| Error::UnknownModel(name.to_string()))
    }

    pub fn profile_for(&self, model: &str) -> Result<DecodingProfile> {
        Ok(self.model(model)?.decoding_profile())
    }

    /// Drain warnings emitted since the last call.
    pub fn take_warnings(&self) -> Vec<String> {
        std::mem::take(&mut *self.warnings.lock().unwrap())
    }

    fn warn(&self, message: String) {
        log::warn!("{message}");
        self.warnings.lock().unwrap().push(message);
    }

    pub fn request(
        &self,
        model: &str,
        messages: &[Message],
        profile: &DecodingProfile,
        sample_index: u32,
    ) -> Result<ChatRequest> {
        self.model(model)?;
        let (temperature, top_p) = profile.wire_values();
        Ok(ChatRequest {
            model: model.to_string(),
            messages: messages.to_vec(),
            class: profile.class(),
            temperature,
            top_p,
            max_tokens: profile.max_output_tokens(),
            sample_index,
        })
    }

    /// Complete with the model's configured profile.
    pub fn complete(&self, model: &str, messages: &[Message]) -> Result<Completion> {
        let profile = self.profile_for(model)?;
        self.complete_with(model, messages, &profile, 0)
    }

    pub fn complete_with(
        &self,
        model: &str,
        messages: &[Message],
        profile: &DecodingProfile,
        sample_index: u32,
    ) -> Result<Completion> {
        let request = self.request(model, messages, profile, sample_index)?;
        self.send(&request)
    }

    pub fn send(&self, request: &ChatRequest) -> Result<Completion> {
        let fingerprint = request.fingerprint();
        let started = Instant::now();
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.send(request) {
                Ok(text) => {
                    return Ok(Completion {
                        text,
                        fingerprint,
                        attempts: attempt,
                        latency: started.elapsed(),
                    })
                }
                Err(BackendError::ReplayMiss(fp)) => return Err(Error::ReplayMiss(fp)),
                Err(BackendError::Rejected(m)) => return Err(Error::ProviderRejected(m)),
                Err(BackendError::Transient(m)) => {
                    if attempt >= max {
                        return Err(Error::ProviderUnavailable {
                            attempts: attempt,
                            message: m,
                        });
                    }
                    log::debug!("attempt {attempt} for {fingerprint} failed: {m}");
                    let delay = self.retry.delay_after(attempt);
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
            }
        }
    }

    /// `n` independent samples; the sample index is part of each fingerprint.
    pub fn sample_n(
        &self,
        model: &str,
        messages: &[Message],
        n: usize,
        profile: &DecodingProfile,
    ) -> Result<Vec<Completion>> {
        if n == 0 {
            return Err(Error::Invalid("sample_n requires n >= 1".into()));
        }
        if n > 1 && profile.wire_values().0 == 0.0 {
            self.warn(format!(
                "sampling {n} completions from `{model}` at temperature 0 yields identical samples"
            ));
        }
        let requests = (0..n as u32)
            .map(|i| self.request(model, messages, profile, i))
            .collect::<Result<Vec<_>>>()?;
        self.map_parallel(&requests, |r| self.send(r))
            .into_iter()
            .collect()
    }

    /// Apply `f` to every item with at most `parallelism()` calls in flight.
    /// Results keep input order.
    pub fn map_parallel<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        map_parallel(self.width, items, f)
    }
}

pub fn map_parallel<T, R, F>(width: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if width <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..width.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub fingerprint: String,
    pub request: ChatRequest,
    pub response: String,
}

fn fixture_path(dir: &Path, fingerprint: &str) -> PathBuf {
    dir.join(format!("{fingerprint}.json"))
}

pub fn write_fixture(dir: &Path, request: &ChatRequest, response: &str) -> Result<PathBuf> {
    let fixture = Fixture {
        fingerprint: request.fingerprint(),
        request: request.clone(),
        response: response.to_string(),
    };
    let path = fixture_path(dir, &fixture.fingerprint);
    let mut bytes = serde_json::to_vec_pretty(&fixture)?;
    bytes.push(b'\n');
    jsonl::write_atomic(&path, &bytes)?;
    Ok(path)
}

/// Serves recorded fixtures, one file per fingerprint. Never touches the
/// network.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    dir: PathBuf,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayBackend { dir: dir.into() }
    }
}

impl ChatBackend for ReplayBackend {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        let fp = request.fingerprint();
        let path = fixture_path(&self.dir, &fp);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(BackendError::ReplayMiss(fp))
            }
            Err(e) => return Err(BackendError::Rejected(format!("{}: {e}", path.display()))),
        };
        let fixture: Fixture = serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::Rejected(format!("{}: {e}", path.display())))?;
        Ok(fixture.response)
    }
}

/// Forwards to `inner` and writes every successful exchange as a fixture.
pub struct RecordingBackend<B> {
    inner: B,
    dir: PathBuf,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Self {
        RecordingBackend {
            inner,
            dir: dir.into(),
        }
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        let text = self.inner.send(request)?;
        write_fixture(&self.dir, request, &text)
            .map_err(|e| BackendError::Rejected(format!("recording fixture: {e}")))?;
        Ok(text)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

fn classify_http_error(status: reqwest::StatusCode, body: String) -> BackendError {
    let message = format!("HTTP {status}: {body}");
    if status.as_u16() == 429 || status.is_server_error() {
        BackendError::Transient(message)
    } else {
        BackendError::Rejected(message)
    }
}

fn bearer(env_name: &Option<String>) -> std::result::Result<Option<String>, BackendError> {
    match env_name {
        None => Ok(None),
        Some(name) => std::env::var(name).map(Some).map_err(|_| {
            BackendError::Rejected(format!("environment variable `{name}` is not set"))
        }),
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    models: BTreeMap<String, ModelConfig>,
}

impl HttpBackend {
    pub fn new(models: BTreeMap<String, ModelConfig>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Invalid(format!("http client: {e}")))?;
        Ok(HttpBackend { client, models })
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        let config = self.models.get(&request.model).ok_or_else(|| {
            BackendError::Rejected(format!("no endpoint for `{}`", request.model))
        })?;
        let base = config.base_url.as_deref().ok_or_else(|| {
            BackendError::Rejected(format!("`{}` has no base_url", request.model))
        })?;
        let url = format!("{}/chat/completions", base.trim_end_matches('/'));
        let body = WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
            top_p: request.top_p,
            max_tokens: request.max_tokens,
        };
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = bearer(&config.api_key_env)? {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(classify_http_error(
                status,
                response.text().unwrap_or_default(),
            ));
        }
        let parsed: WireResponse = response
            .json()
            .map_err(|e| BackendError::Rejected(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| BackendError::Rejected("response has no choices".into()))
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

/// OpenAI-compatible `/embeddings` client.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    model: String,
    config: EmbedderConfig,
}

impl HttpEmbedder {
    pub fn new(
        model: impl Into<String>,
        config: EmbedderConfig,
        timeout: Duration,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Invalid(format!("http client: {e}")))?;
        Ok(HttpEmbedder {
            client,
            model: model.into(),
            config,
        })
    }
}

/// Check an embedding response: one vector per input, all the same length.
pub fn validate_embeddings(inputs: usize, vectors: &[Vec<f64>]) -> Result<()> {
    if vectors.len() != inputs {
        return Err(Error::Invalid(format!(
            "embedder returned {} vectors for {inputs} inputs",
            vectors.len()
        )));
    }
    if let Some(first) = vectors.first() {
        if first.is_empty() || vectors.iter().any(|v| v.len() != first.len()) {
            return Err(Error::Invalid(
                "embedding dimensions are inconsistent".into(),
            ));
        }
    }
    Ok(())
}

impl Embedder for HttpEmbedder {
    fn tag(&self) -> String {
        format!("embed:{}", self.model)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let url = format!("{}/embeddings", self.config.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(&url).json(&EmbeddingRequest {
            model: &self.model,
            input: texts,
        });
        if let Some(key) =
            bearer(&self.config.api_key_env).map_err(|e| Error::ProviderRejected(e.to_string()))?
        {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| Error::ProviderUnavailable {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(Error::ProviderRejected(format!("HTTP {status}: {body}")));
        }
        let mut parsed: EmbeddingResponse = response
            .json()
            .map_err(|e| Error::ProviderRejected(format!("malformed embedding response: {e}")))?;
        parsed.data.sort_by_key(|d| d.index);
        let vectors: Vec<Vec<f64>> = parsed.data.into_iter().map(|d| d.embedding).collect();
        validate_embeddings(texts.len(), &vectors)?;
        Ok(vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn gateway(backend: impl ChatBackend + 'static) -> Gateway {
        Gateway::new(Arc::new(backend))
            .with_model("det", ModelConfig::new(ProfileClass::Deterministic))
            .with_model("long", ModelConfig::new(ProfileClass::LongForm))
            .with_retry(RetryPolicy::immediate(3))
    }

    fn hello() -> Vec<Message> {
        vec![Message::user("hello")]
    }

    #[test]
    fn replay_hit_returns_fixture_text() {
        let dir = tempfile::tempdir().unwrap();
        let g = gateway(ReplayBackend::new(dir.path()));
        let req = g
            .request("det", &hello(), &g.profile_for("det").unwrap(), 0)
            .unwrap();
        write_fixture(dir.path(), &req, "recorded answer").unwrap();
        let c = g.complete("det", &hello()).unwrap();
        assert_eq!(c.text, "recorded answer");
        assert_eq!(c.fingerprint, req.fingerprint());
    }

    #[test]
    fn replay_miss_is_an_error_naming_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let g = gateway(ReplayBackend::new(dir.path()));
        let expected = g
            .request("det", &hello(), &g.profile_for("det").unwrap(), 0)
            .unwrap()
            .fingerprint();
        match g.complete("det", &hello()) {
            Err(Error::ReplayMiss(fp)) => assert_eq!(fp, expected),
            other => panic!("expected replay miss, got {other:?}"),
        }
    }

    #[test]
    fn transient_failures_retry_until_success() {
        let calls = AtomicU32::new(0);
        let g = gateway(move |_: &ChatRequest| {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(BackendError::Transient("connection reset".into()))
            } else {
                Ok("ok".to_string())
            }
        });
        let c = g.complete("det", &hello()).unwrap();
        assert_eq!(c.text, "ok");
        assert_eq!(c.attempts, 3);
    }

    #[test]
    fn exhausted_retries_are_provider_unavailable() {
        let g = gateway(|_: &ChatRequest| Err(BackendError::Transient("down".into())));
        assert!(matches!(
            g.complete("det", &hello()),
            Err(Error::ProviderUnavailable { attempts: 3, .. })
        ));
    }

    #[test]
    fn rejected_is_not_retried() {
        let calls = Arc::new(AtomicU32::new(0));
        let seen = calls.clone();
        let g = gateway(move |_: &ChatRequest| {
            seen.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Rejected("401".into()))
        });
        assert!(g.complete("det", &hello()).is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_after(1), Duration::from_secs(1));
        assert_eq!(p.delay_after(2), Duration::from_secs(2));
        assert_eq!(p.delay_after(3), Duration::from_secs(4));
    }

    #[test]
    fn sample_n_distinguishes_indices() {
        let dir = tempfile::tempdir().unwrap();
        let g = gateway(ReplayBackend::new(dir.path()));
        let profile = DecodingProfile::sampling(1.0, 1.0, 64).unwrap();
        for i in 0..5 {
            let req = g.request("det", &hello(), &profile, i).unwrap();
            write_fixture(dir.path(), &req, &format!("sample {i}")).unwrap();
        }
        let texts: Vec<_> = g
            .sample_n("det", &hello(), 5, &profile)
            .unwrap()
            .into_iter()
            .map(|c| c.text)
            .collect();
        assert_eq!(
            texts,
            (0..5).map(|i| format!("sample {i}")).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sample_one_equals_complete() {
        let g = gateway(|r: &ChatRequest| Ok(format!("{}:{}", r.temperature, r.sample_index)));
        let profile = g.profile_for("long").unwrap();
        let single = g.complete_with("long", &hello(), &profile, 0).unwrap();
        let sampled = g.sample_n("long", &hello(), 1, &profile).unwrap();
        assert_eq!(
            sampled,
            vec![Completion {
                latency: sampled[0].latency,
                ..single
            }]
        );
    }

    #[test]
    fn zero_temperature_sampling_warns() {
        let g = gateway(|_: &ChatRequest| Ok("same".to_string()));
        let profile = g.profile_for("det").unwrap();
        let out = g.sample_n("det", &hello(), 3, &profile).unwrap();
        assert!(out.iter().all(|c| c.text == "same"));
        assert_eq!(g.take_warnings().len(), 1);
    }

    #[test]
    fn fixed_classes_override_wire_values() {
        let g = gateway(|r: &ChatRequest| Ok(format!("{} {}", r.temperature, r.top_p)));
        let mut forged = DecodingProfile::deterministic(16);
        forged.temperature = 0.7;
        forged.top_p = 0.5;
        assert_eq!(
            g.complete_with("det", &hello(), &forged, 0).unwrap().text,
            "0 1"
        );
        assert_eq!(g.complete("long", &hello()).unwrap().text, "1 1");
    }

    #[test]
    fn fingerprint_is_stable() {
        let req = ChatRequest {
            model: "m".into(),
            messages: vec![Message::user("hi")],
            class: ProfileClass::Deterministic,
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 16,
            sample_index: 0,
        };
        // Frozen: a change here invalidates every recorded fixture.
        assert_eq!(
            req.fingerprint(),
            hex::encode(Sha256::digest(
                br#"{"model":"m","messages":[{"role":"user","content":"hi"}],"class":"deterministic","temperature":0.0,"top_p":1.0,"max_tokens":16,"sample_index":0}"#
            ))
        );
        let mut other = req.clone();
        other.sample_index = 1;
        assert_ne!(req.fingerprint(), other.fingerprint());
    }

    #[test]
    fn recording_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let live = gateway(RecordingBackend::new(
            |r: &ChatRequest| Ok(format!("echo {}", r.messages[0].content)),
            dir.path(),
        ));
        assert_eq!(live.complete("det", &hello()).unwrap().text, "echo hello");
        let replay = gateway(ReplayBackend::new(dir.path()));
        assert_eq!(replay.complete("det", &hello()).unwrap().text, "echo hello");
    }

    #[test]
    fn unknown_model_rejected() {
        let g = gateway(|_: &ChatRequest| Ok(String::new()));
        assert!(matches!(
            g.complete("nope", &hello()),
            Err(Error::UnknownModel(_))
        ));
    }

    #[test]
    fn parallel_map_keeps_order_and_bounds_width() {
        let in_flight = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let items: Vec<usize> = (0..40).collect();
        let out = map_parallel(4, &items, |&i| {
            let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(1));
            in_flight.fetch_sub(1, Ordering::SeqCst);
            i * 2
        });
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
        assert!(peak.load(Ordering::SeqCst) <= 4);
    }

    #[test]
    fn endpoint_config_parses() {
        let cfg: EndpointConfig = toml::from_str(
            r#"
[models.qwq]
base_url = "http://localhost:8000/v1"
api_key_env = "KEY"
profile = "long_form"

[models.llama]
profile = "deterministic"
max_output_tokens = 512
"#,
        )
        .unwrap();
        assert_eq!(cfg.models["qwq"].profile, ProfileClass::LongForm);
        assert_eq!(cfg.models["llama"].decoding_profile().temperature(), 0.0);
        assert_eq!(cfg.models["llama"].max_output_tokens, 512);
        let dashed: ModelConfig = toml::from_str("profile = \"long-form\"").unwrap();
        assert_eq!(dashed.profile, ProfileClass::LongForm);
    }

    #[test]
    fn embedding_shape_validation() {
        assert!(validate_embeddings(2, &[vec![1.0, 0.0], vec![0.0, 1.0]]).is_ok());
        assert!(validate_embeddings(2, &[vec![1.0]]).is_err());
        assert!(validate_embeddings(2, &[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
