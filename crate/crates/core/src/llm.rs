//! Text-completion gateway.
//!
//! A [`LlmGateway`] wraps a [`CompletionBackend`] with retries, full-jitter
//! exponential backoff and a bound on in-flight requests. Two backends ship
//! with the crate: [`HttpBackend`] speaks a minimal JSON completion protocol
//! and [`MockBackend`] produces deterministic, Table-style numbered responses
//! so the whole pipeline runs offline.
//!
//! Wire protocol: `POST endpoint_url` with body
//! `{"model", "prompt", "temperature", "max_tokens"}`, answered by
//! `{"text": "..."}`. When the environment variable named by
//! `api_key_env` is set its value is sent as a bearer token.

use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::util::{seeded_rng, Limiter};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("invalid llm config: {0}")]
    Config(String),
    #[error("network error after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("endpoint answered HTTP {status} after {attempts} attempt(s)")]
    Http { status: u16, attempts: u32 },
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("empty completion")]
    EmptyCompletion,
}

/// Failure of a single request attempt, before retry bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttemptError {
    Network(String),
    Timeout,
    Status(u16),
    Malformed(String),
}

impl AttemptError {
    pub fn is_retryable(&self) -> bool {
        match self {
            AttemptError::Network(_) | AttemptError::Timeout => true,
            AttemptError::Status(code) => *code == 429 || *code >= 500,
            AttemptError::Malformed(_) => false,
        }
    }

    fn into_error(self, attempts: u32) -> LlmError {
        match self {
            AttemptError::Network(message) => LlmError::Network { attempts, message },
            AttemptError::Timeout => LlmError::Timeout { attempts },
            AttemptError::Status(status) => LlmError::Http { status, attempts },
            AttemptError::Malformed(m) => LlmError::MalformedResponse(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint_url: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_concurrent_requests: usize,
    /// Name of the environment variable holding the API key. The key
    /// itself never appears in a config file.
    pub api_key_env: Option<String>,
    /// First backoff interval; doubles on every retry.
    pub backoff_base_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint_url: "http://127.0.0.1:8080/v1/completions".to_string(),
            model_id: "phi-2".to_string(),
            temperature: 0.7,
            max_tokens: 256,
            timeout_ms: 30_000,
            max_retries: 3,
            max_concurrent_requests: 4,
            api_key_env: Some("CAPAUG_LLM_API_KEY".to_string()),
            backoff_base_ms: 1_000,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.timeout_ms == 0 {
            return Err(LlmError::Config("timeout must be positive".into()));
        }
        if self.max_concurrent_requests == 0 {
            return Err(LlmError::Config("max_concurrent_requests must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::Config("max_tokens must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::Config("temperature must be a finite value >= 0".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// Upper bound of the backoff window before retry number `retry` (1-based).
    pub fn backoff_cap(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub model_id: String,
    #[serde(with = "duration_ms")]
    pub latency: Duration,
    pub attempt: u32,
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

pub trait CompletionBackend: Send + Sync {
    /// Performs one request attempt and returns the raw completion text.
    fn send(&self, prompt: &str, config: &LlmConfig) -> Result<String, AttemptError>;

    /// Model identifier reported in responses.
    fn model_id(&self, config: &LlmConfig) -> String {
        config.model_id.clone()
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionBody {
    text: String,
}

pub struct HttpBackend {
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: &LlmConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(true)
            .build()
            .into();
        HttpBackend { agent }
    }
}

impl CompletionBackend for HttpBackend {
    fn send(&self, prompt: &str, config: &LlmConfig) -> Result<String, AttemptError> {
        let body = CompletionRequest {
            model: &config.model_id,
            prompt,
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        };
        let mut request = self.agent.post(&config.endpoint_url);
        if let Some(key) = config
            .api_key_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
        {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let response = request.send_json(&body).map_err(classify_ureq_error)?;
        let parsed: CompletionBody = response
            .into_body()
            .read_json()
            .map_err(classify_ureq_error)?;
        Ok(parsed.text)
    }
}

fn classify_ureq_error(err: ureq::Error) -> AttemptError {
    match err {
        ureq::Error::StatusCode(code) => AttemptError::Status(code),
        ureq::Error::Timeout(_) => AttemptError::Timeout,
        ureq::Error::Json(e) => AttemptError::Malformed(e.to_string()),
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => AttemptError::Timeout,
        other => AttemptError::Network(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockProfile {
    /// Realistic mix of usable, duplicated, banned-word, over-long,
    /// truncated and `Failure` lines.
    #[default]
    Mixed,
    /// Every line is `Failure`.
    AlwaysFailure,
    /// Whitespace-only completions.
    Empty,
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    pub seed: u64,
    pub profile: MockProfile,
    pub lines: usize,
}

impl MockBackend {
    pub const MODEL_ID: &'static str = "mock";

    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            profile: MockProfile::Mixed,
            lines: MOCK_LINES,
        }
    }

    pub fn with_profile(mut self, profile: MockProfile) -> Self {
        self.profile = profile;
        self
    }

    pub fn generate(&self, prompt: &str) -> String {
        match self.profile {
            MockProfile::Mixed => mock_text(prompt, self.seed, self.lines),
            MockProfile::AlwaysFailure => (0..self.lines)
                .map(|i| format!("{} Failure", marker(i)))
                .collect::<Vec<_>>()
                .join("\n"),
            MockProfile::Empty => "  \n".to_string(),
        }
    }
}

impl CompletionBackend for MockBackend {
    fn send(&self, prompt: &str, _config: &LlmConfig) -> Result<String, AttemptError> {
        Ok(self.generate(prompt))
    }

    fn model_id(&self, _config: &LlmConfig) -> String {
        Self::MODEL_ID.to_string()
    }
}

const MOCK_LINES: usize = 4;

const ADJECTIVES: [&str; 8] = [
    "steady", "faint", "loud", "distant", "muffled", "sharp", "soft", "constant",
];

const PLAIN_LINES: [&str; 8] = [
    "The {kw} is making a {adj} noise.",
    "A {adj} {kw} sound fills the room.",
    "The {kw} rumbles with a {adj} tone.",
    "Someone stands near the {adj} {kw}.",
    "A {adj} {kw} noise continues without pause.",
    "The {kw} produces a {adj} sound.",
    "A {adj} {kw} echoes through the space.",
    "The {kw} hums in a {adj} way.",
];

const HEARD_LINES: [&str; 2] = [
    "The {kw} can be heard clearly.",
    "A {adj} {kw} is heard in the distance.",
];

const LONG_LINE: &str = "A chaotic and sprawling cacophony of {kw} noises rises and falls while \
distant echoes and crackling static weave a disjointed symphony of broken sound all around.";

fn marker(i: usize) -> String {
    if i < 20 {
        char::from_u32(0x2460 + i as u32).unwrap().to_string()
    } else {
        format!("{}.", i + 1)
    }
}

/// Picks the longest alphabetic word of the prompt's last line, which is
/// where the source caption sits for every built-in template.
fn keyword(prompt: &str) -> String {
    let last = prompt.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    // an inline caption follows the instruction's last colon
    let last = last.rsplit(':').next().unwrap_or(last);
    let mut best = "";
    for word in last.split(|c: char| !c.is_alphabetic()) {
        if word.chars().count() >= 3 && word.chars().count() > best.chars().count() {
            best = word;
        }
    }
    if best.is_empty() {
        "sound".to_string()
    } else {
        best.to_lowercase()
    }
}

fn mock_text(prompt: &str, seed: u64, lines: usize) -> String {
    let mut rng = seeded_rng(&[b"capaug-mock", prompt.as_bytes(), &seed.to_le_bytes()]);
    let kw = keyword(prompt);
    let mut out: Vec<String> = Vec::with_capacity(lines);
    for _ in 0..lines {
        let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
        let roll: f64 = rng.gen();
        let line = if roll < 0.10 {
            "Failure".to_string()
        } else if roll < 0.22 {
            HEARD_LINES[rng.gen_range(0..HEARD_LINES.len())].to_string()
        } else if roll < 0.30 {
            LONG_LINE.to_string()
        } else if roll < 0.36 {
            "{kw} noise.".to_string()
        } else if roll < 0.50 && !out.is_empty() {
            // echo an earlier line, sometimes with different casing
            let prev = out[rng.gen_range(0..out.len())].clone();
            if rng.gen_bool(0.5) {
                prev.to_uppercase()
            } else {
                prev
            }
        } else {
            PLAIN_LINES[rng.gen_range(0..PLAIN_LINES.len())].to_string()
        };
        out.push(line.replace("{kw}", &kw).replace("{adj}", adj));
    }
    out.iter()
        .enumerate()
        .map(|(i, line)| format!("{} {}", marker(i), line))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Deterministic offline completion: a pure function of `(prompt, seed)`.
pub fn mock_complete(prompt: &str, seed: u64) -> RawResponse {
    RawResponse {
        text: MockBackend::new(seed).generate(prompt),
        model_id: MockBackend::MODEL_ID.to_string(),
        latency: Duration::ZERO,
        attempt: 1,
    }
}

/// Shareable completion client. Safe to call from many threads at once;
/// at most `max_concurrent_requests` attempts are in flight.
pub struct LlmGateway {
    config: LlmConfig,
    backend: Box<dyn CompletionBackend>,
    limiter: Limiter,
}

impl LlmGateway {
    pub fn new(config: LlmConfig, backend: Box<dyn CompletionBackend>) -> Result<Self, LlmError> {
        config.validate()?;
        let limiter = Limiter::new(config.max_concurrent_requests);
        Ok(LlmGateway {
            config,
            backend,
            limiter,
        })
    }

    pub fn http(config: LlmConfig) -> Result<Self, LlmError> {
        let backend = HttpBackend::new(&config);
        Self::new(config, Box::new(backend))
    }

    pub fn mock(config: LlmConfig, backend: MockBackend) -> Result<Self, LlmError> {
        Self::new(config, Box::new(backend))
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    /// Largest number of simultaneous in-flight attempts seen so far.
    pub fn peak_in_flight(&self) -> usize {
        self.limiter.peak()
    }

    pub fn complete(&self, prompt: &str) -> Result<RawResponse, LlmError> {
        if prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let total_attempts = self.config.max_retries + 1;
        let mut attempt = 1;
        loop {
            let started = Instant::now();
            let result = {
                let _permit = self.limiter.acquire();
                self.backend.send(prompt, &self.config)
            };
            match result {
                Ok(text) => {
                    let text = text.trim_end().to_string();
                    if text.trim().is_empty() {
                        return Err(LlmError::EmptyCompletion);
                    }
                    return Ok(RawResponse {
                        text,
                        model_id: self.backend.model_id(&self.config),
                        latency: started.elapsed(),
                        attempt,
                    });
                }
                Err(err) if err.is_retryable() && attempt < total_attempts => {
                    let cap = self.config.backoff_cap(attempt);
                    let delay = full_jitter(cap);
                    warn!(attempt, ?err, delay_ms = delay.as_millis() as u64, "llm request failed, retrying");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(err) => {
                    debug!(attempt, ?err, "llm request failed");
                    return Err(err.into_error(attempt));
                }
            }
        }
    }
}

fn full_jitter(cap: Duration) -> Duration {
    if cap.is_zero() {
        return cap;
    }
    let millis = cap.as_millis().min(u64::MAX as u128) as u64;
    Duration::from_millis(rand::thread_rng().gen_range(0..=millis))
}

/// One-shot completion against the configured HTTP endpoint.
pub fn complete(prompt: &str, config: &LlmConfig) -> Result<RawResponse, LlmError> {
    LlmGateway::http(config.clone())?.complete(prompt)
}
