//! Completion backends: a deterministic scripted (fixture-replay) backend for
//! offline runs and tests, and an HTTP backend for real completion services,
//! plus the rating parser that extracts `Rating: [[k]]` verdicts from critique
//! text.
//!
//! The wire protocol is the de-facto completion-API shape: one POST per request
//! with a JSON body `{"prompt", "temperature", "n", "max_tokens", "seed"}` and a
//! JSON response `{"choices": [{"text": ...}, ...]}` whose choices arrive in
//! sampling order. Credentials are read from the environment variable named in
//! [`BackendConfig::auth_token_env`] and are never written to any file.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use thiserror::Error;

use crate::util::sha256_hex;

/// One completion call: `n_samples` completions of `prompt` at `temperature`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub n_samples: usize,
    pub max_tokens: usize,
    /// Passed through to backends that honor seeded sampling; the scripted
    /// backend ignores it (its replies are fixed by the fixture).
    pub seed: Option<u64>,
}

/// The texts returned for one request, in sampling order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub texts: Vec<String>,
    /// Which backend produced the texts (for logs and audit trails).
    pub backend_id: String,
}

/// Connection settings for the HTTP backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Full URL of the completion endpoint.
    pub endpoint: String,
    /// Name of the environment variable holding the bearer credential; `None`
    /// sends no credential. The credential itself never appears in config
    /// files.
    pub auth_token_env: Option<String>,
    /// Maximum concurrent in-flight requests.
    pub max_inflight: usize,
    /// Retries after the first attempt, so total attempts ≤ retry_limit + 1.
    pub retry_limit: usize,
    /// Per-attempt timeout.
    pub timeout_ms: u64,
    /// Base of the exponential backoff between attempts (doubles per retry).
    pub backoff_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: "http://127.0.0.1:8080/v1/complete".to_string(),
            auth_token_env: None,
            max_inflight: 4,
            retry_limit: 2,
            timeout_ms: 30_000,
            backoff_ms: 250,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.endpoint.is_empty() {
            return Err(ClientError::InvalidRequest("endpoint must be nonempty".to_string()));
        }
        if self.max_inflight == 0 {
            return Err(ClientError::InvalidRequest("max_inflight must be >= 1".to_string()));
        }
        if self.timeout_ms == 0 {
            return Err(ClientError::InvalidRequest("timeout_ms must be > 0".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no rating of the form \"Rating: [[k]]\" found in text")]
    RatingMissing,
    #[error("rating [[{value}]] is outside 1..=10")]
    RatingOutOfRange { value: String },
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("no scripted responses for prompt digest {digest} (prompt begins {prompt_head:?})")]
    FixtureMiss { digest: String, prompt_head: String },
    #[error(
        "scripted responses exhausted for digest {digest}: requested {requested}, {available} left"
    )]
    FixtureExhausted { digest: String, requested: usize, available: usize },
    #[error("fixture {path}: {message}")]
    Fixture { path: String, message: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("request timed out after {attempts} attempt(s) of {timeout_ms} ms")]
    Timeout { attempts: usize, timeout_ms: u64 },
    #[error("protocol error from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("auth token environment variable {0} is not set")]
    MissingAuthToken(String),
}

/// A completion service. Implementations must be safe to call from many
/// threads at once; `max_inflight` advertises how many concurrent calls the
/// backend wants to serve (callers use it to size worker pools).
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, ClientError>;
    fn max_inflight(&self) -> usize;
}

fn validate_request(req: &CompletionRequest) -> Result<(), ClientError> {
    if req.n_samples == 0 {
        return Err(ClientError::InvalidRequest("n_samples must be >= 1".to_string()));
    }
    if req.max_tokens == 0 {
        return Err(ClientError::InvalidRequest("max_tokens must be >= 1".to_string()));
    }
    if !req.temperature.is_finite() || req.temperature < 0.0 {
        return Err(ClientError::InvalidRequest(format!(
            "temperature must be finite and >= 0, got {}",
            req.temperature
        )));
    }
    Ok(())
}

static RATING_PATTERN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"Rating:\s*\[\[(\d+)\]\]").expect("static pattern compiles"));

/// Extracts the rating from the LAST `Rating: [[k]]` occurrence in `text`.
///
/// Judges often restate the format mid-explanation; the final verdict is
/// authoritative. Returns `k` when 1 ≤ k ≤ 10; a last occurrence outside that
/// range is an error even if an earlier one was in range.
pub fn parse_rating(text: &str) -> Result<u8, ClientError> {
    let captures = RATING_PATTERN.captures_iter(text).last().ok_or(ClientError::RatingMissing)?;
    let digits = &captures[1];
    match digits.parse::<u32>() {
        Ok(value) if (1..=10).contains(&value) => Ok(value as u8),
        // Parse failures here can only be overflow of an absurdly long digit
        // run, which is out of range like any other k > 10.
        _ => Err(ClientError::RatingOutOfRange { value: digits.to_string() }),
    }
}

/// Versioned on-disk fixture: prompt digest → ordered canned responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub version: u32,
    pub entries: BTreeMap<String, Vec<String>>,
}

/// Current fixture format version; bump on layout changes.
pub const FIXTURE_VERSION: u32 = 1;

impl Fixture {
    pub fn new() -> Self {
        Fixture { version: FIXTURE_VERSION, entries: BTreeMap::new() }
    }

    /// Appends a canned response for the given plaintext prompt.
    pub fn push_response(&mut self, prompt: &str, response: String) {
        self.entries.entry(sha256_hex(prompt)).or_default().push(response);
    }

    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let display = path.display().to_string();
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ClientError::Fixture { path: display.clone(), message: e.to_string() })?;
        let fixture: Fixture = serde_json::from_str(&raw)
            .map_err(|e| ClientError::Fixture { path: display.clone(), message: e.to_string() })?;
        if fixture.version != FIXTURE_VERSION {
            return Err(ClientError::Fixture {
                path: display,
                message: format!(
                    "unsupported fixture version {} (expected {})",
                    fixture.version, FIXTURE_VERSION
                ),
            });
        }
        Ok(fixture)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClientError> {
        let display = path.display().to_string();
        let json = serde_json::to_string_pretty(self).expect("fixture serializes infallibly");
        std::fs::write(path, json + "\n")
            .map_err(|e| ClientError::Fixture { path: display, message: e.to_string() })
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}

/// Replays canned responses keyed by prompt digest, consuming each digest's
/// list in order. All internal state sits behind one mutex so per-digest
/// ordering is deterministic no matter how many threads call in.
pub struct ScriptedBackend {
    entries: Mutex<BTreeMap<String, VecDeque<String>>>,
    max_inflight: usize,
}

/// Default worker-pool width advertised by the scripted backend. Replay is
/// pure in-memory work, so this only bounds pipeline thread count.
pub const SCRIPTED_MAX_INFLIGHT: usize = 8;

impl ScriptedBackend {
    pub fn from_fixture(fixture: &Fixture) -> Self {
        let entries = fixture
            .entries
            .iter()
            .map(|(digest, responses)| (digest.clone(), responses.iter().cloned().collect()))
            .collect();
        ScriptedBackend { entries: Mutex::new(entries), max_inflight: SCRIPTED_MAX_INFLIGHT }
    }

    pub fn from_fixture_file(path: &Path) -> Result<Self, ClientError> {
        Ok(Self::from_fixture(&Fixture::load(path)?))
    }

    /// Builds a backend from plaintext prompts (hashed here) and their
    /// responses. Convenience for tests.
    pub fn from_prompt_map(map: BTreeMap<String, Vec<String>>) -> Self {
        let mut fixture = Fixture::new();
        for (prompt, responses) in map {
            for response in responses {
                fixture.push_response(&prompt, response);
            }
        }
        Self::from_fixture(&fixture)
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, ClientError> {
        validate_request(req)?;
        let digest = sha256_hex(&req.prompt);
        let mut entries = self.entries.lock().expect("scripted backend mutex");
        let queue = entries.get_mut(&digest).ok_or_else(|| ClientError::FixtureMiss {
            digest: digest.clone(),
            prompt_head: req.prompt.chars().take(60).collect(),
        })?;
        if queue.len() < req.n_samples {
            return Err(ClientError::FixtureExhausted {
                digest,
                requested: req.n_samples,
                available: queue.len(),
            });
        }
        let texts = queue.drain(..req.n_samples).collect();
        Ok(CompletionResponse { texts, backend_id: "scripted".to_string() })
    }

    fn max_inflight(&self) -> usize {
        self.max_inflight
    }
}

/// Counting semaphore bounding concurrent HTTP requests.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits), available: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore mutex");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore condvar");
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().expect("semaphore mutex");
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    n: usize,
    max_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
}

/// HTTP completion backend with bounded concurrency, per-attempt timeout, and
/// exponential backoff on transient failures (5xx statuses, timeouts, and
/// connection errors). Client errors (4xx) fail immediately.
pub struct HttpBackend {
    cfg: BackendConfig,
    client: reqwest::blocking::Client,
    semaphore: Semaphore,
    auth_token: Option<String>,
    next_request_id: AtomicU64,
}

/// Upper bound on a single backoff sleep, so deep retry chains stay sane.
const MAX_BACKOFF_MS: u64 = 10_000;

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, ClientError> {
        cfg.validate()?;
        let auth_token = match &cfg.auth_token_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| ClientError::MissingAuthToken(var.clone()))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| ClientError::Transport { attempts: 0, message: e.to_string() })?;
        Ok(HttpBackend {
            semaphore: Semaphore::new(cfg.max_inflight),
            auth_token,
            client,
            cfg,
            next_request_id: AtomicU64::new(1),
        })
    }

    fn attempt(&self, req: &CompletionRequest) -> Result<CompletionResponse, AttemptFailure> {
        let body = WireRequest {
            prompt: &req.prompt,
            temperature: req.temperature,
            n: req.n_samples,
            max_tokens: req.max_tokens,
            seed: req.seed,
        };
        let mut request = self.client.post(&self.cfg.endpoint).json(&body);
        if let Some(token) = &self.auth_token {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                AttemptFailure::Timeout
            } else {
                AttemptFailure::Transient(e.to_string())
            }
        })?;
        let status = response.status();
        if status.is_server_error() {
            return Err(AttemptFailure::Transient(format!("server status {status}")));
        }
        if !status.is_success() {
            let excerpt: String =
                response.text().unwrap_or_default().chars().take(200).collect();
            return Err(AttemptFailure::Fatal(ClientError::Protocol {
                endpoint: self.cfg.endpoint.clone(),
                message: format!("status {status}: {excerpt}"),
            }));
        }
        let parsed: WireResponse = response.json().map_err(|e| {
            AttemptFailure::Fatal(ClientError::Protocol {
                endpoint: self.cfg.endpoint.clone(),
                message: format!("undecodable response body: {e}"),
            })
        })?;
        if parsed.choices.len() != req.n_samples {
            return Err(AttemptFailure::Fatal(ClientError::Protocol {
                endpoint: self.cfg.endpoint.clone(),
                message: format!(
                    "expected {} choices, got {}",
                    req.n_samples,
                    parsed.choices.len()
                ),
            }));
        }
        Ok(CompletionResponse {
            texts: parsed.choices.into_iter().map(|c| c.text).collect(),
            backend_id: format!("http:{}", self.cfg.endpoint),
        })
    }
}

enum AttemptFailure {
    /// Worth retrying: 5xx or connection-level trouble.
    Transient(String),
    /// Worth retrying; reported distinctly when the budget runs out.
    Timeout,
    /// Not worth retrying: protocol-level failure.
    Fatal(ClientError),
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, ClientError> {
        validate_request(req)?;
        let request_id = self.next_request_id.fetch_add(1, Ordering::Relaxed);
        let _permit = self.semaphore.acquire();
        let mut last_failure = None;
        for attempt in 0..=self.cfg.retry_limit {
            if attempt > 0 {
                let backoff = self
                    .cfg
                    .backoff_ms
                    .saturating_mul(1u64 << (attempt - 1).min(16))
                    .min(MAX_BACKOFF_MS);
                std::thread::sleep(Duration::from_millis(backoff));
            }
            log::debug!(
                "completion request {request_id} attempt {}/{} to {}",
                attempt + 1,
                self.cfg.retry_limit + 1,
                self.cfg.endpoint
            );
            match self.attempt(req) {
                Ok(response) => {
                    log::debug!(
                        "completion request {request_id} succeeded with {} text(s)",
                        response.texts.len()
                    );
                    return Ok(response);
                }
                Err(AttemptFailure::Fatal(err)) => return Err(err),
                Err(failure) => {
                    if let AttemptFailure::Transient(message) = &failure {
                        log::warn!("completion request {request_id} attempt {} failed: {message}", attempt + 1);
                    } else {
                        log::warn!("completion request {request_id} attempt {} timed out", attempt + 1);
                    }
                    last_failure = Some(failure);
                }
            }
        }
        let attempts = self.cfg.retry_limit + 1;
        match last_failure {
            Some(AttemptFailure::Timeout) => {
                Err(ClientError::Timeout { attempts, timeout_ms: self.cfg.timeout_ms })
            }
            Some(AttemptFailure::Transient(message)) => {
                Err(ClientError::Transport { attempts, message })
            }
            _ => unreachable!("retry loop runs at least once"),
        }
    }

    fn max_inflight(&self) -> usize {
        self.cfg.max_inflight
    }
}
