//! Chat-completion boundary.
//!
//! [`LiveBackend`] talks to a provider-style `/chat/completions` endpoint;
//! [`ReplayBackend`] answers from recorded transcripts keyed by request
//! fingerprint; [`RecordingBackend`] wraps a live backend and appends every
//! answer to a [`TranscriptSink`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::hashing::FieldHasher;
use crate::timefmt;

pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo-16k-0613";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";
pub const ENV_API_KEY: &str = "FORUMINT_API_KEY";
pub const ENV_API_BASE: &str = "FORUMINT_API_BASE";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no transcript recorded for request fingerprint {0}")]
    MissingTranscript(String),
    #[error("transcript {0} already recorded with different text")]
    ConflictingTranscript(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("credential missing: set {ENV_API_KEY}")]
    MissingCredential,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("provider returned status {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("unexpected provider response: {0}")]
    BadResponse(String),
    #[error("transcript file line {line}: {reason}")]
    TranscriptFormat { line: usize, reason: String },
    #[error("transcript I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("transcript store: {0}")]
    Sink(String),
}

impl BackendError {
    pub fn kind(&self) -> &'static str {
        match self {
            BackendError::MissingTranscript(_) => "MissingTranscript",
            BackendError::ConflictingTranscript(_) => "ConflictingTranscript",
            BackendError::InvalidRequest(_) => "InvalidRequest",
            BackendError::MissingCredential => "MissingCredential",
            BackendError::Transport(_) => "Transport",
            BackendError::RateLimited { .. } => "RateLimited",
            BackendError::Provider { .. } => "Provider",
            BackendError::BadResponse(_) => "BadResponse",
            BackendError::TranscriptFormat { .. } => "TranscriptFormat",
            BackendError::Io(_) => "Io",
            BackendError::Sink(_) => "Sink",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub system_text: Option<String>,
    pub user_text: String,
    pub temperature: f64,
    pub max_output: u32,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.user_text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("user_text is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.model_id.trim().is_empty() {
            return Err(BackendError::InvalidRequest("model_id is empty".into()));
        }
        Ok(())
    }

    /// Hash of `(model_id, system_text, user_text, temperature)`.
    ///
    /// `max_output` is deliberately left out: it caps the answer but does not
    /// change what was asked.
    pub fn fingerprint(&self) -> String {
        let mut h = FieldHasher::new("forumint.request.v1");
        h.field(self.model_id.as_bytes())
            .optional(self.system_text.as_deref().map(str::as_bytes))
            .field(self.user_text.as_bytes())
            .field(&self.temperature.to_bits().to_le_bytes());
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub raw_text: String,
    pub latency: Duration,
    pub usage: Option<Usage>,
    pub backend_kind: BackendKind,
    /// Retries spent before the successful attempt.
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub fingerprint: String,
    pub model_id: String,
    pub raw_text: String,
    #[serde(with = "timefmt::rfc3339")]
    pub recorded_at: DateTime<Utc>,
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError>;
    fn kind(&self) -> BackendKind;
}

/// Append-only destination for transcripts.
pub trait TranscriptSink: Send + Sync {
    fn lookup_transcript(&self, fingerprint: &str) -> Option<String>;
    fn append_transcript(&self, entry: TranscriptEntry) -> Result<(), BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordOutcome {
    Appended,
    AlreadyPresent,
}

/// Appends `result` under the request fingerprint. Recording the same text
/// twice is a no-op; recording different text is a conflict.
pub fn record(
    req: &CompletionRequest,
    result: &CompletionResult,
    sink: &dyn TranscriptSink,
) -> Result<RecordOutcome, BackendError> {
    let fingerprint = req.fingerprint();
    match sink.lookup_transcript(&fingerprint) {
        Some(existing) if existing == result.raw_text => Ok(RecordOutcome::AlreadyPresent),
        Some(_) => Err(BackendError::ConflictingTranscript(fingerprint)),
        None => {
            sink.append_transcript(TranscriptEntry {
                fingerprint,
                model_id: req.model_id.clone(),
                raw_text: result.raw_text.clone(),
                recorded_at: timefmt::now(),
            })?;
            Ok(RecordOutcome::Appended)
        }
    }
}

/// In-memory sink, mostly for tests and fixture generation.
#[derive(Debug, Default)]
pub struct MemoryTranscripts {
    entries: Mutex<Vec<TranscriptEntry>>,
}

impl MemoryTranscripts {
    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().expect("transcript lock").clone()
    }
}

impl TranscriptSink for MemoryTranscripts {
    fn lookup_transcript(&self, fingerprint: &str) -> Option<String> {
        self.entries
            .lock()
            .expect("transcript lock")
            .iter()
            .find(|e| e.fingerprint == fingerprint)
            .map(|e| e.raw_text.clone())
    }

    fn append_transcript(&self, entry: TranscriptEntry) -> Result<(), BackendError> {
        self.entries.lock().expect("transcript lock").push(entry);
        Ok(())
    }
}

/// Reads a transcript file: one JSON entry per line.
pub fn read_transcripts(path: &Path) -> Result<Vec<TranscriptEntry>, BackendError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| BackendError::TranscriptFormat {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    entries: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn from_entries(
        entries: impl IntoIterator<Item = TranscriptEntry>,
    ) -> Result<Self, BackendError> {
        let mut map: HashMap<String, String> = HashMap::new();
        for e in entries {
            match map.get(&e.fingerprint) {
                Some(existing) if *existing != e.raw_text => {
                    return Err(BackendError::ConflictingTranscript(e.fingerprint))
                }
                Some(_) => {}
                None => {
                    map.insert(e.fingerprint, e.raw_text);
                }
            }
        }
        Ok(ReplayBackend { entries: map })
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Self::from_entries(read_transcripts(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        let started = Instant::now();
        let fingerprint = req.fingerprint();
        let raw_text = self
            .entries
            .get(&fingerprint)
            .cloned()
            .ok_or(BackendError::MissingTranscript(fingerprint))?;
        Ok(CompletionResult {
            raw_text,
            latency: started.elapsed(),
            usage: None,
            backend_kind: BackendKind::Replay,
            retries: 0,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }
}

/// Wraps a backend and records each successful answer.
pub struct RecordingBackend<B> {
    inner: B,
    sink: Arc<dyn TranscriptSink>,
}

impl<B: CompletionBackend> RecordingBackend<B> {
    pub fn new(inner: B, sink: Arc<dyn TranscriptSink>) -> Self {
        RecordingBackend { inner, sink }
    }
}

impl<B: CompletionBackend> CompletionBackend for RecordingBackend<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let result = self.inner.complete(req)?;
        record(req, &result, self.sink.as_ref())?;
        Ok(result)
    }

    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }
}

// ---------------------------------------------------------------------------
// Live HTTP client

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay: Duration,
    pub factor: f64,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            initial_delay: Duration::from_secs(1),
            factor: 2.0,
            max_delay: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the jitter window before retry number `retry` (0-based).
    pub fn ceiling(&self, retry: u32) -> Duration {
        let scaled = self.initial_delay.as_secs_f64() * self.factor.powi(retry as i32);
        Duration::from_secs_f64(scaled.min(self.max_delay.as_secs_f64()))
    }

    pub fn delay(&self, retry: u32, rng: &mut impl Rng) -> Duration {
        let ceiling = self.ceiling(retry).as_secs_f64();
        if ceiling <= 0.0 {
            return Duration::ZERO;
        }
        Duration::from_secs_f64(rng.random_range(0.0..=ceiling))
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct InFlight {
    free: Mutex<usize>,
    cond: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(cap: usize) -> Self {
        InFlight {
            free: Mutex::new(cap.max(1)),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("in-flight lock");
        while *free == 0 {
            free = self.cond.wait(free).expect("in-flight lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("in-flight lock") += 1;
        self.0.cond.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub api_base: String,
    pub api_key: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl LiveConfig {
    /// Reads the credential and endpoint from the environment.
    pub fn from_env() -> Result<Self, BackendError> {
        let api_key = std::env::var(ENV_API_KEY)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or(BackendError::MissingCredential)?;
        let api_base = std::env::var(ENV_API_BASE).unwrap_or_else(|_| DEFAULT_API_BASE.into());
        Ok(LiveConfig {
            api_base,
            api_key,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
        })
    }
}

pub struct LiveBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
    retry: RetryPolicy,
    in_flight: InFlight,
}

enum Attempt {
    Done(String, Option<Usage>),
    Retryable(BackendError),
    Fatal(BackendError),
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        LiveBackend {
            agent,
            endpoint: format!("{}/chat/completions", config.api_base.trim_end_matches('/')),
            api_key: config.api_key,
            retry: config.retry,
            in_flight: InFlight::new(config.max_in_flight),
        }
    }

    fn body(req: &CompletionRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if let Some(system) = &req.system_text {
            messages.push(json!({ "role": "system", "content": system }));
        }
        messages.push(json!({ "role": "user", "content": req.user_text }));
        json!({
            "model": req.model_id,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Attempt {
        let response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        let mut response = match response {
            Ok(r) => r,
            Err(e) => return Attempt::Retryable(BackendError::Transport(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retryable(BackendError::Transport(e.to_string())),
        };
        match status {
            200..=299 => match extract_content(&text) {
                Ok((content, usage)) => Attempt::Done(content, usage),
                Err(e) => Attempt::Fatal(e),
            },
            429 => Attempt::Retryable(BackendError::RateLimited { attempts: 0 }),
            500..=599 => Attempt::Retryable(BackendError::Provider { status, body: text }),
            _ => Attempt::Fatal(BackendError::Provider { status, body: text }),
        }
    }
}

fn extract_content(text: &str) -> Result<(String, Option<Usage>), BackendError> {
    #[derive(Deserialize)]
    struct Body {
        choices: Vec<Choice>,
        usage: Option<Usage>,
    }
    #[derive(Deserialize)]
    struct Choice {
        message: Msg,
    }
    #[derive(Deserialize)]
    struct Msg {
        content: Option<String>,
    }
    let body: Body =
        serde_json::from_str(text).map_err(|e| BackendError::BadResponse(e.to_string()))?;
    let content = body
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendError::BadResponse("no choices[0].message.content".into()))?;
    Ok((content, body.usage))
}

impl CompletionBackend for LiveBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        let _permit = self.in_flight.acquire();
        let body = Self::body(req);
        let started = Instant::now();
        let mut retries = 0;
        loop {
            let err = match self.attempt(&body) {
                Attempt::Done(raw_text, usage) => {
                    return Ok(CompletionResult {
                        raw_text,
                        latency: started.elapsed(),
                        usage,
                        backend_kind: BackendKind::Live,
                        retries,
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retryable(e) => e,
            };
            if retries >= self.retry.max_retries {
                return Err(match err {
                    BackendError::RateLimited { .. } => BackendError::RateLimited {
                        attempts: retries + 1,
                    },
                    other => other,
                });
            }
            let delay = self.retry.delay(retries, &mut rand::rng());
            tracing::warn!(retry = retries + 1, ?delay, error = %err, "retrying completion");
            std::thread::sleep(delay);
            retries += 1;
        }
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }
}
