//! Chat-completion gateway with live, record, replay and mock modes.
//!
//! Live calls speak the common chat-completions wire shape: POST
//! `{model, messages, temperature, max_tokens}` and read
//! `choices[0].message.content`. Transcripts are NDJSON keyed by request
//! digest and never contain credentials.

use std::collections::{HashMap, VecDeque};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::hashing::digest_of;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempts: {last}")]
    TransportExhausted { attempts: u32, last: String },
    #[error("no recorded response for request digest {0}")]
    ReplayMiss(String),
    #[error("missing configuration: {0}")]
    AuthMissing(String),
    #[error("endpoint rejected the request: {0}")]
    Rejected(String),
    #[error("mock has no response left for request digest {0}")]
    MockExhausted(String),
    #[error("transcript I/O: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_name: String,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self { temperature: 0.2, max_tokens: 1024, model_name: "default".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub params: ChatParams,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>, params: ChatParams) -> Result<Self, String> {
        if messages.is_empty() {
            return Err("a chat request needs at least one message".into());
        }
        if !(params.temperature >= 0.0) {
            return Err("temperature must be >= 0".into());
        }
        Ok(Self { messages, params })
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptEntry {
    pub request_digest: String,
    pub response_text: String,
    pub latency_ms: u64,
    #[serde(default)]
    pub prompt_tokens: Option<u64>,
    #[serde(default)]
    pub completion_tokens: Option<u64>,
}

pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptEntry>, GatewayError> {
    let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| GatewayError::Io(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Endpoint settings for live calls.
#[derive(Clone)]
pub struct LiveConfig {
    pub endpoint: String,
    api_key: String,
    pub model_name: String,
    pub timeout: Duration,
    /// Waits after each failed attempt; its length is the attempt count.
    pub backoff: Vec<Duration>,
}

impl std::fmt::Debug for LiveConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveConfig")
            .field("endpoint", &self.endpoint)
            .field("api_key", &"<redacted>")
            .field("model_name", &self.model_name)
            .finish()
    }
}

impl LiveConfig {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            model_name: model_name.into(),
            timeout: Duration::from_secs(120),
            backoff: [1, 2, 4].map(Duration::from_secs).to_vec(),
        }
    }

    /// Reads `LLM_ENDPOINT`, `LLM_API_KEY` and `LLM_MODEL`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let get = |name: &str| {
            std::env::var(name)
                .ok()
                .filter(|v| !v.is_empty())
                .ok_or_else(|| GatewayError::AuthMissing(name.to_string()))
        };
        Ok(Self::new(get("LLM_ENDPOINT")?, get("LLM_API_KEY")?, get("LLM_MODEL")?))
    }

    pub fn secret(&self) -> &str {
        &self.api_key
    }
}

/// Shared token bucket limiting request rate across callers.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: u32, per_second: f64) -> Self {
        Self {
            capacity: capacity.max(1) as f64,
            per_second,
            state: Mutex::new((capacity.max(1) as f64, Instant::now())),
        }
    }

    /// Block until one token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap_or_else(|p| p.into_inner());
                let now = Instant::now();
                let refill = now.duration_since(s.1).as_secs_f64() * self.per_second;
                s.0 = (s.0 + refill).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                if self.per_second <= 0.0 {
                    Duration::from_millis(50)
                } else {
                    Duration::from_secs_f64((1.0 - s.0) / self.per_second)
                }
            };
            std::thread::sleep(wait);
        }
    }
}

/// Canned responses for tests: a digest table consulted first, then a queue.
#[derive(Debug, Default)]
pub struct MockResponses {
    pub table: HashMap<String, String>,
    pub queue: VecDeque<String>,
}

impl MockResponses {
    pub fn queue<I: IntoIterator<Item = S>, S: Into<String>>(items: I) -> Self {
        Self { table: HashMap::new(), queue: items.into_iter().map(Into::into).collect() }
    }
}

struct ReplayState {
    by_digest: HashMap<String, (Vec<String>, usize)>,
    sequence: Vec<TranscriptEntry>,
    cursor: usize,
}

enum ModeState {
    Live(LiveConfig),
    Record { live: LiveConfig, path: PathBuf },
    Replay { strict: bool, state: ReplayState },
    Mock(MockResponses),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Live,
    Record,
    Replay,
    Mock,
}

pub struct Gateway {
    mode: Mutex<ModeState>,
    bucket: Option<TokenBucket>,
    calls: Mutex<Vec<String>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("mode", &self.mode()).finish_non_exhaustive()
    }
}

impl Gateway {
    fn with(mode: ModeState) -> Self {
        Self { mode: Mutex::new(mode), bucket: None, calls: Mutex::new(Vec::new()) }
    }

    pub fn live(config: LiveConfig) -> Self {
        Self::with(ModeState::Live(config))
    }

    /// Live calls whose responses are appended to `transcript`.
    pub fn record(config: LiveConfig, transcript: impl Into<PathBuf>) -> Self {
        Self::with(ModeState::Record { live: config, path: transcript.into() })
    }

    /// Answer from a transcript. Repeated digests are served in recorded
    /// order, repeating the last one; `strict` also demands the recorded
    /// call sequence.
    pub fn replay(entries: Vec<TranscriptEntry>, strict: bool) -> Self {
        let mut by_digest: HashMap<String, (Vec<String>, usize)> = HashMap::new();
        for e in &entries {
            by_digest.entry(e.request_digest.clone()).or_default().0.push(e.response_text.clone());
        }
        Self::with(ModeState::Replay { strict, state: ReplayState { by_digest, sequence: entries, cursor: 0 } })
    }

    pub fn mock(responses: MockResponses) -> Self {
        Self::with(ModeState::Mock(responses))
    }

    pub fn with_rate_limit(mut self, bucket: TokenBucket) -> Self {
        self.bucket = Some(bucket);
        self
    }

    pub fn mode(&self) -> Mode {
        match &*self.mode.lock().unwrap_or_else(|p| p.into_inner()) {
            ModeState::Live(_) => Mode::Live,
            ModeState::Record { .. } => Mode::Record,
            ModeState::Replay { .. } => Mode::Replay,
            ModeState::Mock(_) => Mode::Mock,
        }
    }

    /// Digests of every request seen, in call order.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let digest = request.digest();
        self.calls.lock().unwrap_or_else(|p| p.into_inner()).push(digest.clone());
        // the live path must not hold the mode lock during network I/O
        let live = {
            let mut mode = self.mode.lock().unwrap_or_else(|p| p.into_inner());
            match &mut *mode {
                ModeState::Mock(m) => {
                    if let Some(r) = m.table.get(&digest) {
                        return Ok(r.clone());
                    }
                    return m.queue.pop_front().ok_or(GatewayError::MockExhausted(digest));
                }
                ModeState::Replay { strict, state } => return replay_lookup(*strict, state, &digest),
                ModeState::Live(cfg) => (cfg.clone(), None),
                ModeState::Record { live, path } => (live.clone(), Some(path.clone())),
            }
        };
        if let Some(bucket) = &self.bucket {
            bucket.acquire();
        }
        let (cfg, record_to) = live;
        let started = Instant::now();
        let (text, usage) = call_live(&cfg, request)?;
        if let Some(path) = record_to {
            let entry = TranscriptEntry {
                request_digest: digest,
                response_text: text.clone(),
                latency_ms: started.elapsed().as_millis() as u64,
                prompt_tokens: usage.0,
                completion_tokens: usage.1,
            };
            let _guard = self.mode.lock().unwrap_or_else(|p| p.into_inner());
            let mut line = serde_json::to_string(&entry).expect("entry serializes");
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .and_then(|mut f| f.write_all(line.as_bytes()))
                .map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        }
        Ok(text)
    }
}

fn replay_lookup(strict: bool, state: &mut ReplayState, digest: &str) -> Result<String, GatewayError> {
    if strict {
        let entry = state
            .sequence
            .get(state.cursor)
            .filter(|e| e.request_digest == digest)
            .ok_or_else(|| GatewayError::ReplayMiss(digest.to_string()))?;
        state.cursor += 1;
        return Ok(entry.response_text.clone());
    }
    let (responses, next) = state
        .by_digest
        .get_mut(digest)
        .ok_or_else(|| GatewayError::ReplayMiss(digest.to_string()))?;
    let i = (*next).min(responses.len() - 1);
    *next += 1;
    Ok(responses[i].clone())
}

type Usage = (Option<u64>, Option<u64>);

fn call_live(cfg: &LiveConfig, request: &ChatRequest) -> Result<(String, Usage), GatewayError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(cfg.timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let body = json!({
        "model": if request.params.model_name.is_empty() { &cfg.model_name } else { &request.params.model_name },
        "messages": request.messages,
        "temperature": request.params.temperature,
        "max_tokens": request.params.max_tokens,
    });
    let attempts = cfg.backoff.len().max(1) as u32;
    let mut last = String::new();
    for attempt in 0..attempts {
        let sent = agent
            .post(&cfg.endpoint)
            .header("Authorization", &format!("Bearer {}", cfg.api_key))
            .header("Content-Type", "application/json")
            .send_json(&body);
        match sent {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                if status >= 500 {
                    last = format!("http status {status}");
                } else if status >= 400 {
                    return Err(GatewayError::Rejected(format!("http status {status}")));
                } else {
                    let v: Value = resp
                        .body_mut()
                        .read_json()
                        .map_err(|e| GatewayError::Rejected(format!("unreadable response body: {e}")))?;
                    let text = v
                        .pointer("/choices/0/message/content")
                        .and_then(Value::as_str)
                        .ok_or_else(|| GatewayError::Rejected("response lacks choices[0].message.content".into()))?;
                    let usage = (
                        v.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
                        v.pointer("/usage/completion_tokens").and_then(Value::as_u64),
                    );
                    return Ok((text.to_string(), usage));
                }
            }
            Err(e) => last = e.to_string(),
        }
        if attempt + 1 < attempts {
            std::thread::sleep(cfg.backoff[attempt as usize]);
        }
    }
    Err(GatewayError::TransportExhausted { attempts, last })
}
