//! Chat-completions transport plus record/replay clients.
//!
//! Every call is a single-turn `[system, user]` exchange. Transport
//! failures never surface as errors from [`HttpChatClient`]; they come back
//! as [`ChatOutcome`] variants so the scheduler can fall back.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("replay transcript exhausted after {0} record(s)")]
    ReplayExhausted(usize),
    #[error("prompt drift at replay record {index}: stored hash {stored}, request hash {actual}")]
    ReplayPromptDrift {
        index: usize,
        stored: String,
        actual: String,
    },
    #[error("transcript {path}: line {line}: {reason}")]
    BadTranscript {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the scheduler will interpret a response; recorded alongside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFormat {
    RuleChoice,
    DirectWeights { branches: usize },
    Freeform,
}

/// Bookkeeping attached to a request; not part of the wire body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallMeta {
    pub tick: u64,
    pub epoch: u64,
    pub format: ResponseFormat,
}

impl Default for CallMeta {
    fn default() -> Self {
        CallMeta {
            tick: 0,
            epoch: 0,
            format: ResponseFormat::Freeform,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout: Duration,
    pub meta: CallMeta,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, system: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            system: system.into(),
            user: user.into(),
            temperature: 0.0,
            max_tokens: 1024,
            timeout: Duration::from_secs(60),
            meta: CallMeta::default(),
        }
    }

    pub fn with_meta(mut self, meta: CallMeta) -> Self {
        self.meta = meta;
        self
    }

    /// JSON body sent on the wire.
    pub fn body(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.system},
                {"role": "user", "content": self.user},
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.body()).expect("request body serializes")
    }

    /// Hex SHA-256 of the exact request body bytes.
    pub fn prompt_hash(&self) -> String {
        hex::encode(Sha256::digest(self.body_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatOutcome {
    Success { content: String },
    TransportError { message: String },
    HttpError { status: u16, body: String },
    Timeout,
}

impl ChatOutcome {
    pub fn content(&self) -> Option<&str> {
        match self {
            ChatOutcome::Success { content } => Some(content),
            _ => None,
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, ChatOutcome::Success { .. })
    }
}

pub trait ChatClient: Send {
    fn chat(&mut self, request: &ChatRequest) -> Result<ChatOutcome, ClientError>;
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn chat(&mut self, request: &ChatRequest) -> Result<ChatOutcome, ClientError> {
        (**self).chat(request)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
}

impl std::fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &"<redacted>")
            .field("model", &self.model)
            .finish()
    }
}

impl EndpointConfig {
    /// Reads `LLM_API_KEY`, `LLM_BASE_URL` and `LLM_MODEL`.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        EndpointConfig {
            base_url: var("LLM_BASE_URL").unwrap_or_else(|| DEFAULT_BASE_URL.to_string()),
            api_key: var("LLM_API_KEY").unwrap_or_default(),
            model: var("LLM_MODEL").unwrap_or_else(|| DEFAULT_MODEL.to_string()),
        }
    }

    pub fn has_credentials(&self) -> bool {
        !self.api_key.is_empty()
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Sleep before retry `i` is `backoff[i]`; its length is the retry count.
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            backoff: vec![Duration::from_secs(1), Duration::from_secs(2)],
        }
    }
}

/// Blocking client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChatClient {
    endpoint: EndpointConfig,
    retry: RetryPolicy,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(endpoint: EndpointConfig) -> Self {
        Self::with_retry(endpoint, RetryPolicy::default())
    }

    pub fn with_retry(endpoint: EndpointConfig, retry: RetryPolicy) -> Self {
        let http = reqwest::blocking::Client::builder()
            .build()
            .expect("TLS backend initializes");
        HttpChatClient { endpoint, retry, http }
    }

    fn attempt(&self, request: &ChatRequest) -> ChatOutcome {
        let mut builder = self
            .http
            .post(self.endpoint.completions_url())
            .timeout(request.timeout)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(request.body_bytes());
        if !self.endpoint.api_key.is_empty() {
            builder = builder.bearer_auth(&self.endpoint.api_key);
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return ChatOutcome::Timeout,
            Err(e) => return ChatOutcome::TransportError { message: e.to_string() },
        };
        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return ChatOutcome::Timeout,
            Err(e) => return ChatOutcome::TransportError { message: e.to_string() },
        };
        if !status.is_success() {
            return ChatOutcome::HttpError {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            };
        }
        match first_choice_content(&text) {
            Some(content) => ChatOutcome::Success { content },
            None => ChatOutcome::TransportError {
                message: format!("malformed completion body: {}", text.chars().take(200).collect::<String>()),
            },
        }
    }
}

fn first_choice_content(body: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    v.get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
        .map(str::to_string)
}

fn retryable(outcome: &ChatOutcome) -> bool {
    match outcome {
        ChatOutcome::Success { .. } => false,
        ChatOutcome::TransportError { .. } | ChatOutcome::Timeout => true,
        ChatOutcome::HttpError { status, .. } => *status == 429 || *status >= 500,
    }
}

impl ChatClient for HttpChatClient {
    fn chat(&mut self, request: &ChatRequest) -> Result<ChatOutcome, ClientError> {
        let mut outcome = self.attempt(request);
        for delay in &self.retry.backoff {
            if !retryable(&outcome) {
                break;
            }
            log::warn!("chat request failed ({outcome:?}); retrying in {delay:?}");
            std::thread::sleep(*delay);
            outcome = self.attempt(request);
        }
        Ok(outcome)
    }
}

pub fn chat(endpoint: &EndpointConfig, request: &ChatRequest) -> ChatOutcome {
    HttpChatClient::new(endpoint.clone())
        .chat(request)
        .expect("HTTP client does not return errors")
}

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub tick: u64,
    pub epoch: u64,
    pub prompt_hash: String,
    pub prompt: String,
    pub response: ChatOutcome,
    /// Scheduler's interpretation of the response, e.g. `"3"` or `"[0.5, 1.0]"`.
    pub parsed: Option<String>,
    pub failure: bool,
    pub timestamp: String,
}

/// Builds the record for one exchange; `failure` covers transport and parse failures.
pub fn make_record(request: &ChatRequest, outcome: &ChatOutcome) -> TranscriptRecord {
    let (parsed, failure) = match outcome.content() {
        Some(c) => match crate::scheduler::interpret_response(request.meta.format, c) {
            Ok(p) => (p, false),
            Err(_) => (None, true),
        },
        None => (None, true),
    };
    TranscriptRecord {
        tick: request.meta.tick,
        epoch: request.meta.epoch,
        prompt_hash: request.prompt_hash(),
        prompt: request.user.clone(),
        response: outcome.clone(),
        parsed,
        failure,
        timestamp: chrono::Utc::now().to_rfc3339(),
    }
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, ClientError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| ClientError::BadTranscript {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Appends every exchange of the wrapped client to a transcript file.
pub struct RecordingClient<C> {
    inner: C,
    path: PathBuf,
}

impl<C: ChatClient> RecordingClient<C> {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn into_inner(self) -> C {
        self.inner
    }
}

pub fn record_session<C: ChatClient>(inner: C, path: impl Into<PathBuf>) -> Result<RecordingClient<C>, ClientError> {
    let path = path.into();
    // fail early if the file cannot be opened for appending
    OpenOptions::new().create(true).append(true).open(&path)?;
    Ok(RecordingClient { inner, path })
}

impl<C: ChatClient> ChatClient for RecordingClient<C> {
    fn chat(&mut self, request: &ChatRequest) -> Result<ChatOutcome, ClientError> {
        let outcome = self.inner.chat(request)?;
        let record = make_record(request, &outcome);
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(outcome)
    }
}

/// Serves recorded responses in order, checking each request's hash.
#[derive(Debug, Clone)]
pub struct ReplayClient {
    records: Vec<TranscriptRecord>,
    cursor: usize,
}

impl ReplayClient {
    pub fn from_records(records: Vec<TranscriptRecord>) -> Self {
        ReplayClient { records, cursor: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.records.len() - self.cursor
    }
}

pub fn replay_session(path: &Path) -> Result<ReplayClient, ClientError> {
    Ok(ReplayClient::from_records(read_transcript(path)?))
}

impl ChatClient for ReplayClient {
    fn chat(&mut self, request: &ChatRequest) -> Result<ChatOutcome, ClientError> {
        let record = self
            .records
            .get(self.cursor)
            .ok_or(ClientError::ReplayExhausted(self.records.len()))?;
        let actual = request.prompt_hash();
        if actual != record.prompt_hash {
            return Err(ClientError::ReplayPromptDrift {
                index: self.cursor,
                stored: record.prompt_hash.clone(),
                actual,
            });
        }
        self.cursor += 1;
        Ok(record.response.clone())
    }
}

/// Returns fixed responses in order, cycling; a stand-in for a live endpoint.
#[derive(Debug, Clone)]
pub struct ScriptedChatClient {
    responses: Vec<ChatOutcome>,
    cursor: usize,
}

impl ScriptedChatClient {
    pub fn new(responses: Vec<ChatOutcome>) -> Self {
        assert!(!responses.is_empty(), "scripted client needs at least one response");
        ScriptedChatClient { responses, cursor: 0 }
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        Self::new(
            texts
                .iter()
                .map(|t| ChatOutcome::Success { content: t.as_ref().to_string() })
                .collect(),
        )
    }
}

impl ChatClient for ScriptedChatClient {
    fn chat(&mut self, _request: &ChatRequest) -> Result<ChatOutcome, ClientError> {
        let out = self.responses[self.cursor % self.responses.len()].clone();
        self.cursor += 1;
        Ok(out)
    }
}
