use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use recap_core::config::ChatEndpointConfig;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::Semaphore;

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("HTTP {status} from endpoint (not retried): {body}")]
    Status { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("cannot decode response: {0}")]
    Decode(String),
    #[error("request failed: {0}")]
    Transport(String),
}

impl ChatError {
    /// Number of attempts made before this error, when known.
    pub fn attempts(&self) -> Option<u32> {
        match self {
            ChatError::RetriesExhausted { attempts, .. } => Some(*attempts),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
}

/// Sampling knobs forwarded to the endpoint; unset ones are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatSampling {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    /// Not part of the OpenAI schema; servers that support it honour it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl ChatSampling {
    pub fn from_sampler(p: &recap_core::SamplerParams, seed: u64) -> Self {
        ChatSampling {
            temperature: Some(p.temperature),
            top_p: Some(p.top_p),
            top_k: Some(p.top_k),
            seed: Some(seed),
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    #[serde(flatten)]
    sampling: &'a ChatSampling,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatOutcome {
    pub text: String,
    pub usage: Option<Usage>,
    pub attempts: u32,
    /// Sleeps taken before each retry.
    pub backoff_delays: Vec<Duration>,
}

/// One request/response exchange as written to the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub attempt: u32,
    pub request: Value,
    pub status: Option<u16>,
    pub response: String,
}

/// Appends audit records to a JSONL file.
#[derive(Debug, Clone)]
pub struct AuditLog {
    file: Arc<Mutex<std::fs::File>>,
}

impl AuditLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog { file: Arc::new(Mutex::new(file)) })
    }

    fn write(&self, record: &AuditRecord) {
        use std::io::Write;
        let mut line = serde_json::to_vec(record).expect("audit record serializes");
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = f.write_all(&line) {
            tracing::warn!("audit write failed: {e}");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub ceiling: Duration,
}

impl RetryPolicy {
    /// Exponential delay for retry `n` (0-based), capped, with equal jitter:
    /// uniform in `[d/2, d]`.
    pub fn delay<R: Rng + ?Sized>(&self, n: u32, rng: &mut R) -> Duration {
        let exp = self.base.saturating_mul(1u32.checked_shl(n.min(31)).unwrap_or(u32::MAX));
        let capped = exp.min(self.ceiling);
        capped.mul_f64(0.5 + 0.5 * rng.random::<f64>())
    }
}

pub fn is_retryable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

/// Async client for an OpenAI-compatible `/v1/chat/completions` endpoint.
#[derive(Clone)]
pub struct ChatClient {
    http: reqwest::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    permits: Arc<Semaphore>,
    audit: Option<AuditLog>,
}

impl fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatClient")
            .field("url", &self.url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("retry", &self.retry)
            .finish()
    }
}

impl ChatClient {
    pub fn new(config: &ChatEndpointConfig) -> Result<Self, ChatError> {
        config.validate().map_err(|e| ChatError::Config(e.to_string()))?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ChatError::MissingApiKey(var.clone()))?),
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| ChatError::Config(e.to_string()))?;
        Ok(ChatClient {
            http,
            url: format!("{}/v1/chat/completions", config.base_url.trim_end_matches('/')),
            model: config.model.clone(),
            api_key,
            retry: RetryPolicy {
                max_retries: config.max_retries,
                base: Duration::from_millis(config.backoff_base_ms),
                ceiling: Duration::from_millis(config.backoff_ceiling_ms),
            },
            permits: Arc::new(Semaphore::new(config.max_in_flight)),
            audit: None,
        })
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn endpoint_label(&self) -> String {
        format!("{} ({})", self.url, self.model)
    }

    /// One chat completion. Timeouts, 429 and 5xx are retried up to
    /// `max_retries` times; any other failure returns at once.
    pub async fn complete(&self, messages: &[ChatMessage], sampling: &ChatSampling) -> Result<ChatOutcome, ChatError> {
        let body = ChatRequest { model: &self.model, messages, sampling };
        let body_value = serde_json::to_value(&body).expect("request serializes");
        let mut delays = Vec::new();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.permits.acquire().await.expect("semaphore never closes");
                let mut req = self.http.post(&self.url).json(&body_value);
                if let Some(key) = &self.api_key {
                    req = req.bearer_auth(key);
                }
                match req.send().await {
                    Ok(resp) => {
                        let status = resp.status();
                        let retry_after = resp
                            .headers()
                            .get(reqwest::header::RETRY_AFTER)
                            .and_then(|v| v.to_str().ok())
                            .and_then(|v| v.trim().parse::<f64>().ok())
                            .filter(|s| s.is_finite() && *s >= 0.0)
                            .map(Duration::from_secs_f64);
                        match resp.text().await {
                            Ok(text) => Ok((status, text, retry_after)),
                            Err(e) => Err(e),
                        }
                    }
                    Err(e) => Err(e),
                }
            };
            let (last, retry_after) = match result {
                Ok((status, text, retry_after)) => {
                    self.record(attempt, &body_value, Some(status.as_u16()), &text);
                    if status.is_success() {
                        let (text, usage) = parse_response(&text)?;
                        return Ok(ChatOutcome { text, usage, attempts: attempt, backoff_delays: delays });
                    }
                    if !is_retryable(status) {
                        return Err(ChatError::Status { status: status.as_u16(), body: truncate(&text, 512) });
                    }
                    (format!("HTTP {}", status.as_u16()), retry_after)
                }
                Err(e) => {
                    self.record(attempt, &body_value, None, &e.to_string());
                    if !e.is_timeout() {
                        return Err(ChatError::Transport(e.to_string()));
                    }
                    ("timeout".to_string(), None)
                }
            };
            if attempt > self.retry.max_retries {
                return Err(ChatError::RetriesExhausted { attempts: attempt, last });
            }
            let mut delay = self.retry.delay(attempt - 1, &mut rand::rng());
            if let Some(ra) = retry_after {
                delay = delay.max(ra.min(self.retry.ceiling));
            }
            tracing::debug!(attempt, ?delay, %last, "retrying chat completion");
            delays.push(delay);
            tokio::time::sleep(delay).await;
        }
    }

    fn record(&self, attempt: u32, request: &Value, status: Option<u16>, response: &str) {
        if let Some(audit) = &self.audit {
            audit.write(&AuditRecord { attempt, request: request.clone(), status, response: response.to_string() });
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

fn parse_response(text: &str) -> Result<(String, Option<Usage>), ChatError> {
    let resp: ChatResponse = serde_json::from_str(text).map_err(|e| ChatError::Decode(e.to_string()))?;
    let choice = resp.choices.into_iter().next().ok_or_else(|| ChatError::Decode("no choices".into()))?;
    let content = choice.message.content.ok_or_else(|| ChatError::Decode("choice has no content".into()))?;
    Ok((content, resp.usage))
}
