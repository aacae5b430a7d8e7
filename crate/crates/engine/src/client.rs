//! HTTP client for chat-completions endpoints with bounded concurrency and
//! seeded retry backoff.

use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use surveyor_core::chat::{CompletionProvider, ConversationTurn, ProviderError};
use surveyor_core::rng::SeededRng;

use crate::config::{ProviderConfig, RetryClass, RetryPolicy};
use crate::wire::{ChatRequest, ChatResponse, Completion};

/// Header carrying the unit id, so transcripts can be attributed.
pub const UNIT_HEADER: &str = "x-unit-id";

pub const MAX_BACKOFF_MS: u64 = 30_000;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SendError {
    #[error("authentication failed (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("malformed response: {0}")]
    Decode(String),
}

impl SendError {
    pub fn class(&self) -> Option<RetryClass> {
        match self {
            SendError::Auth { .. } | SendError::Decode(_) => None,
            SendError::Status { status: 429, .. } => Some(RetryClass::RateLimited),
            SendError::Status { status, .. } if *status >= 500 => Some(RetryClass::ServerError),
            SendError::Status { .. } => Some(RetryClass::ClientError),
            SendError::Timeout => Some(RetryClass::Timeout),
            SendError::Connect(_) => Some(RetryClass::Connect),
        }
    }

    pub fn is_auth(&self) -> bool {
        matches!(self, SendError::Auth { .. })
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("cannot build HTTP client: {0}")]
    Build(String),
}

/// Result of a call including retries.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub result: Result<Completion, SendError>,
    pub attempts: u32,
    pub latency_ms: u64,
}

pub fn stable_hash(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Full-jitter exponential backoff: a uniform draw from
/// `[0, min(cap, base * 2^(attempt-1))]`.
pub fn backoff_delay(policy: &RetryPolicy, rng: &mut SeededRng, attempt: u32) -> Duration {
    let exp = policy
        .backoff_base_ms
        .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(32));
    let ceiling = exp.min(MAX_BACKOFF_MS);
    Duration::from_millis(rng.below(ceiling as usize + 1) as u64)
}

pub struct ChatClient {
    http: reqwest::Client,
    cfg: ProviderConfig,
    endpoint: String,
    api_key: Option<String>,
    permits: Arc<Semaphore>,
    /// Set by the first 401/403; later sends fail fast with the same error.
    rejected: OnceLock<(u16, String)>,
}

impl ChatClient {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, ClientError> {
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ClientError::MissingApiKey(var.clone()))?),
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| ClientError::Build(e.to_string()))?;
        Ok(Self {
            http,
            endpoint: format!("{}/chat/completions", cfg.base_url.trim_end_matches('/')),
            cfg: cfg.clone(),
            api_key,
            permits: Arc::new(Semaphore::new(cfg.max_in_flight)),
            rejected: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    async fn send_once(&self, req: &ChatRequest, unit: &str) -> Result<Completion, SendError> {
        let _permit = self.permits.acquire().await.expect("semaphore never closes");
        if let Some((status, body)) = self.rejected.get() {
            return Err(SendError::Auth {
                status: *status,
                body: body.clone(),
            });
        }
        let mut builder = self.http.post(&self.endpoint).header(UNIT_HEADER, unit).json(req);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().await.map_err(classify)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.text().await.unwrap_or_default();
            return Err(if status == 401 || status == 403 {
                let _ = self.rejected.set((status, body.clone()));
                SendError::Auth { status, body }
            } else {
                SendError::Status { status, body }
            });
        }
        let body: ChatResponse = resp.json().await.map_err(|e| {
            if e.is_timeout() {
                SendError::Timeout
            } else {
                SendError::Decode(e.to_string())
            }
        })?;
        body.into_completion().map_err(SendError::Decode)
    }

    /// Sends with retries. Backoff jitter is drawn from a stream seeded by
    /// the policy seed and the unit id, so schedules are reproducible.
    pub async fn send(&self, req: &ChatRequest, unit: &str) -> Outcome {
        let policy = &self.cfg.retry;
        let mut rng = SeededRng::new(policy.jitter_seed ^ stable_hash(unit));
        let started = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            let result = self.send_once(req, unit).await;
            let retry = match &result {
                Ok(_) => false,
                Err(e) => attempts < policy.max_attempts && e.class().is_some_and(|c| policy.retry_on.contains(&c)),
            };
            if !retry {
                return Outcome {
                    result,
                    attempts,
                    latency_ms: started.elapsed().as_millis() as u64,
                };
            }
            tokio::time::sleep(backoff_delay(policy, &mut rng, attempts)).await;
        }
    }
}

fn classify(e: reqwest::Error) -> SendError {
    // Anything short of a timeout that fails before a status line arrives
    // is treated as a transport failure.
    if e.is_timeout() {
        SendError::Timeout
    } else {
        SendError::Connect(e.to_string())
    }
}

/// Synchronous adapter used by paraphrasing and judging. Must be called
/// from a thread outside the async runtime (e.g. `spawn_blocking`).
pub struct BlockingProvider {
    pub client: Arc<ChatClient>,
    pub handle: tokio::runtime::Handle,
    pub unit_tag: String,
    pub seed: Option<u64>,
    pub log: std::sync::Mutex<Vec<AuxCall>>,
}

/// Accounting for one auxiliary call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AuxCall {
    pub attempts: u32,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl BlockingProvider {
    pub fn new(client: Arc<ChatClient>, handle: tokio::runtime::Handle, unit_tag: impl Into<String>, seed: Option<u64>) -> Self {
        Self {
            client,
            handle,
            unit_tag: unit_tag.into(),
            seed,
            log: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<AuxCall> {
        self.log.lock().expect("log lock").clone()
    }
}

impl CompletionProvider for BlockingProvider {
    fn complete(&self, messages: &[ConversationTurn]) -> Result<String, ProviderError> {
        let req = ChatRequest::plain(messages, self.client.config(), self.seed);
        let out = self.handle.block_on(self.client.send(&req, &self.unit_tag));
        let mut call = AuxCall {
            attempts: out.attempts,
            ..AuxCall::default()
        };
        let result = match out.result {
            Ok(c) => {
                call.input_tokens = c.usage.input_tokens;
                call.output_tokens = c.usage.output_tokens;
                Ok(c.text)
            }
            Err(e) => Err(ProviderError(e.to_string())),
        };
        self.log.lock().expect("log lock").push(call);
        result
    }
}
