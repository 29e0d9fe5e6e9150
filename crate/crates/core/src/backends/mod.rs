//! Role interfaces for the four model services, plus HTTP adapters and
//! deterministic scripted mocks.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddingVector, ImageData};

pub mod fixture;
pub mod http;
pub mod mock;

pub use fixture::MockFixture;
pub use http::{
    connect_sidecar, ChatConfig, HttpChatClient, HttpImageClient, HttpTransport, ImageGenConfig,
    ReqwestTransport, SidecarConfig, SidecarImageEmbedder, SidecarImageTextEmbedder,
};
pub use mock::{
    Matcher, MockEmbedder, MockEmbedderSpec, MockImageGenerator, ScriptEntry, ScriptedLlm,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("quota exhausted: {0}")]
    Quota(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no scripted response for prompt {0:?}")]
    Unmatched(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("service not ready: {0}")]
    Unavailable(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        last: Box<BackendError>,
    },
}

impl BackendError {
    /// Errors worth another attempt under a retry policy.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
}

impl ChatTurn {
    pub fn user(text: impl Into<String>) -> Self {
        ChatTurn {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        ChatTurn {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

/// Conversational language model. Each call carries the full conversation,
/// so implementations hold no per-conversation state.
pub trait LlmClient: Send + Sync {
    fn send(&self, conversation: &[ChatTurn]) -> Result<String, BackendError>;
    fn fingerprint(&self) -> String;
}

pub trait TextToImageClient: Send + Sync {
    fn generate(&self, text: &str) -> Result<ImageData, BackendError>;
    fn fingerprint(&self) -> String;
}

/// Joint image-text encoder; both sides live in one space.
pub trait ImageTextEmbedder: Send + Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError>;
    fn embed_image(&self, image: &ImageData) -> Result<EmbeddingVector, BackendError>;
    /// Declared output dimension, when known ahead of the first call.
    fn dim(&self) -> Option<usize>;
    fn fingerprint(&self) -> String;
}

pub trait ImageEmbedder: Send + Sync {
    fn embed_image(&self, image: &ImageData) -> Result<EmbeddingVector, BackendError>;
    fn dim(&self) -> Option<usize>;
    fn fingerprint(&self) -> String;
}

/// One handle per model role.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn LlmClient>,
    pub image_gen: Arc<dyn TextToImageClient>,
    pub image_text: Arc<dyn ImageTextEmbedder>,
    pub image: Arc<dyn ImageEmbedder>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before attempt `attempt + 1`, where `attempt` starts at 1.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(20);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }

    /// Runs `op` until it succeeds, fails permanently, or the attempt budget is spent.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let max = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt < max => {
                    log::warn!("transient backend error (attempt {attempt}/{max}): {e}");
                    std::thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
                Err(e) if e.is_transient() => {
                    return Err(BackendError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Counting semaphore bounding concurrent requests to one provider.
#[derive(Debug)]
pub struct InflightLimiter {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct InflightGuard<'a> {
    limiter: &'a InflightLimiter,
}

impl InflightLimiter {
    pub fn new(max: usize) -> Self {
        InflightLimiter {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightGuard<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.max {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        InflightGuard { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.used.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        let mut used = self.limiter.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.limiter.freed.notify_one();
    }
}
