//! HTTP adapters for hosted services.
//!
//! The wire logic sits on top of [`HttpTransport`] so tests can inject
//! failures without a network.

use std::sync::{Arc, OnceLock};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    BackendError, ChatTurn, ImageEmbedder, ImageTextEmbedder, InflightLimiter, LlmClient,
    RetryPolicy, TextToImageClient,
};
use crate::model::{EmbeddingVector, ImageData};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone)]
pub struct HttpRequest {
    pub method: Method,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Option<String>,
    pub timeout: Duration,
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

pub trait HttpTransport: Send + Sync {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse, BackendError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(ReqwestTransport { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse, BackendError> {
        let mut builder = match request.method {
            Method::Get => self.client.get(&request.url),
            Method::Post => self.client.post(&request.url),
        }
        .timeout(request.timeout);
        for (k, v) in &request.headers {
            builder = builder.header(k, v);
        }
        if let Some(body) = &request.body {
            builder = builder
                .header("content-type", "application/json")
                .body(body.clone());
        }
        let response = builder.send().map_err(classify_reqwest)?;
        let status = response.status().as_u16();
        let body = response.text().map_err(classify_reqwest)?;
        Ok(HttpResponse { status, body })
    }
}

fn classify_reqwest(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport(e.to_string())
    }
}

/// Maps a raw response to the typed error taxonomy shared by all adapters.
fn check_status(response: HttpResponse) -> Result<String, BackendError> {
    match response.status {
        200..=299 => Ok(response.body),
        401 | 403 => Err(BackendError::Auth(response.body)),
        429 if response.body.contains("insufficient_quota") => {
            Err(BackendError::Quota(response.body))
        }
        413 => Err(BackendError::Status {
            status: 413,
            body: response.body,
        }),
        status => Err(BackendError::Status {
            status,
            body: response.body,
        }),
    }
}

fn parse_json(body: &str) -> Result<Value, BackendError> {
    serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatConfig {
    /// Full chat-completions endpoint URL.
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Never read from config files; filled from the environment.
    #[serde(skip)]
    pub api_key: Option<String>,
}

pub struct HttpChatClient {
    config: ChatConfig,
    transport: Arc<dyn HttpTransport>,
    limiter: InflightLimiter,
}

impl HttpChatClient {
    pub fn new(config: ChatConfig, transport: Arc<dyn HttpTransport>) -> Self {
        let limiter = InflightLimiter::new(config.max_in_flight);
        HttpChatClient {
            config,
            transport,
            limiter,
        }
    }

    pub fn request_body(&self, conversation: &[ChatTurn]) -> Value {
        let messages: Vec<Value> = conversation
            .iter()
            .map(|t| json!({"role": t.role.as_str(), "content": t.text}))
            .collect();
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        })
    }
}

fn auth_headers(key: &Option<String>) -> Vec<(String, String)> {
    key.iter()
        .map(|k| ("authorization".to_string(), format!("Bearer {k}")))
        .collect()
}

impl LlmClient for HttpChatClient {
    fn send(&self, conversation: &[ChatTurn]) -> Result<String, BackendError> {
        let request = HttpRequest {
            method: Method::Post,
            url: self.config.url.clone(),
            headers: auth_headers(&self.config.api_key),
            body: Some(self.request_body(conversation).to_string()),
            timeout: Duration::from_secs(self.config.timeout_secs),
        };
        let _slot = self.limiter.acquire();
        let body = self
            .config
            .retry
            .run(|| check_status(self.transport.execute(&request)?))?;
        let value = parse_json(&body)?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))
    }

    fn fingerprint(&self) -> String {
        format!("chat:{}", self.config.model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGenConfig {
    /// Full image-generation endpoint URL.
    pub url: String,
    pub model: String,
    #[serde(default = "default_image_size")]
    pub size: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(skip)]
    pub api_key: Option<String>,
}

fn default_image_size() -> String {
    "512x512".to_string()
}

pub struct HttpImageClient {
    config: ImageGenConfig,
    transport: Arc<dyn HttpTransport>,
    limiter: InflightLimiter,
}

impl HttpImageClient {
    pub fn new(config: ImageGenConfig, transport: Arc<dyn HttpTransport>) -> Self {
        let limiter = InflightLimiter::new(config.max_in_flight);
        HttpImageClient {
            config,
            transport,
            limiter,
        }
    }
}

impl TextToImageClient for HttpImageClient {
    fn generate(&self, text: &str) -> Result<ImageData, BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": text,
            "n": 1,
            "size": self.config.size,
            "response_format": "b64_json",
        });
        let request = HttpRequest {
            method: Method::Post,
            url: self.config.url.clone(),
            headers: auth_headers(&self.config.api_key),
            body: Some(body.to_string()),
            timeout: Duration::from_secs(self.config.timeout_secs),
        };
        let _slot = self.limiter.acquire();
        let body = self
            .config
            .retry
            .run(|| check_status(self.transport.execute(&request)?))?;
        let value = parse_json(&body)?;
        let b64 = value
            .pointer("/data/0/b64_json")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Malformed("missing data[0].b64_json".into()))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        Ok(ImageData::png(bytes))
    }

    fn fingerprint(&self) -> String {
        format!("image-gen:{}:{}", self.config.model, self.config.size)
    }
}

fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarConfig {
    pub base_url: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

#[derive(Debug, Deserialize)]
struct HealthResponse {
    status: String,
    #[serde(default)]
    models: HealthModels,
}

#[derive(Debug, Default, Deserialize)]
struct HealthModels {
    #[serde(default)]
    image_text: String,
    #[serde(default)]
    image: String,
}

#[derive(Debug, Deserialize)]
struct TextEmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Deserialize)]
struct ImageEmbedResponse {
    dim: usize,
    vector: Vec<f32>,
}

struct SidecarInner {
    config: SidecarConfig,
    transport: Arc<dyn HttpTransport>,
    limiter: InflightLimiter,
}

impl SidecarInner {
    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn call(&self, method: Method, path: &str, body: Option<Value>) -> Result<Value, BackendError> {
        let request = HttpRequest {
            method,
            url: self.url(path),
            headers: Vec::new(),
            body: body.map(|b| b.to_string()),
            timeout: Duration::from_secs(self.config.timeout_secs),
        };
        let _slot = self.limiter.acquire();
        let body = self
            .config
            .retry
            .run(|| check_status(self.transport.execute(&request)?))?;
        parse_json(&body)
    }

    fn embed_image(
        &self,
        model: &str,
        image: &ImageData,
        dim: &OnceLock<usize>,
    ) -> Result<EmbeddingVector, BackendError> {
        let body = json!({
            "image_b64": base64::engine::general_purpose::STANDARD.encode(&image.bytes),
            "format": image.format,
            "model": model,
        });
        let value = self.call(Method::Post, "/embed_image", Some(body))?;
        let response: ImageEmbedResponse =
            serde_json::from_value(value).map_err(|e| BackendError::Malformed(e.to_string()))?;
        check_dim(dim, response.dim, response.vector.len())?;
        Ok(EmbeddingVector::new(response.vector))
    }
}

/// Pins the first observed dimension and rejects any later deviation.
fn check_dim(slot: &OnceLock<usize>, declared: usize, actual: usize) -> Result<(), BackendError> {
    if declared != actual {
        return Err(BackendError::DimMismatch {
            expected: declared,
            got: actual,
        });
    }
    let expected = *slot.get_or_init(|| declared);
    if expected != declared {
        return Err(BackendError::DimMismatch {
            expected,
            got: declared,
        });
    }
    Ok(())
}

pub struct SidecarImageTextEmbedder {
    inner: Arc<SidecarInner>,
    fingerprint: String,
    dim: OnceLock<usize>,
}

pub struct SidecarImageEmbedder {
    inner: Arc<SidecarInner>,
    fingerprint: String,
    dim: OnceLock<usize>,
}

/// Checks `/health` and returns the two embedders served by one sidecar.
pub fn connect_sidecar(
    config: SidecarConfig,
    transport: Arc<dyn HttpTransport>,
) -> Result<(SidecarImageTextEmbedder, SidecarImageEmbedder), BackendError> {
    let limiter = InflightLimiter::new(config.max_in_flight);
    let inner = Arc::new(SidecarInner {
        config,
        transport,
        limiter,
    });
    let health: HealthResponse =
        serde_json::from_value(inner.call(Method::Get, "/health", None)?)
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
    if health.status != "ready" {
        return Err(BackendError::Unavailable(format!(
            "sidecar status {:?}",
            health.status
        )));
    }
    Ok((
        SidecarImageTextEmbedder {
            inner: inner.clone(),
            fingerprint: format!("sidecar:image_text:{}", health.models.image_text),
            dim: OnceLock::new(),
        },
        SidecarImageEmbedder {
            inner,
            fingerprint: format!("sidecar:image:{}", health.models.image),
            dim: OnceLock::new(),
        },
    ))
}

impl ImageTextEmbedder for SidecarImageTextEmbedder {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.inner.config.batch_size.max(1)) {
            let value =
                self.inner
                    .call(Method::Post, "/embed_text", Some(json!({ "texts": batch })))?;
            let response: TextEmbedResponse = serde_json::from_value(value)
                .map_err(|e| BackendError::Malformed(e.to_string()))?;
            if response.vectors.len() != batch.len() {
                return Err(BackendError::Malformed(format!(
                    "asked for {} vectors, got {}",
                    batch.len(),
                    response.vectors.len()
                )));
            }
            for v in response.vectors {
                check_dim(&self.dim, response.dim, v.len())?;
                out.push(EmbeddingVector::new(v));
            }
        }
        Ok(out)
    }

    fn embed_image(&self, image: &ImageData) -> Result<EmbeddingVector, BackendError> {
        self.inner.embed_image("image_text", image, &self.dim)
    }

    fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

impl ImageEmbedder for SidecarImageEmbedder {
    fn embed_image(&self, image: &ImageData) -> Result<EmbeddingVector, BackendError> {
        self.inner.embed_image("image", image, &self.dim)
    }

    fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}
