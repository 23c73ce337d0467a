//! Model clients: a trait, a scripted mock keyed by prompt digest, and a
//! blocking HTTP client (feature `http`).

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::vision::ImageGrid;

/// One completion request. Captioning requests carry the frame.
#[derive(Debug, Clone, Copy)]
pub struct Request<'a> {
    pub prompt: &'a str,
    pub image: Option<&'a ImageGrid>,
}

impl<'a> Request<'a> {
    pub fn text(prompt: &'a str) -> Self {
        Self { prompt, image: None }
    }

    pub fn with_image(prompt: &'a str, image: &'a ImageGrid) -> Self {
        Self {
            prompt,
            image: Some(image),
        }
    }

    /// Digest used to key scripted responses: FNV-1a over the prompt bytes,
    /// followed by `"\n"` and the image's CGIMG text when an image is attached.
    pub fn digest(&self) -> u64 {
        let mut h = fnv1a64(FNV_OFFSET, self.prompt.as_bytes());
        if let Some(img) = self.image {
            h = fnv1a64(h, b"\n");
            h = fnv1a64(h, img.to_text().as_bytes());
        }
        h
    }

    pub fn digest_hex(&self) -> String {
        format!("{:016x}", self.digest())
    }
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a, continuing from `state`.
pub fn fnv1a64(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= u64::from(b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientError {
    /// Worth retrying: timeouts, rate limits, server errors.
    Transient(String),
    Fatal(String),
}

pub trait ModelClient: Send + Sync {
    fn complete(&self, req: &Request<'_>) -> std::result::Result<String, ClientError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the first retry; doubled for each further retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            base_delay: Duration::ZERO,
        }
    }
}

/// Calls `client`, retrying transient failures with doubling backoff.
pub fn complete_with_retry(client: &dyn ModelClient, req: &Request<'_>, policy: &RetryPolicy) -> Result<String> {
    let mut delay = policy.base_delay;
    let mut last = String::from("no attempts configured");
    for attempt in 0..policy.attempts {
        if attempt > 0 && !delay.is_zero() {
            std::thread::sleep(delay);
            delay *= 2;
        }
        match client.complete(req) {
            Ok(text) => return Ok(text),
            Err(ClientError::Fatal(msg)) => return Err(Error::ClientFailure(msg)),
            Err(ClientError::Transient(msg)) => last = msg,
        }
    }
    Err(Error::ClientFailure(format!(
        "gave up after {} attempts: {last}",
        policy.attempts
    )))
}

/// Returns scripted responses keyed by [`Request::digest_hex`]. The key `"*"`
/// is the fallback for unscripted requests.
#[derive(Debug, Clone, Default)]
pub struct MockClient {
    responses: HashMap<String, String>,
}

pub const MOCK_FALLBACK: &str = "*";

impl MockClient {
    pub fn new(responses: HashMap<String, String>) -> Self {
        Self { responses }
    }

    /// The same response for every request.
    pub fn constant(text: &str) -> Self {
        Self::new(HashMap::from([(MOCK_FALLBACK.to_string(), text.to_string())]))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn script(&mut self, req: &Request<'_>, response: &str) {
        self.responses.insert(req.digest_hex(), response.to_string());
    }

    pub fn responses(&self) -> &HashMap<String, String> {
        &self.responses
    }
}

impl ModelClient for MockClient {
    fn complete(&self, req: &Request<'_>) -> std::result::Result<String, ClientError> {
        self.responses
            .get(&req.digest_hex())
            .or_else(|| self.responses.get(MOCK_FALLBACK))
            .cloned()
            .ok_or_else(|| ClientError::Fatal(format!("no scripted response for digest {}", req.digest_hex())))
    }
}

/// POSTs `{"prompt": ..., "image"?: <CGIMG text>}` and reads `{"text": ...}`.
#[cfg(feature = "http")]
pub struct HttpClient {
    url: String,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

/// Environment variable holding the bearer token for [`HttpClient`].
pub const TOKEN_ENV: &str = "VLM_API_TOKEN";

#[cfg(feature = "http")]
impl HttpClient {
    pub fn new(url: &str, token: Option<String>, timeout: Duration) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::ClientFailure(e.to_string()))?;
        Ok(Self {
            url: url.to_string(),
            token,
            http,
        })
    }

    /// Token from [`TOKEN_ENV`], 120 s timeout.
    pub fn from_env(url: &str) -> Result<Self> {
        Self::new(url, std::env::var(TOKEN_ENV).ok(), Duration::from_secs(120))
    }
}

#[cfg(feature = "http")]
impl ModelClient for HttpClient {
    fn complete(&self, req: &Request<'_>) -> std::result::Result<String, ClientError> {
        let mut body = serde_json::json!({ "prompt": req.prompt });
        if let Some(img) = req.image {
            body["image"] = img.to_text().into();
        }
        let mut call = self.http.post(&self.url).json(&body);
        if let Some(t) = &self.token {
            call = call.bearer_auth(t);
        }
        let resp = call.send().map_err(|e| ClientError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ClientError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(ClientError::Fatal(format!("HTTP {status}")));
        }
        let value: serde_json::Value = resp.json().map_err(|e| ClientError::Fatal(e.to_string()))?;
        value
            .get("text")
            .and_then(|t| t.as_str())
            .map(str::to_string)
            .ok_or_else(|| ClientError::Fatal("response has no \"text\" field".into()))
    }
}
