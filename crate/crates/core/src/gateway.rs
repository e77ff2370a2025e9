//! Text-completion client.
//!
//! Requests use the legacy completions wire schema
//! (`{model, prompt, temperature, max_tokens, stop}` in, `choices[0].text`
//! out). Three modes:
//!
//! * `live`: always call the endpoint, never touch the cache
//! * `record`: serve from the cache when the key is present, otherwise call
//!   the endpoint and append the result
//! * `replay`: serve from the cache only; a miss is an error and the
//!   transport is never used
//!
//! Cache entries are keyed by `(prompt digest, attempt)`, so a semantic retry
//! with an identical prompt is a distinct entry.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::promptkit::PromptText;
use crate::Method;

pub const DEFAULT_MODEL: &str = "text-davinci-003";
pub const DEFAULT_MAX_TOKENS: u32 = 512;
pub const API_KEY_ENV: &str = "PGA_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("cache miss for digest {digest} attempt {attempt}")]
    CacheMiss { digest: String, attempt: u32 },
    #[error("transport failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: TransportError },
    #[error("invalid completion parameters: {0}")]
    InvalidParams(String),
    #[error("malformed completion response: {0}")]
    Protocol(String),
    #[error("cache file {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("http status {status}")]
    Http {
        status: u16,
        retry_after: Option<Duration>,
        body: String,
    },
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
}

impl TransportError {
    fn is_retryable(&self) -> bool {
        match self {
            TransportError::Http { status, .. } => {
                *status == 408 || *status == 429 || *status >= 500
            }
            TransportError::Timeout | TransportError::Connect(_) => true,
        }
    }

    fn retry_after(&self) -> Option<Duration> {
        match self {
            TransportError::Http { retry_after, .. } => *retry_after,
            _ => None,
        }
    }
}

/// Sends one request body and returns the response body.
pub trait Transport: Send + Sync {
    fn post(&self, body: &str) -> Result<String, TransportError>;
}

/// HTTP transport over `ureq`.
pub struct HttpTransport {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            url: url.into(),
            api_key,
            agent,
        }
    }

    /// API key from `PGA_API_KEY`, if set.
    pub fn from_env(url: impl Into<String>, timeout: Duration) -> Self {
        HttpTransport::new(url, std::env::var(API_KEY_ENV).ok(), timeout)
    }
}

impl Transport for HttpTransport {
    fn post(&self, body: &str) -> Result<String, TransportError> {
        let mut req = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(TransportError::Timeout),
            Err(e) => return Err(TransportError::Connect(e.to_string())),
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .map(Duration::from_secs_f64);
        let text = resp.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            e => TransportError::Connect(e.to_string()),
        })?;
        if (200..300).contains(&status) {
            Ok(text)
        } else {
            Err(TransportError::Http {
                status,
                retry_after,
                body: text,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
}

impl CompletionParams {
    /// Paraphrase runs at temperature 0.5, generate runs at 1.0.
    pub fn for_method(method: Method) -> Self {
        CompletionParams {
            model_name: DEFAULT_MODEL.to_string(),
            temperature: match method {
                Method::Paraphrase => 0.5,
                Method::Generate => 1.0,
            },
            max_tokens: DEFAULT_MAX_TOKENS,
            stop_sequences: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidParams(
                "max_tokens must be positive".into(),
            ));
        }
        if self.model_name.is_empty() {
            return Err(GatewayError::InvalidParams("model name is empty".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
    stop: &'a [String],
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

/// JSON request body in the legacy completions schema.
pub fn request_body(prompt: &str, params: &CompletionParams) -> String {
    serde_json::to_string(&WireRequest {
        model: &params.model_name,
        prompt,
        temperature: params.temperature,
        max_tokens: params.max_tokens,
        stop: &params.stop_sequences,
    })
    .expect("request serialization cannot fail")
}

pub fn parse_response(body: &str) -> Result<String, GatewayError> {
    let resp: WireResponse =
        serde_json::from_str(body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
    resp.choices
        .into_iter()
        .next()
        .map(|c| c.text)
        .ok_or_else(|| GatewayError::Protocol("response has no choices".into()))
}

/// Hex SHA-256 over the request body, which spells out the prompt and every
/// parameter in a fixed field order.
pub fn digest(prompt: &PromptText, params: &CompletionParams) -> String {
    digest_text(&prompt.text, params)
}

pub fn digest_text(prompt: &str, params: &CompletionParams) -> String {
    let mut hasher = Sha256::new();
    hasher.update(request_body(prompt, params).as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportStatus {
    Ok,
    HttpError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt_digest: String,
    /// Semantic attempt number, starting at 1.
    pub attempt: u32,
    pub raw_text: String,
    pub transport_status: TransportStatus,
    /// Unix seconds.
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Live,
    Record,
    Replay,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Live => "live",
            Mode::Record => "record",
            Mode::Replay => "replay",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Mode::Live),
            "record" => Ok(Mode::Record),
            "replay" => Ok(Mode::Replay),
            other => Err(format!(
                "unknown mode `{other}` (expected live|record|replay)"
            )),
        }
    }
}

/// Append-only JSONL file of completion records with an in-memory index.
pub struct CompletionCache {
    path: Option<PathBuf>,
    inner: Mutex<CacheInner>,
}

struct CacheInner {
    index: HashMap<(String, u32), CompletionRecord>,
    file: Option<File>,
}

impl CompletionCache {
    pub fn in_memory() -> Self {
        CompletionCache {
            path: None,
            inner: Mutex::new(CacheInner {
                index: HashMap::new(),
                file: None,
            }),
        }
    }

    /// Opens or creates the cache file and indexes its records. Later lines
    /// never replace earlier ones for the same key.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let err = |message: String| GatewayError::Cache {
            path: path.display().to_string(),
            message,
        };
        let mut index = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(|e| err(e.to_string()))?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CompletionRecord =
                    serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
                index
                    .entry((rec.prompt_digest.clone(), rec.attempt))
                    .or_insert(rec);
            }
        }
        Ok(CompletionCache {
            path: Some(path.to_path_buf()),
            inner: Mutex::new(CacheInner { index, file: None }),
        })
    }

    /// Like [`CompletionCache::open`], but the file must already exist.
    pub fn open_existing(path: &Path) -> Result<Self, GatewayError> {
        if !path.exists() {
            return Err(GatewayError::Cache {
                path: path.display().to_string(),
                message: "cache file does not exist".into(),
            });
        }
        CompletionCache::open(path)
    }

    pub fn get(&self, digest: &str, attempt: u32) -> Option<CompletionRecord> {
        let inner = self.inner.lock().expect("cache lock poisoned");
        inner.index.get(&(digest.to_string(), attempt)).cloned()
    }

    /// Inserts unless the key already exists; returns the stored record.
    pub fn insert(&self, record: CompletionRecord) -> Result<CompletionRecord, GatewayError> {
        let mut inner = self.inner.lock().expect("cache lock poisoned");
        let key = (record.prompt_digest.clone(), record.attempt);
        if let Some(existing) = inner.index.get(&key) {
            return Ok(existing.clone());
        }
        if let Some(path) = &self.path {
            let err = |message: String| GatewayError::Cache {
                path: path.display().to_string(),
                message,
            };
            if inner.file.is_none() {
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| err(e.to_string()))?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| err(e.to_string()))?;
                inner.file = Some(f);
            }
            let mut line = serde_json::to_string(&record).map_err(|e| err(e.to_string()))?;
            line.push('\n');
            let file = inner.file.as_mut().expect("opened above");
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| err(e.to_string()))?;
        }
        inner.index.insert(key, record.clone());
        Ok(record)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock poisoned").index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total transport attempts per completion.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `n` (1-based): `base * 2^(n-1)`, capped.
    pub fn backoff(&self, n: u32) -> Duration {
        let factor = 2u32.saturating_pow(n.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(cap: usize) -> Self {
        Limiter {
            cap: cap.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut used = self.used.lock().expect("limiter lock poisoned");
        while *used >= self.cap {
            used = self.freed.wait(used).expect("limiter lock poisoned");
        }
        *used += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().expect("limiter lock poisoned");
        *used -= 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    mode: Mode,
    transport: Option<Box<dyn Transport>>,
    cache: CompletionCache,
    retry: RetryPolicy,
    limiter: Limiter,
}

impl Gateway {
    /// A replay gateway has no transport at all.
    pub fn replay(cache: CompletionCache) -> Self {
        Gateway {
            mode: Mode::Replay,
            transport: None,
            cache,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(1),
        }
    }

    pub fn new(mode: Mode, transport: Box<dyn Transport>, cache: CompletionCache) -> Self {
        Gateway {
            mode,
            transport: Some(transport),
            cache,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(4),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// At most `k` requests in flight.
    pub fn with_concurrency(mut self, k: usize) -> Self {
        self.limiter = Limiter::new(k);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn concurrency(&self) -> usize {
        self.limiter.cap
    }

    pub fn cache(&self) -> &CompletionCache {
        &self.cache
    }

    pub fn complete(
        &self,
        prompt: &PromptText,
        params: &CompletionParams,
        attempt: u32,
    ) -> Result<CompletionRecord, GatewayError> {
        let digest = digest(prompt, params);
        match self.mode {
            Mode::Replay => self
                .cache
                .get(&digest, attempt)
                .ok_or(GatewayError::CacheMiss { digest, attempt }),
            Mode::Record => {
                if let Some(hit) = self.cache.get(&digest, attempt) {
                    return Ok(hit);
                }
                let record = self.call(&prompt.text, params, digest, attempt)?;
                self.cache.insert(record)
            }
            Mode::Live => self.call(&prompt.text, params, digest, attempt),
        }
    }

    fn call(
        &self,
        prompt: &str,
        params: &CompletionParams,
        digest: String,
        attempt: u32,
    ) -> Result<CompletionRecord, GatewayError> {
        params.validate()?;
        let transport = self
            .transport
            .as_ref()
            .ok_or_else(|| GatewayError::InvalidParams("gateway has no transport".into()))?;
        let body = request_body(prompt, params);
        let mut tries = 0;
        loop {
            tries += 1;
            let result = {
                let _slot = self.limiter.acquire();
                transport.post(&body)
            };
            match result {
                Ok(resp) => {
                    let raw_text = parse_response(&resp)?;
                    return Ok(CompletionRecord {
                        prompt_digest: digest,
                        attempt,
                        raw_text,
                        transport_status: TransportStatus::Ok,
                        created_at: SystemTime::now()
                            .duration_since(UNIX_EPOCH)
                            .map(|d| d.as_secs())
                            .unwrap_or(0),
                    });
                }
                Err(e) if e.is_retryable() && tries < self.retry.max_attempts => {
                    let wait = e.retry_after().unwrap_or_else(|| self.retry.backoff(tries));
                    std::thread::sleep(wait.min(self.retry.max_delay));
                }
                Err(last) => {
                    return Err(GatewayError::Transport {
                        attempts: tries,
                        last,
                    })
                }
            }
        }
    }
}
