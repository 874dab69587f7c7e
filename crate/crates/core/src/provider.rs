//! HTTP plumbing shared by the remote embedding and completion providers.

use std::sync::OnceLock;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable consulted for the provider bearer token when the
/// config does not name another one.
pub const DEFAULT_API_KEY_ENV: &str = "PERSONA_ECO_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSettings {
    /// Full URL requests are POSTed to.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 60,
            max_retries: 3,
            backoff_ms: 250,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("provider returned HTTP {status} after {attempts} attempt(s): {body}")]
    Status {
        status: u16,
        body: String,
        attempts: u32,
    },
    #[error("unexpected provider response: {0}")]
    InvalidResponse(String),
    #[error("{0}")]
    Other(String),
}

impl ProviderError {
    /// Transport failures, throttling and server errors may succeed on retry.
    pub fn is_retriable(&self) -> bool {
        match self {
            ProviderError::Transport { .. } => true,
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlightGate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlightGate {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightPermit<'_> {
        let mut active = self.active.lock();
        while *active >= self.limit {
            self.freed.wait(&mut active);
        }
        *active += 1;
        InFlightPermit { gate: self }
    }
}

struct InFlightPermit<'a> {
    gate: &'a InFlightGate,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.gate.active.lock() -= 1;
        self.gate.freed.notify_one();
    }
}

#[derive(Debug)]
pub(crate) struct JsonClient {
    settings: HttpSettings,
    api_key: Option<String>,
    gate: InFlightGate,
    // Built lazily so that constructing a provider inside an async runtime is safe.
    client: OnceLock<reqwest::blocking::Client>,
}

impl JsonClient {
    pub(crate) fn new(settings: HttpSettings) -> Self {
        let api_key = std::env::var(&settings.api_key_env).ok().filter(|k| !k.is_empty());
        Self {
            gate: InFlightGate::new(settings.max_in_flight),
            settings,
            api_key,
            client: OnceLock::new(),
        }
    }

    pub(crate) fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(self.settings.timeout_secs))
                .build()
                .expect("HTTP client configuration is static")
        })
    }

    /// POSTs `body` and returns the decoded JSON reply, retrying retriable
    /// failures with exponential backoff.
    pub(crate) fn post(&self, body: &Value) -> Result<Value, ProviderError> {
        let _permit = self.gate.acquire();
        let attempts_allowed = self.settings.max_retries.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.post_once(body, attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retriable() && attempt < attempts_allowed => {
                    let delay = self.settings.backoff_ms.saturating_mul(1 << (attempt - 1));
                    tracing::warn!(attempt, delay_ms = delay, error = %e, "retrying provider request");
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn post_once(&self, body: &Value, attempts: u32) -> Result<Value, ProviderError> {
        let mut request = self.client().post(&self.settings.endpoint).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| ProviderError::Transport {
            message: e.to_string(),
            attempts,
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| ProviderError::Transport {
            message: e.to_string(),
            attempts,
        })?;
        if !status.is_success() {
            return Err(ProviderError::Status {
                status: status.as_u16(),
                body: text,
                attempts,
            });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::InvalidResponse(e.to_string()))
    }
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub(crate) fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &byte in *part {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(&[b""]), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(&[b"a"]), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(&[b"foo", b"bar"]), fnv1a64(&[b"foobar"]));
    }

    #[test]
    fn retriable_classification() {
        let s = |status| ProviderError::Status {
            status,
            body: String::new(),
            attempts: 1,
        };
        assert!(s(503).is_retriable());
        assert!(s(429).is_retriable());
        assert!(!s(401).is_retriable());
        assert!(!ProviderError::InvalidResponse("x".into()).is_retriable());
    }
}
