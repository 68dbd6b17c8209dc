//! Blocking JSON-over-HTTP transport with bounded retries.

use std::time::Duration;

use serde_json::Value;

use super::BackendError;

/// Retries transport failures and 5xx responses only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): base * 2^(retry-1).
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1))
    }
}

#[derive(Debug, Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
    api_key: Option<String>,
    retry: RetryPolicy,
}

enum Attempt {
    Retryable(String),
    Fatal(BackendError),
}

impl HttpTransport {
    pub fn new(api_key: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        Self {
            agent: ureq::Agent::new_with_config(config),
            api_key,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn retry(&self) -> RetryPolicy {
        self.retry
    }

    /// POSTs `body` and parses the JSON reply.
    pub fn post_json(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        let mut last = String::new();
        for attempt in 1..=self.retry.attempts.max(1) {
            if attempt > 1 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            match self.attempt(url, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(detail)) => {
                    log::warn!("POST {url} attempt {attempt} failed: {detail}");
                    last = detail;
                }
            }
        }
        Err(BackendError::BackendUnavailable(format!(
            "POST {url} failed after {} attempts: {last}",
            self.retry.attempts.max(1)
        )))
    }

    fn attempt(&self, url: &str, body: &Value) -> Result<Value, Attempt> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retryable(format!("reading body: {e}")))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Attempt::Fatal(BackendError::ProtocolError(format!("reply is not JSON: {e}")))),
            500..=599 => Err(Attempt::Retryable(format!("HTTP {status}: {}", truncate(&text)))),
            _ => Err(Attempt::Fatal(BackendError::ProtocolError(format!(
                "HTTP {status}: {}",
                truncate(&text)
            )))),
        }
    }
}

fn truncate(s: &str) -> String {
    const MAX: usize = 200;
    if s.chars().count() <= MAX {
        s.to_string()
    } else {
        format!("{}...", s.chars().take(MAX).collect::<String>())
    }
}

/// Joins a base URL and a path without doubling slashes.
pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(1), Duration::from_millis(250));
        assert_eq!(p.delay(2), Duration::from_millis(500));
        assert_eq!(p.delay(3), Duration::from_millis(1000));
    }

    #[test]
    fn url_join() {
        assert_eq!(join_url("http://h:1/", "/v1/x"), "http://h:1/v1/x");
        assert_eq!(join_url("http://h:1", "v1/x"), "http://h:1/v1/x");
    }

    #[test]
    fn unreachable_is_unavailable() {
        let t = HttpTransport::new(None, Duration::from_secs(2)).with_retry(RetryPolicy {
            attempts: 2,
            base_delay: Duration::from_millis(1),
        });
        let port = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let err = t
            .post_json(&format!("http://127.0.0.1:{port}/v1/classify"), &serde_json::json!({}))
            .unwrap_err();
        assert!(matches!(err, BackendError::BackendUnavailable(_)), "{err:?}");
    }
}
