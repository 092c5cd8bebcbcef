//! Blocking JSON-over-HTTP plumbing shared by the remote chat and embedding providers.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Exponential backoff schedule for transient failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `attempt` (1-based count of failures so far).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    /// Run `op` until it succeeds, returns a non-retryable error, or attempts run out.
    pub fn run<T, E>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, E>,
        is_retryable: impl Fn(&E) -> Option<Option<Duration>>,
    ) -> Result<T, (E, u32)> {
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) => match is_retryable(&e) {
                    Some(hint) if attempt < self.max_attempts.max(1) => {
                        let wait = match hint {
                            Some(h) => h.min(Duration::from_millis(self.max_delay_ms)),
                            None => self.delay(attempt),
                        };
                        tracing::warn!(attempt, ?wait, "transient provider failure, retrying");
                        if !wait.is_zero() {
                            thread::sleep(wait);
                        }
                        attempt += 1;
                    }
                    _ => return Err((e, attempt)),
                },
            }
        }
    }
}

/// Raw outcome of one HTTP exchange.
#[derive(Debug)]
pub(crate) struct HttpReply {
    pub status: u16,
    pub body: String,
    pub retry_after: Option<Duration>,
}

pub(crate) fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(timeout))
        .build()
        .into()
}

/// POST a JSON body. `Err` carries a transport-level message (connection refused,
/// timeout, malformed HTTP); HTTP error statuses come back as `Ok`.
pub(crate) fn post_json<B: Serialize>(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &B,
) -> Result<HttpReply, String> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let payload = serde_json::to_string(body).map_err(|e| e.to_string())?;
    let mut resp = req.send(payload.as_bytes()).map_err(|e| e.to_string())?;
    let status = resp.status().as_u16();
    let retry_after = resp
        .headers()
        .get("retry-after")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(Duration::from_secs);
    let body = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| e.to_string())?;
    Ok(HttpReply {
        status,
        body,
        retry_after,
    })
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

pub(crate) fn is_transient_status(status: u16) -> bool {
    status == 408 || status == 409 || status == 429 || status >= 500
}
