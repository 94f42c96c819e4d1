//! Blocking JSON-over-HTTP client shared by the remote embedding and chat
//! providers.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default = "default_timeout", with = "millis")]
    pub timeout: Duration,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrent: usize,
}

fn default_timeout() -> Duration {
    crate::embedding::DEFAULT_TIMEOUT
}

fn default_retries() -> u32 {
    2
}

fn default_concurrency() -> usize {
    4
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Counting semaphore capping in-flight requests.
struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpClient {
    config: RemoteConfig,
    agent: ureq::Agent,
    gate: Gate,
}

impl HttpClient {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        if config.endpoint.trim().is_empty() {
            return Err(Error::invalid("remote endpoint is empty"));
        }
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        let cap = config.max_concurrent.max(1);
        Ok(HttpClient {
            config,
            agent,
            gate: Gate {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                cap,
            },
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// POSTs `body`, retrying transport failures, 429 and 5xx with
    /// exponential backoff starting at 100 ms.
    pub fn post_json(&self, body: &serde_json::Value) -> Result<serde_json::Value> {
        let _slot = self.gate.acquire();
        let max_attempts = self.config.retries + 1;
        let mut backoff = Duration::from_millis(100);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut req = self
                .agent
                .post(&self.config.endpoint)
                .set("Content-Type", "application/json");
            if let Some(token) = &self.config.token {
                req = req.set("Authorization", &format!("Bearer {token}"));
            }
            let (message, retryable) = match req.send_json(body.clone()) {
                Ok(resp) => {
                    return resp.into_json::<serde_json::Value>().map_err(|e| {
                        Error::Parse(format!("response from {}: {e}", self.config.endpoint))
                    })
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    (
                        format!("HTTP {code}: {}", text.chars().take(200).collect::<String>()),
                        code == 429 || code >= 500,
                    )
                }
                Err(ureq::Error::Transport(t)) => (t.to_string(), true),
            };
            if !retryable || attempt >= max_attempts {
                return Err(Error::Provider {
                    provider: self.config.endpoint.clone(),
                    message,
                    retryable,
                    attempts: attempt,
                });
            }
            tracing::warn!(endpoint = %self.config.endpoint, attempt, %message, "retrying provider call");
            std::thread::sleep(backoff);
            backoff *= 2;
        }
    }
}
