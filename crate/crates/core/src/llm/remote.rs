use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{LlmBackend, LlmRequest, TransportError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    /// Full URL of a chat-completion endpoint.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl RemoteConfig {
    /// Reads `LLM_ENDPOINT`, `LLM_MODEL` and `LLM_API_KEY`. Returns `None`
    /// when no endpoint is configured.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var("LLM_ENDPOINT").ok().filter(|s| !s.is_empty())?;
        Some(Self {
            endpoint,
            model: std::env::var("LLM_MODEL").unwrap_or_else(|_| "default".to_string()),
            api_key: std::env::var("LLM_API_KEY").ok().filter(|s| !s.is_empty()),
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
        })
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    used: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Chat-completion HTTP backend.
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    gate: Gate,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let cap = config.max_in_flight.max(1);
        Self {
            config,
            agent,
            gate: Gate {
                used: Mutex::new(0),
                freed: Condvar::new(),
                cap,
            },
        }
    }

    fn body(&self, req: &LlmRequest) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": req.rendered}],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        })
    }
}

/// Pulls the completion text out of either an OpenAI-style `choices` array
/// or a bare `content`/`text` field.
fn completion_text(v: &Value) -> Option<String> {
    if let Some(c) = v.pointer("/choices/0/message/content").and_then(Value::as_str) {
        return Some(c.to_string());
    }
    if let Some(c) = v.pointer("/choices/0/text").and_then(Value::as_str) {
        return Some(c.to_string());
    }
    if let Some(c) = v.pointer("/content/0/text").and_then(Value::as_str) {
        return Some(c.to_string());
    }
    v.get("content").or_else(|| v.get("text")).and_then(Value::as_str).map(str::to_string)
}

impl LlmBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn call(&self, req: &LlmRequest) -> Result<String, TransportError> {
        let _slot = self.gate.acquire();
        let mut builder = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            builder = builder.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = builder
            .send_json(self.body(req))
            .map_err(|e| TransportError::retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::retryable(e.to_string()))?;
        match status {
            200..=299 => {}
            408 | 429 | 500..=599 => return Err(TransportError::retryable(format!("http status {status}"))),
            _ => return Err(TransportError::fatal(format!("http status {status}: {text}"))),
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| TransportError::retryable(format!("response is not JSON: {e}")))?;
        completion_text(&v).ok_or_else(|| TransportError::retryable("response has no completion text".to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_completion_from_common_shapes() {
        let openai = json!({"choices": [{"message": {"role": "assistant", "content": "{\"leaf\": \"a\"}"}}]});
        assert_eq!(completion_text(&openai).unwrap(), "{\"leaf\": \"a\"}");
        let legacy = json!({"choices": [{"text": "hi"}]});
        assert_eq!(completion_text(&legacy).unwrap(), "hi");
        assert!(completion_text(&json!({"id": 1})).is_none());
    }
}
