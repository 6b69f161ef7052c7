use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::request::{ModelRequest, ModelResponse, Usage};

pub const BASE_URL_ENV: &str = "AUTOLIBRA_LLM_BASE_URL";
pub const API_KEY_ENV: &str = "AUTOLIBRA_LLM_API_KEY";

#[derive(Debug, Clone)]
pub struct BackendError {
    /// Transient failures (timeouts, 429, 5xx) are retried.
    pub transient: bool,
    pub message: String,
}

impl BackendError {
    pub fn transient(message: impl Into<String>) -> Self {
        BackendError {
            transient: true,
            message: message.into(),
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        BackendError {
            transient: false,
            message: message.into(),
        }
    }
}

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// A chat-completion transport.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError>;
}

/// OpenAI-compatible `/chat/completions` client.
///
/// A model string of the form `"o3-mini high"` is sent as model `o3-mini`
/// with `reasoning_effort: "high"` and no temperature.
pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| BackendError::fatal(e.to_string()))?;
        Ok(HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            client,
        })
    }

    /// Reads the base URL and key from the environment, falling back to the
    /// public OpenAI endpoint.
    pub fn from_env() -> Result<Self, BackendError> {
        let base = std::env::var(BASE_URL_ENV)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .unwrap_or_else(|| "https://api.openai.com/v1".to_string());
        let key = std::env::var(API_KEY_ENV).ok().filter(|s| !s.is_empty());
        HttpBackend::new(base, key)
    }

    pub fn request_body(request: &ModelRequest) -> Value {
        let mut parts = request.model_name.split_whitespace();
        let model = parts.next().unwrap_or_default();
        let effort = parts.next();
        let mut body = json!({
            "model": model,
            "messages": request.messages,
        });
        match effort {
            Some(e) => body["reasoning_effort"] = json!(e),
            None => body["temperature"] = json!(request.temperature),
        }
        if let Some(seed) = request.seed_hint {
            body["seed"] = json!(seed);
        }
        if let Some(schema) = &request.output_schema {
            body["response_format"] = json!({
                "type": "json_schema",
                "json_schema": {
                    "name": schema.name,
                    "schema": schema.to_json_schema(),
                    "strict": true,
                }
            });
        }
        body
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let mut builder = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(&Self::request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::transient(e.to_string())
            } else {
                BackendError::fatal(e.to_string())
            }
        })?;
        let status = resp.status();
        let body: Value = resp
            .json()
            .map_err(|e| BackendError::transient(format!("unreadable body: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::transient(format!("{status}: {body}")));
        }
        if !status.is_success() {
            return Err(BackendError::fatal(format!("{status}: {body}")));
        }
        let text = body["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::fatal(format!("no message content in {body}")))?
            .to_string();
        let usage = Usage {
            prompt_tokens: body["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: body["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        let mut provider_meta = BTreeMap::new();
        for key in ["id", "model"] {
            if let Some(v) = body.get(key) {
                provider_meta.insert(key.to_string(), v.clone());
            }
        }
        if let Some(v) = body["choices"][0].get("finish_reason") {
            provider_meta.insert("finish_reason".to_string(), v.clone());
        }
        Ok(ModelResponse {
            text,
            structured: None,
            usage,
            provider_meta,
        })
    }
}

type Script = dyn Fn(&ModelRequest) -> Result<String, BackendError> + Send + Sync;

/// Backend driven by a closure over the request; used for offline runs,
/// fixtures and recording cassettes without a network.
#[derive(Clone)]
pub struct ScriptedBackend {
    script: Arc<Script>,
    calls: Arc<AtomicUsize>,
}

impl ScriptedBackend {
    pub fn new<F>(script: F) -> Self
    where
        F: Fn(&ModelRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        ScriptedBackend {
            script: Arc::new(script),
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.script)(request).map(ModelResponse::text)
    }
}
