//! Chat-completion access: role-based model settings, structured-output
//! enforcement, transport retries, bounded-parallel batching and
//! record/replay cassettes.

mod backend;
mod batch;
mod cassette;
mod request;
mod schema;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backend::{BackendError, ChatBackend, HttpBackend, ScriptedBackend, API_KEY_ENV, BASE_URL_ENV};
pub use batch::{parallel_map, parallel_map_results};
pub use cassette::{Cassette, CassetteEntry, CassetteMode, CASSETTE_MODE_ENV};
pub use request::{Message, ModelRequest, ModelResponse, Role, Usage};
pub use schema::{extract_json_object, field, OutputSchema, SchemaField, SchemaType};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSettings {
    pub model: String,
    pub temperature: f64,
}

impl RoleSettings {
    pub fn new(model: &str, temperature: f64) -> Self {
        RoleSettings {
            model: model.to_string(),
            temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Grounder,
    Clusterer,
    Judge,
    Matcher,
    /// Rewrites the agent prompt in the ladder loop.
    Improver,
    /// Acts in the toy environment when an LLM agent is used.
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleModels {
    pub grounder: RoleSettings,
    pub clusterer: RoleSettings,
    pub judge: RoleSettings,
    pub matcher: RoleSettings,
    pub improver: RoleSettings,
    pub agent: RoleSettings,
}

impl Default for RoleModels {
    fn default() -> Self {
        RoleModels {
            grounder: RoleSettings::new("gpt-4o", 0.0),
            clusterer: RoleSettings::new("o3-mini high", 1.0),
            judge: RoleSettings::new("o3-mini medium", 0.0),
            matcher: RoleSettings::new("gpt-4o", 0.0),
            improver: RoleSettings::new("gpt-4o", 0.0),
            agent: RoleSettings::new("gpt-4o", 0.0),
        }
    }
}

impl RoleModels {
    pub fn get(&self, role: ModelRole) -> &RoleSettings {
        match role {
            ModelRole::Grounder => &self.grounder,
            ModelRole::Clusterer => &self.clusterer,
            ModelRole::Judge => &self.judge,
            ModelRole::Matcher => &self.matcher,
            ModelRole::Improver => &self.improver,
            ModelRole::Agent => &self.agent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub roles: RoleModels,
    pub max_parallel: usize,
    pub transport_retries: u32,
    pub backoff_base_ms: u64,
    /// Total attempts for a schema-constrained reply, counting the first.
    pub structured_attempts: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            roles: RoleModels::default(),
            max_parallel: 4,
            transport_retries: 3,
            backoff_base_ms: 500,
            structured_attempts: 3,
        }
    }
}

/// Shareable model client. Cloning is cheap.
#[derive(Clone)]
pub struct Gateway {
    backend: Option<Arc<dyn ChatBackend>>,
    cassette: Option<Arc<Cassette>>,
    mode: CassetteMode,
    config: GatewayConfig,
}

impl Gateway {
    /// Live gateway over a backend, no cassette.
    pub fn new(backend: Arc<dyn ChatBackend>, config: GatewayConfig) -> Self {
        Gateway {
            backend: Some(backend),
            cassette: None,
            mode: CassetteMode::Live,
            config,
        }
    }

    /// Replay-only gateway; every request must hit the cassette.
    pub fn replay(cassette: Arc<Cassette>, config: GatewayConfig) -> Self {
        Gateway {
            backend: None,
            cassette: Some(cassette),
            mode: CassetteMode::Replay,
            config,
        }
    }

    /// Gateway with an optional backend and cassette in the given mode.
    pub fn with_mode(
        backend: Option<Arc<dyn ChatBackend>>,
        cassette: Option<Arc<Cassette>>,
        mode: CassetteMode,
        config: GatewayConfig,
    ) -> Result<Self> {
        match mode {
            CassetteMode::Replay | CassetteMode::Record if cassette.is_none() => {
                return Err(Error::Config(format!("{mode} mode needs a cassette")));
            }
            CassetteMode::Record | CassetteMode::Live if backend.is_none() => {
                return Err(Error::Config(format!("{mode} mode needs an endpoint")));
            }
            _ => {}
        }
        Ok(Gateway {
            backend,
            cassette,
            mode,
            config,
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn max_parallel(&self) -> usize {
        self.config.max_parallel.max(1)
    }

    /// Override the batching width, e.g. for single-threaded replays.
    pub fn with_max_parallel(mut self, max_parallel: usize) -> Self {
        self.config.max_parallel = max_parallel.max(1);
        self
    }

    /// Empty request carrying the role's model and temperature.
    pub fn request(&self, role: ModelRole) -> ModelRequest {
        let s = self.config.roles.get(role);
        ModelRequest::new(s.model.clone(), s.temperature)
    }

    /// Send a request. When it carries an output schema, a reply that does
    /// not parse is re-prompted with the parse error appended, up to
    /// `structured_attempts` attempts in total.
    pub fn complete(&self, req: &ModelRequest) -> Result<ModelResponse> {
        if req.messages.is_empty() {
            return Err(Error::InvalidArgument("request has no messages".into()));
        }
        let Some(schema) = req.output_schema.clone() else {
            return self.complete_raw(req);
        };
        let attempts = self.config.structured_attempts.max(1);
        let mut current = req.clone();
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            let mut resp = self.complete_raw(&current)?;
            match schema.parse(&resp.text) {
                Ok(v) => {
                    resp.structured = Some(v);
                    return Ok(resp);
                }
                Err(e) => {
                    tracing::debug!(attempt, error = %e, "structured reply rejected");
                    last_error = e.clone();
                    current = current.followup(
                        &resp.text,
                        format!(
                            "Your reply did not match the required JSON format: {e}. \
                             Reply again with only a JSON object of the required shape."
                        ),
                    );
                }
            }
        }
        Err(Error::StructuredOutput {
            attempts,
            last_error,
        })
    }

    /// Responses in input order; at most `max_parallel` requests in flight.
    pub fn complete_batch(&self, reqs: &[ModelRequest], max_parallel: usize) -> Result<Vec<ModelResponse>> {
        if max_parallel == 0 {
            return Err(Error::InvalidArgument("max_parallel must be at least 1".into()));
        }
        parallel_map(reqs, max_parallel, |_, r| self.complete(r))
    }

    fn complete_raw(&self, req: &ModelRequest) -> Result<ModelResponse> {
        match self.mode {
            CassetteMode::Replay => {
                let cassette = self.cassette.as_ref().ok_or_else(|| Error::Config("no cassette".into()))?;
                let digest = req.digest();
                cassette
                    .lookup_loaded(&digest)
                    .cloned()
                    .ok_or(Error::CassetteMiss { digest })
            }
            CassetteMode::Record => {
                let cassette = self.cassette.as_ref().ok_or_else(|| Error::Config("no cassette".into()))?;
                if let Some(hit) = cassette.lookup(&req.digest()) {
                    return Ok(hit);
                }
                let resp = self.send_with_retries(req)?;
                cassette.append(req, &resp)?;
                Ok(resp)
            }
            CassetteMode::Live => self.send_with_retries(req),
        }
    }

    fn send_with_retries(&self, req: &ModelRequest) -> Result<ModelResponse> {
        let backend = self
            .backend
            .as_ref()
            .ok_or_else(|| Error::Config("no model endpoint configured".into()))?;
        let mut retry = 0;
        loop {
            match backend.send(req) {
                Ok(mut r) => {
                    r.structured = None;
                    return Ok(r);
                }
                Err(e) if e.transient && retry < self.config.transport_retries => {
                    let base = self.config.backoff_base_ms.saturating_mul(1 << retry.min(16));
                    let jitter = if base > 0 {
                        rand::rng().random_range(0..=base / 2)
                    } else {
                        0
                    };
                    tracing::warn!(retry, error = %e, "transient model endpoint failure");
                    thread::sleep(Duration::from_millis(base + jitter));
                    retry += 1;
                }
                Err(e) => return Err(Error::Transport(e.message)),
            }
        }
    }
}
