//! TOML run configuration with `[gateway]`, `[optimizer]`, `[ladder]` and
//! `[server]` sections. Every key is optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use induct_core::gateway::{CassetteMode, GatewayConfig};
use induct_core::ladder::AgentRunnerSpec;
use induct_core::optimizer::OptimizerConfig;

pub const DEFAULT_PORT: u16 = 8642;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gateway: GatewaySection,
    pub optimizer: OptimizerConfig,
    pub ladder: LadderSection,
    pub server: ServerConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySection {
    /// Overrides the base URL from the environment.
    pub base_url: Option<String>,
    pub cassette_mode: Option<CassetteMode>,
    #[serde(flatten)]
    pub settings: GatewayConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    /// Model-backed agent using the gateway's agent role.
    #[default]
    Llm,
    /// Offline rule-following agent that obeys directives in the prompt.
    Directive,
}

/// Ladder settings; stage one's metric search uses `[optimizer]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderSection {
    pub stages: usize,
    pub trajectories_per_task: usize,
    pub inner_iterations: usize,
    pub agent: AgentKind,
    pub runner: AgentRunnerSpec,
}

impl Default for LadderSection {
    fn default() -> Self {
        let d = induct_core::ladder::LadderConfig::default();
        LadderSection {
            stages: d.stages,
            trajectories_per_task: d.trajectories_per_task,
            inner_iterations: d.inner_iterations,
            agent: AgentKind::default(),
            runner: d.runner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    /// Built annotation UI; served at "/".
    pub static_dir: Option<PathBuf>,
    /// Reject generic feedback such as "The agent is good at solving the task".
    pub strict_guidance: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            host: "127.0.0.1".to_string(),
            port: DEFAULT_PORT,
            static_dir: None,
            strict_guidance: false,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Config, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Config::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
