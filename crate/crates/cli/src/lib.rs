//! `induct` command line: pipeline stages over a workspace and the
//! annotation server.
//!
//! Exit status is 0 on success, 1 on a domain error and 2 on a usage error
//! (bad flags, unreadable config).

use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use induct_core::gateway::{CassetteMode, ChatBackend};

pub mod commands;
pub mod config;
pub mod server;

use config::AgentKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "induct", version, about = "Induce, judge and meta-evaluate metrics for agent trajectories")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Workspace directory.
    #[arg(long, short = 'w', global = true, default_value = ".")]
    pub workspace: PathBuf,
    /// Seed for splitting, aspect shuffles and candidate generation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config with [gateway], [optimizer], [ladder] and [server] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model call mode; overrides AUTOLIBRA_CASSETTE_MODE and the config.
    #[arg(long, global = true, value_parser = parse_mode)]
    pub cassette_mode: Option<CassetteMode>,
    /// Cassette file; defaults to the run directory's cassette.jsonl.
    #[arg(long, global = true)]
    pub cassette: Option<PathBuf>,
    /// Run directory name under <workspace>/runs.
    #[arg(long, global = true, default_value = "default")]
    pub run: String,
    /// Concurrent model calls.
    #[arg(long, global = true)]
    pub max_parallel: Option<usize>,
}

fn parse_mode(s: &str) -> Result<CassetteMode, String> {
    s.parse().map_err(|e: induct_core::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Holdout,
    All,
}

impl From<SplitArg> for induct_core::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => induct_core::Split::Train,
            SplitArg::Holdout => induct_core::Split::Holdout,
            SplitArg::All => induct_core::Split::All,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Import trajectories from a JSONL file.
    Ingest { file: PathBuf },
    /// Assign trajectories to train and holdout.
    Split {
        #[arg(long, default_value_t = induct_core::workspace::DEFAULT_HOLDOUT_FRACTION)]
        fraction: f64,
    },
    /// Start the annotation server.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Reject generic feedback with 422.
        #[arg(long)]
        strict_guidance: bool,
    },
    /// Ground annotated feedback into aspects, replacing stored ones.
    Ground {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Cluster the run's aspects into exactly N metrics.
    Cluster {
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Rate trajectories against a metric set.
    Judge {
        #[arg(long)]
        metric_set: String,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Coverage and redundancy of a metric set against the feedback.
    Metaeval {
        #[arg(long)]
        metric_set: String,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Search metric-set sizes for the best coverage/redundancy trade-off.
    Optimize(OptimizeArgs),
    /// Extend a metric set with new aspects, keeping its definitions.
    Iterate {
        #[arg(long)]
        metric_set: String,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Run the prompt-improvement ladder on the key-door game.
    Ladder {
        #[arg(long, value_enum)]
        agent: Option<AgentKind>,
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        inner_iterations: Option<usize>,
    },
    /// Print a run's quality report and scores.
    Report {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Print report.json as stored.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub sets_per_n: Option<usize>,
    #[arg(long)]
    pub coverage_band: Option<f64>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
}

/// Parse `argv` (including the program name) and run; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, None)
}

/// [`run`] with `backend` standing in for the HTTP endpoint.
pub fn run_with<I, T>(argv: I, backend: Option<Arc<dyn ChatBackend>>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::execute_with(&cli, backend) {
        Ok(()) => EXIT_OK,
        Err(commands::Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(commands::Failure::Domain(e)) => {
            eprintln!("error: {e}");
            EXIT_DOMAIN
        }
    }
}
