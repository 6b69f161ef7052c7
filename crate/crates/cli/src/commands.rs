//! Subcommand implementations. State lives in the workspace and in
//! `runs/<run>/`, so stages can be run one at a time or re-run against a
//! cassette with byte-identical outputs.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use induct_core::clustering::{cluster_aspects, cluster_iterative};
use induct_core::gateway::{Cassette, CassetteMode, ChatBackend, Gateway, HttpBackend, API_KEY_ENV};
use induct_core::grounding::ground_all;
use induct_core::judging::{judge_all, score_table, ScoreEntry};
use induct_core::ladder::{ladder_report, AgentPolicy, DirectiveAgent, Ladder, LadderConfig, LlmAgent, StoredFeedback};
use induct_core::metaeval::{evaluate_metric_set, Instance};
use induct_core::optimizer::{optimize, OptimizeHistory};
use induct_core::workspace::{RunDir, RunManifest, Workspace, OPTIMIZE_HISTORY, SCORES};
use induct_core::{Aspect, Error, MetricSet, QualityReport, Split};

use crate::config::{AgentKind, Config};
use crate::{Cli, Command, GlobalArgs, OptimizeArgs};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Resolved flags, config and workspace for one invocation.
pub struct Context {
    pub workspace: Workspace,
    pub run: RunDir,
    pub run_id: String,
    pub seed: u64,
    pub config: Config,
    pub mode: CassetteMode,
    pub cassette: PathBuf,
    backend: Option<Arc<dyn ChatBackend>>,
}

impl Context {
    /// `backend` replaces the HTTP endpoint when given.
    pub fn new(global: &GlobalArgs, backend: Option<Arc<dyn ChatBackend>>) -> Outcome<Self> {
        let mut config = match &global.config {
            Some(p) => Config::load(p).map_err(Failure::Usage)?,
            None => Config::default(),
        };
        let seed = global.seed.unwrap_or(config.optimizer.seed);
        config.optimizer.seed = seed;
        if let Some(p) = global.max_parallel {
            if p == 0 {
                return Err(Failure::Usage("--max-parallel must be at least 1".into()));
            }
            config.gateway.settings.max_parallel = p;
        }
        let mode = match global.cassette_mode {
            Some(m) => m,
            None => CassetteMode::from_env()
                .map_err(|e| Failure::Usage(e.to_string()))?
                .or(config.gateway.cassette_mode)
                .unwrap_or_default(),
        };
        let workspace = Workspace::open(&global.workspace)?;
        let run = workspace.run(&global.run).map_err(|e| Failure::Usage(e.to_string()))?;
        let cassette = global.cassette.clone().unwrap_or_else(|| run.cassette_path());
        Ok(Context {
            workspace,
            run,
            run_id: global.run.clone(),
            seed,
            config,
            mode,
            cassette,
            backend,
        })
    }

    pub fn gateway(&self) -> Outcome<Gateway> {
        let cassette = match self.mode {
            CassetteMode::Live => None,
            _ => Some(Arc::new(Cassette::open(&self.cassette)?)),
        };
        let backend: Option<Arc<dyn ChatBackend>> = match (self.mode, &self.backend) {
            (CassetteMode::Replay, _) => None,
            (_, Some(b)) => Some(b.clone()),
            (_, None) => {
                let http = match &self.config.gateway.base_url {
                    Some(url) => HttpBackend::new(url.clone(), std::env::var(API_KEY_ENV).ok()),
                    None => HttpBackend::from_env(),
                };
                Some(Arc::new(http.map_err(|e| Error::Config(e.to_string()))?))
            }
        };
        Ok(Gateway::with_mode(backend, cassette, self.mode, self.config.gateway.settings.clone())?)
    }

    fn save_manifest(&self, selected: Option<&str>) -> Outcome {
        let previous = if self.run.exists() { Some(self.run.manifest()?) } else { None };
        let manifest = RunManifest {
            run_id: self.run_id.clone(),
            seed: self.seed,
            config: serde_json::to_value(&self.config).map_err(Error::from)?,
            cassette: (self.mode != CassetteMode::Live).then(|| self.cassette.display().to_string()),
            selected_metric_set: selected
                .map(str::to_string)
                .or_else(|| previous.and_then(|m| m.selected_metric_set)),
        };
        Ok(self.run.write_manifest(&manifest)?)
    }

    /// Annotated instances in `split`, grounding feedback that has no stored
    /// aspects yet (or all of it when `reground`). Stored aspects are kept
    /// sorted by trajectory id.
    pub fn instances(&self, gw: &Gateway, split: Split, reground: bool) -> Outcome<Vec<Instance>> {
        let pairs = self.workspace.annotated_pairs(split)?;
        if pairs.is_empty() {
            return Err(Error::EmptyEvaluation(format!("no annotated trajectories in the {split:?} split")).into());
        }
        let stored = self.run.aspects()?;
        let have: HashSet<(&str, &str)> = stored
            .iter()
            .map(|a| (a.trajectory_id.as_str(), a.feedback_id.as_str()))
            .collect();
        let todo: Vec<(&induct_core::Trajectory, &induct_core::Feedback)> = pairs
            .iter()
            .filter(|(t, f)| reground || !have.contains(&(t.id.as_str(), f.id.as_str())))
            .map(|(t, f)| (t, f))
            .collect();
        let mut all: Vec<Aspect> = stored.clone();
        if !todo.is_empty() {
            let grounded = ground_all(gw, &todo)?;
            let replaced: HashSet<&str> = todo.iter().map(|(t, _)| t.id.as_str()).collect();
            all.retain(|a| !replaced.contains(a.trajectory_id.as_str()));
            all.extend(grounded.into_iter().flatten());
            all.sort_by(|a, b| a.trajectory_id.cmp(&b.trajectory_id));
            self.run.write_aspects(&all)?;
        }
        Ok(pairs
            .into_iter()
            .map(|(t, f)| {
                let aspects = all
                    .iter()
                    .filter(|a| a.trajectory_id == t.id && a.feedback_id == f.id)
                    .cloned()
                    .collect();
                Instance {
                    trajectory: t,
                    feedback: f,
                    aspects,
                }
            })
            .collect())
    }
}

pub fn execute(cli: &Cli) -> Outcome {
    execute_with(cli, None)
}

pub fn execute_with(cli: &Cli, backend: Option<Arc<dyn ChatBackend>>) -> Outcome {
    let mut ctx = Context::new(&cli.global, backend)?;
    match &cli.command {
        Command::Ingest { file } => ingest(&ctx, file),
        Command::Split { fraction } => {
            let s = ctx.workspace.split_holdout(*fraction, ctx.seed)?;
            println!("train {} / holdout {} (seed {})", s.train.len(), s.holdout.len(), s.seed);
            Ok(())
        }
        Command::Serve {
            host,
            port,
            static_dir,
            strict_guidance,
        } => {
            let mut cfg = ctx.config.server.clone();
            if let Some(h) = host {
                cfg.host = h.clone();
            }
            if let Some(p) = port {
                cfg.port = *p;
            }
            if let Some(d) = static_dir {
                cfg.static_dir = Some(d.clone());
            }
            cfg.strict_guidance |= strict_guidance;
            let root = ctx.workspace.root().to_path_buf();
            crate::server::serve(Workspace::open(root)?, &cfg).map_err(|e| Failure::Domain(e.into()))
        }
        Command::Ground { split } => {
            let gw = ctx.gateway()?;
            let instances = ctx.instances(&gw, (*split).into(), true)?;
            ctx.save_manifest(None)?;
            let n: usize = instances.iter().map(|i| i.aspects.len()).sum();
            println!("grounded {n} aspects from {} feedback", instances.len());
            Ok(())
        }
        Command::Cluster { n, split } => {
            let gw = ctx.gateway()?;
            let aspects = flat_aspects(&ctx.instances(&gw, (*split).into(), false)?);
            let ms = cluster_aspects(&gw, &aspects, *n, ctx.seed, &ctx.config.optimizer.clustering)?;
            ctx.run.write_metric_set(&ms)?;
            ctx.save_manifest(None)?;
            print_metric_set(&ms);
            Ok(())
        }
        Command::Judge { metric_set, split } => judge(&ctx, metric_set, (*split).into()),
        Command::Metaeval { metric_set, split } => metaeval(&ctx, metric_set, (*split).into()),
        Command::Optimize(args) => {
            apply_optimize_args(&mut ctx.config, args);
            run_optimize(&ctx)
        }
        Command::Iterate { metric_set, split } => {
            let gw = ctx.gateway()?;
            let parent = ctx.run.metric_set(metric_set)?;
            let aspects = flat_aspects(&ctx.instances(&gw, (*split).into(), false)?);
            let child = cluster_iterative(&gw, &aspects, &parent, ctx.seed, &ctx.config.optimizer.clustering)?;
            ctx.run.write_metric_set(&child)?;
            ctx.save_manifest(None)?;
            print_metric_set(&child);
            Ok(())
        }
        Command::Ladder {
            agent,
            stages,
            inner_iterations,
        } => {
            let l = &mut ctx.config.ladder;
            if let Some(a) = agent {
                l.agent = *a;
            }
            if let Some(s) = stages {
                l.stages = *s;
            }
            if let Some(i) = inner_iterations {
                l.inner_iterations = *i;
            }
            ladder(&ctx)
        }
        Command::Report { split, json } => report(&ctx, (*split).into(), *json),
    }
}

fn ingest(ctx: &Context, file: &std::path::Path) -> Outcome {
    let summary = ctx.workspace.import_trajectories(file)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    println!("imported {} trajectories", summary.count);
    Ok(())
}

fn flat_aspects(instances: &[Instance]) -> Vec<Aspect> {
    instances.iter().flat_map(|i| i.aspects.iter().cloned()).collect()
}

fn apply_optimize_args(config: &mut Config, args: &OptimizeArgs) {
    let o = &mut config.optimizer;
    if let Some(v) = args.n_min {
        o.n_min = v;
    }
    if let Some(v) = args.n_max {
        o.n_max = v;
    }
    if let Some(v) = args.sets_per_n {
        o.sets_per_n = v;
    }
    if let Some(v) = args.coverage_band {
        o.coverage_band = v;
    }
    if let Some(v) = args.max_rounds {
        o.max_rounds = v;
    }
}

fn judge(ctx: &Context, metric_set: &str, split: Split) -> Outcome {
    let gw = ctx.gateway()?;
    let ms = ctx.run.metric_set(metric_set)?;
    let trajectories = ctx.workspace.trajectories_in(split)?;
    if trajectories.is_empty() {
        return Err(Error::EmptyEvaluation(format!("no trajectories in the {split:?} split")).into());
    }
    let refs: Vec<&induct_core::Trajectory> = trajectories.iter().collect();
    let ratings: Vec<_> = judge_all(&gw, &refs, &ms)?.into_iter().flatten().collect();
    let scores = score_table(&ratings, &ms);
    ctx.run.write_ratings(&ratings)?;
    ctx.run.write_scores(&scores)?;
    ctx.save_manifest(None)?;
    print!("{}", score_lines(&ms, &scores));
    Ok(())
}

fn metaeval(ctx: &Context, metric_set: &str, split: Split) -> Outcome {
    let gw = ctx.gateway()?;
    let ms = ctx.run.metric_set(metric_set)?;
    let instances = ctx.instances(&gw, split, false)?;
    let eval = evaluate_metric_set(&gw, &ms, &instances, split)?;
    if split != Split::Holdout {
        ctx.run.write_ratings(&eval.ratings)?;
        ctx.run.write_scores(&score_table(&eval.ratings, &ms))?;
        ctx.run.write_matches(&eval.matches)?;
    }
    ctx.run.write_report(&eval.report)?;
    ctx.save_manifest(None)?;
    print!("{}", report_lines(&eval.report));
    Ok(())
}

fn run_optimize(ctx: &Context) -> Outcome {
    ctx.config
        .optimizer
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let gw = ctx.gateway()?;
    let train = ctx.instances(&gw, Split::Train, false)?;
    let out = optimize(&gw, &train, &ctx.config.optimizer)?;
    for ms in &out.candidates {
        ctx.run.write_metric_set(ms)?;
    }
    ctx.run.write_metric_set(&out.metric_set)?;
    ctx.run.write_ratings(&out.evaluation.ratings)?;
    ctx.run.write_scores(&score_table(&out.evaluation.ratings, &out.metric_set))?;
    ctx.run.write_matches(&out.evaluation.matches)?;
    ctx.run.write_report(out.report())?;
    ctx.run.write_optimize_history(&out.history)?;
    ctx.save_manifest(Some(&out.metric_set.id))?;
    print!("{}", history_lines(&out.history));
    print_metric_set(&out.metric_set);
    print!("{}", report_lines(out.report()));
    Ok(())
}

fn ladder(ctx: &Context) -> Outcome {
    let section = &ctx.config.ladder;
    let config = LadderConfig {
        stages: section.stages,
        trajectories_per_task: section.trajectories_per_task,
        inner_iterations: section.inner_iterations,
        seed: ctx.seed,
        runner: section.runner.clone(),
        optimizer: ctx.config.optimizer.clone(),
    };
    if section.agent == AgentKind::Llm && ctx.mode == CassetteMode::Live {
        eprintln!("warning: live mode does not reproduce earlier stages across runs; use --cassette-mode record");
    }
    let gw = ctx.gateway()?;
    let llm;
    let directive = DirectiveAgent;
    let policy: &dyn AgentPolicy = match section.agent {
        AgentKind::Directive => &directive,
        AgentKind::Llm => {
            llm = LlmAgent::new(gw.clone());
            &llm
        }
    };
    let feedback = StoredFeedback {
        feedback: ctx.workspace.feedback()?,
    };
    let ladder = Ladder {
        gateway: &gw,
        policy,
        feedback: &feedback,
        config,
    };
    let out = match ladder.run() {
        Ok(out) => out,
        Err(Error::StageInput { message, pending }) => {
            let added = ctx.workspace.add_missing_trajectories(&pending)?;
            eprintln!(
                "{} trajectories await annotation ({added} newly added to the workspace); \
                 annotate them, e.g. with `induct serve`, and run the ladder again",
                pending.len()
            );
            return Err(Error::StageInput { message, pending }.into());
        }
        Err(e) => return Err(e.into()),
    };
    for ms in &out.metric_sets {
        ctx.run.write_metric_set(ms)?;
    }
    let csv = ladder_report(&out.run.stages);
    ctx.run.write_ladder(&out.run, &csv)?;
    ctx.save_manifest(out.metric_sets.last().map(|m| m.id.as_str()))?;
    print!("{csv}");
    println!("final prompt:\n{}", out.final_prompt);
    Ok(())
}

fn report(ctx: &Context, split: Split, json: bool) -> Outcome {
    let name = if split == Split::Holdout { "holdout report" } else { "report" };
    let Some(report) = ctx.run.report(split)? else {
        return Err(Error::NotFound(format!("{name} for run {}", ctx.run_id)).into());
    };
    if json {
        let file = if split == Split::Holdout {
            induct_core::workspace::REPORT_HOLDOUT
        } else {
            induct_core::workspace::REPORT
        };
        let text = std::fs::read_to_string(ctx.run.file(file)).map_err(Error::from)?;
        print!("{text}");
        return Ok(());
    }
    let mut out = report_lines(&report);
    if let Ok(ms) = ctx.run.metric_set(&report.metric_set_id) {
        let scores = ctx.run.file(SCORES);
        if split != Split::Holdout && scores.exists() {
            let scores: std::collections::BTreeMap<String, ScoreEntry> = induct_core::io::read_json(&scores)?;
            out.push_str(&score_lines(&ms, &scores));
        }
    }
    let history = ctx.run.file(OPTIMIZE_HISTORY);
    if history.exists() {
        let h: OptimizeHistory = induct_core::io::read_json(&history)?;
        out.push_str(&history_lines(&h));
    }
    print!("{out}");
    Ok(())
}

fn print_metric_set(ms: &MetricSet) {
    println!("metric set {} ({} metrics)", ms.id, ms.metrics.len());
    for m in &ms.metrics {
        println!("  {:<28} {}", m.id, m.definition);
    }
}

pub fn report_lines(r: &QualityReport) -> String {
    let redundancy = r.redundancy.map(|f| f.render()).unwrap_or_else(|| "undefined".into());
    let c = &r.counts;
    format!(
        "metric set {} on {:?}\ncoverage   {} ({}/{} aspects)\nredundancy {} ({}/{} traits unmatched)\n",
        r.metric_set_id,
        r.split,
        r.coverage.render(),
        c.aspects_matched,
        c.aspects_total,
        redundancy,
        c.traits_unmatched,
        c.traits_total,
    )
}

fn score_lines(ms: &MetricSet, scores: &std::collections::BTreeMap<String, ScoreEntry>) -> String {
    let mut s = format!("{:<28} {:>7} {:>7} {:>5} {:>5} {:>5}\n", "metric", "score", "fail", "+1", "-1", "na");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for m in &ms.metrics {
        if let Some(e) = scores.get(&m.id) {
            let _ = writeln!(
                s,
                "{:<28} {:>7} {:>7} {:>5} {:>5} {:>5}",
                m.id,
                fmt(e.score),
                fmt(e.failure_rate),
                e.n_pos,
                e.n_neg,
                e.n_na
            );
        }
    }
    s
}

fn history_lines(h: &OptimizeHistory) -> String {
    let mut s = String::new();
    for r in &h.rounds {
        let picked = r.candidates.iter().find(|c| c.selected);
        let _ = writeln!(
            s,
            "round {}: N in [{}, {}], {} candidates, selected {}",
            r.round,
            r.n_range[0],
            r.n_range[1],
            r.candidates.len(),
            picked.map(|c| format!("N={} ({})", c.n, c.metric_set_id)).unwrap_or_else(|| "none".into()),
        );
    }
    let _ = writeln!(s, "stopped: {:?}, converged: {}", h.stop_reason, h.converged);
    s
}
