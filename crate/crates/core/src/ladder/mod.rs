//! Stage-wise agent improvement. Each stage collects feedback on fresh
//! trajectories, induces (or extends) a metric set, then repeatedly runs the
//! agent on the training tasks, judges the runs and rewrites the prompt.

pub mod agent;
pub mod keydoor;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::clustering::cluster_iterative;
use crate::error::{Error, Result};
use crate::fraction::Fraction;
use crate::gateway::{field, parallel_map, Gateway, ModelRole, OutputSchema, SchemaType};
use crate::grounding::ground_all;
use crate::judging::{judge_all, mean_metric_score, metric_score};
use crate::metaeval::Instance;
use crate::model::{Feedback, MetricSet, Rating, Trajectory};
use crate::optimizer::{candidate_seed, optimize, OptimizerConfig};
use crate::text::{short_digest, tagged};

pub use agent::{run_episode, AgentPolicy, DirectiveAgent, Directives, LlmAgent};
pub use keydoor::{catalogue, default_full_tasks, default_train_tasks, Action, KeyDoor, Task};

pub const INITIAL_PROMPT: &str = "You are playing a key-door grid game. Reach the goal.";

/// Environment, task split, step cap and the starting prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentRunnerSpec {
    pub environment: String,
    pub train_tasks: Vec<String>,
    pub full_tasks: Vec<String>,
    pub step_cap: usize,
    pub prompt: String,
}

impl Default for AgentRunnerSpec {
    fn default() -> Self {
        AgentRunnerSpec {
            environment: "keydoor".to_string(),
            train_tasks: default_train_tasks(),
            full_tasks: default_full_tasks(),
            step_cap: 30,
            prompt: INITIAL_PROMPT.to_string(),
        }
    }
}

impl AgentRunnerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.environment != "keydoor" {
            return Err(Error::InvalidArgument(format!("unknown environment {}", self.environment)));
        }
        if self.step_cap < 1 {
            return Err(Error::InvalidArgument("step cap must be at least 1".into()));
        }
        if self.train_tasks.is_empty() {
            return Err(Error::InvalidArgument("no training tasks".into()));
        }
        for t in &self.train_tasks {
            if !self.full_tasks.contains(t) {
                return Err(Error::InvalidArgument(format!("train task {t} is not in the full task set")));
            }
        }
        for t in &self.full_tasks {
            keydoor::task(t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderConfig {
    pub stages: usize,
    pub trajectories_per_task: usize,
    pub inner_iterations: usize,
    pub seed: u64,
    pub runner: AgentRunnerSpec,
    /// Stage-one metric search.
    pub optimizer: OptimizerConfig,
}

impl Default for LadderConfig {
    fn default() -> Self {
        LadderConfig {
            stages: 3,
            trajectories_per_task: 3,
            inner_iterations: 4,
            seed: 0,
            runner: AgentRunnerSpec::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub prompt_digest: String,
    pub metric_scores: BTreeMap<String, Option<Fraction>>,
    pub mean_score: Fraction,
    pub success_rate: Fraction,
    pub running_max_mean: Fraction,
    pub cumulative_avg_mean: Fraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub metric_set_id: String,
    pub annotations: usize,
    pub iterations: Vec<IterationRecord>,
    /// Prompt carried into the next stage.
    pub best_prompt_digest: String,
}

/// Everything persisted to `ladder_run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRun {
    pub stages: Vec<StageRecord>,
    /// Prompt digest → prompt text.
    pub prompts: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct LadderOutcome {
    pub run: LadderRun,
    /// One metric set per stage, in stage order.
    pub metric_sets: Vec<MetricSet>,
    pub final_prompt: String,
}

/// Supplies human feedback for sampled trajectories. Trajectories left
/// without feedback stop the stage with [`Error::StageInput`].
pub trait FeedbackSource: Send + Sync {
    fn collect(&self, stage: usize, trajectories: &[Trajectory]) -> Result<Vec<Feedback>>;
}

impl<F> FeedbackSource for F
where
    F: Fn(usize, &[Trajectory]) -> Result<Vec<Feedback>> + Send + Sync,
{
    fn collect(&self, stage: usize, trajectories: &[Trajectory]) -> Result<Vec<Feedback>> {
        self(stage, trajectories)
    }
}

/// Feedback already on file, looked up by trajectory id.
pub struct StoredFeedback {
    pub feedback: Vec<Feedback>,
}

impl FeedbackSource for StoredFeedback {
    fn collect(&self, _stage: usize, trajectories: &[Trajectory]) -> Result<Vec<Feedback>> {
        Ok(trajectories
            .iter()
            .filter_map(|t| self.feedback.iter().rev().find(|f| f.trajectory_id == t.id).cloned())
            .collect())
    }
}

pub fn prompt_digest(prompt: &str) -> String {
    short_digest(&[prompt])
}

pub const IMPROVE_INSTRUCTIONS: &str = "You improve the system prompt of an AI agent that plays a game. \
You receive the current prompt and, for each training task, one trajectory of the agent together with \
its ratings on evaluation metrics (+1 good, -1 bad, na not applicable) and the judge's rationale. \
Rewrite the prompt so the agent scores higher on the metrics. Return the complete new prompt.";

/// Trajectories with their ratings, as shown to the improver.
pub type Evidence = Vec<(Trajectory, Vec<Rating>)>;

/// Ask the improver for a revised prompt. An empty reply keeps `current`.
pub fn improve_prompt(
    gw: &Gateway,
    current: &str,
    evidence: &[(Trajectory, Vec<Rating>)],
    ms: &MetricSet,
) -> Result<String> {
    let evals: Vec<_> = evidence
        .iter()
        .map(|(t, ratings)| {
            let r: Vec<_> = ratings
                .iter()
                .map(|r| {
                    let m = ms.metric(&r.metric_id);
                    json!({
                        "metric_id": r.metric_id,
                        "definition": m.map(|m| m.definition.as_str()).unwrap_or(""),
                        "value": r.value.as_str(),
                        "rationale": r.rationale,
                    })
                })
                .collect();
            json!({"task": t.task, "trajectory": t.render_steps(), "ratings": r})
        })
        .collect();
    let req = gw
        .request(ModelRole::Improver)
        .system(IMPROVE_INSTRUCTIONS)
        .user(format!(
            "{}\n\n{}",
            tagged("current_prompt", current),
            tagged("evaluations", &serde_json::to_string_pretty(&evals).unwrap_or_default())
        ))
        .schema(OutputSchema::new("prompt", vec![field("prompt", SchemaType::String)]));
    let resp = gw.complete(&req)?;
    let new = resp
        .structured
        .as_ref()
        .and_then(|v| v["prompt"].as_str())
        .unwrap_or("")
        .trim()
        .to_string();
    if new.is_empty() {
        tracing::warn!("improver returned an empty prompt; keeping the current one");
        return Ok(current.to_string());
    }
    Ok(new)
}

/// Episodes for `task_ids`, run concurrently, in input order.
fn run_tasks(
    gw: &Gateway,
    policy: &dyn AgentPolicy,
    prompt: &str,
    task_ids: &[(String, String)],
    step_cap: usize,
) -> Result<Vec<Trajectory>> {
    parallel_map(task_ids, gw.max_parallel(), |_, (task_id, traj_id)| {
        let task = keydoor::task(task_id)?;
        run_episode(&task, policy, prompt, step_cap, traj_id)
    })
    .map_err(|e| match e {
        Error::Batch { source, .. } => *source,
        other => other,
    })
}

/// Run-wide statistics over the sequence of per-iteration mean scores.
#[derive(Debug, Default)]
struct Stats {
    means: Vec<Fraction>,
}

impl Stats {
    fn push(&mut self, mean: Fraction) -> (Fraction, Fraction) {
        self.means.push(mean);
        let max = *self
            .means
            .iter()
            .max_by(|a, b| a.cmp_value(b))
            .expect("just pushed");
        let avg = Fraction::mean(&self.means).expect("non-empty");
        (max, avg)
    }
}

pub struct Ladder<'a> {
    pub gateway: &'a Gateway,
    pub policy: &'a dyn AgentPolicy,
    pub feedback: &'a dyn FeedbackSource,
    pub config: LadderConfig,
}

impl Ladder<'_> {
    /// Trajectories shown to annotators before `stage`.
    pub fn sample_for_annotation(&self, stage: usize, prompt: &str) -> Result<Vec<Trajectory>> {
        let runner = &self.config.runner;
        let jobs: Vec<(String, String)> = runner
            .train_tasks
            .iter()
            .flat_map(|t| {
                (0..self.config.trajectories_per_task).map(move |k| (t.clone(), format!("ladder-s{stage}-{t}-{k}")))
            })
            .collect();
        run_tasks(self.gateway, self.policy, prompt, &jobs, runner.step_cap)
    }

    pub fn run(&self) -> Result<LadderOutcome> {
        self.config.runner.validate()?;
        if self.config.stages < 1 || self.config.inner_iterations < 1 {
            return Err(Error::InvalidArgument("need at least one stage and one iteration".into()));
        }
        let mut prompts = BTreeMap::new();
        let mut prompt = self.config.runner.prompt.clone();
        prompts.insert(prompt_digest(&prompt), prompt.clone());
        let mut stats = Stats::default();
        let mut stages = Vec::new();
        let mut metric_sets: Vec<MetricSet> = Vec::new();

        for stage in 1..=self.config.stages {
            let (record, ms, best) =
                self.run_stage(stage, &prompt, metric_sets.last(), &mut stats, &mut prompts)?;
            stages.push(record);
            metric_sets.push(ms);
            prompt = best;
        }
        Ok(LadderOutcome {
            run: LadderRun { stages, prompts },
            metric_sets,
            final_prompt: prompt,
        })
    }

    fn induce(&self, stage: usize, instances: &[Instance], previous: Option<&MetricSet>) -> Result<MetricSet> {
        match previous {
            None => Ok(optimize(self.gateway, instances, &self.config.optimizer)?.metric_set),
            Some(prev) => {
                let aspects: Vec<_> = instances.iter().flat_map(|i| i.aspects.iter().cloned()).collect();
                let seed = candidate_seed(self.config.seed, stage, prev.metrics.len(), 0);
                cluster_iterative(self.gateway, &aspects, prev, seed, &self.config.optimizer.clustering)
            }
        }
    }

    fn run_stage(
        &self,
        stage: usize,
        start_prompt: &str,
        previous: Option<&MetricSet>,
        stats: &mut Stats,
        prompts: &mut BTreeMap<String, String>,
    ) -> Result<(StageRecord, MetricSet, String)> {
        let gw = self.gateway;
        let runner = &self.config.runner;

        let sampled = self.sample_for_annotation(stage, start_prompt)?;
        let feedback = self.feedback.collect(stage, &sampled)?;
        let by_traj: HashMap<&str, &Feedback> = feedback.iter().map(|f| (f.trajectory_id.as_str(), f)).collect();
        let pending: Vec<Trajectory> = sampled
            .iter()
            .filter(|t| !by_traj.contains_key(t.id.as_str()))
            .cloned()
            .collect();
        if !pending.is_empty() {
            return Err(Error::StageInput {
                message: format!(
                    "stage {stage}: {} of {} sampled trajectories have no feedback",
                    pending.len(),
                    sampled.len()
                ),
                pending,
            });
        }
        let pairs: Vec<(&Trajectory, &Feedback)> = sampled.iter().map(|t| (t, by_traj[t.id.as_str()])).collect();
        let aspects = ground_all(gw, &pairs)?;
        let instances: Vec<Instance> = pairs
            .iter()
            .zip(aspects)
            .map(|((t, f), aspects)| Instance {
                trajectory: (*t).clone(),
                feedback: (*f).clone(),
                aspects,
            })
            .collect();
        let ms = self.induce(stage, &instances, previous)?;
        tracing::info!(stage, metric_set = %ms.id, metrics = ms.metrics.len(), "stage metric set");

        let mut prompt = start_prompt.to_string();
        let mut best: Option<(Fraction, String, Evidence)> = None;
        let mut iterations = Vec::new();
        for iteration in 1..=self.config.inner_iterations {
            prompts.insert(prompt_digest(&prompt), prompt.clone());
            let jobs: Vec<(String, String)> = runner
                .full_tasks
                .iter()
                .map(|t| (t.clone(), format!("ladder-s{stage}-i{iteration}-{t}")))
                .collect();
            let runs = run_tasks(gw, self.policy, &prompt, &jobs, runner.step_cap)?;
            let successes = runs.iter().filter(|t| t.success == Some(true)).count() as u64;
            let success_rate = Fraction::new(successes, runs.len() as u64).expect("full task set is non-empty");

            let train: Vec<&Trajectory> = runs
                .iter()
                .zip(&runner.full_tasks)
                .filter(|(_, id)| runner.train_tasks.contains(id))
                .map(|(t, _)| t)
                .collect();
            let ratings = judge_all(gw, &train, &ms)?;
            let flat: Vec<Rating> = ratings.iter().flatten().cloned().collect();
            let mean = mean_metric_score(&flat, &ms);
            let (running_max, cumulative_avg) = stats.push(mean);
            iterations.push(IterationRecord {
                iteration,
                prompt_digest: prompt_digest(&prompt),
                metric_scores: ms
                    .metrics
                    .iter()
                    .map(|m| (m.id.clone(), metric_score(&flat, &m.id)))
                    .collect(),
                mean_score: mean,
                success_rate,
                running_max_mean: running_max,
                cumulative_avg_mean: cumulative_avg,
            });
            tracing::info!(stage, iteration, mean = %mean.render(), success = %success_rate.render(), "ladder iteration");

            if best.as_ref().is_none_or(|(m, _, _)| mean.cmp_value(m).is_gt()) {
                let evidence = train.iter().map(|t| (*t).clone()).zip(ratings).collect();
                best = Some((mean, prompt.clone(), evidence));
            }
            if iteration < self.config.inner_iterations {
                let (_, best_prompt, evidence) = best.as_ref().expect("set above");
                prompt = improve_prompt(gw, best_prompt, evidence, &ms)?;
            }
        }
        let (_, best_prompt, _) = best.expect("at least one iteration");
        prompts.insert(prompt_digest(&best_prompt), best_prompt.clone());
        let record = StageRecord {
            stage,
            metric_set_id: ms.id.clone(),
            annotations: feedback.len(),
            iterations,
            best_prompt_digest: prompt_digest(&best_prompt),
        };
        Ok((record, ms, best_prompt))
    }
}

pub const LADDER_CSV_HEADER: &str = "stage,iteration,mean_score,running_max,cumulative_avg,success_rate";

/// Per-iteration table, one row per (stage, iteration), values at four
/// decimal places.
pub fn ladder_report(stages: &[StageRecord]) -> String {
    let mut out = String::from(LADDER_CSV_HEADER);
    out.push('\n');
    for s in stages {
        for it in &s.iterations {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.stage,
                it.iteration,
                it.mean_score.render(),
                it.running_max_mean.render(),
                it.cumulative_avg_mean.render(),
                it.success_rate.render()
            );
        }
    }
    out
}
