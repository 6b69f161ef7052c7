//! Shared domain types and their canonical JSON shapes.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fraction::Fraction;

/// One agent episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TrajectoryRepr")]
pub struct Trajectory {
    pub id: String,
    pub task: String,
    pub agent: String,
    pub source: String,
    pub steps: Vec<Step>,
    pub success: Option<bool>,
}

/// Step indices are implicit in the file format; they are assigned from
/// position when a trajectory is decoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(skip)]
    pub index: usize,
    pub observation: String,
    pub action: String,
}

#[derive(Deserialize)]
struct TrajectoryRepr {
    id: String,
    task: String,
    #[serde(default)]
    agent: String,
    #[serde(default)]
    source: String,
    steps: Vec<Step>,
    #[serde(default)]
    success: Option<bool>,
}

impl From<TrajectoryRepr> for Trajectory {
    fn from(r: TrajectoryRepr) -> Self {
        let steps = r
            .steps
            .into_iter()
            .enumerate()
            .map(|(index, s)| Step { index, ..s })
            .collect();
        Trajectory {
            id: r.id,
            task: r.task,
            agent: r.agent,
            source: r.source,
            steps,
            success: r.success,
        }
    }
}

impl Step {
    pub fn new(index: usize, observation: impl Into<String>, action: impl Into<String>) -> Self {
        Step {
            index,
            observation: observation.into(),
            action: action.into(),
        }
    }
}

impl Trajectory {
    /// Build a trajectory from (observation, action) pairs with dense indices.
    pub fn from_pairs<I, O, A>(id: &str, task: &str, pairs: I) -> Self
    where
        I: IntoIterator<Item = (O, A)>,
        O: Into<String>,
        A: Into<String>,
    {
        Trajectory {
            id: id.to_string(),
            task: task.to_string(),
            agent: String::new(),
            source: String::new(),
            steps: pairs
                .into_iter()
                .enumerate()
                .map(|(i, (o, a))| Step::new(i, o, a))
                .collect(),
            success: None,
        }
    }

    /// "Step k — OBSERVATION: ... ACTION: ..." lines, one per step.
    pub fn render_steps(&self) -> String {
        self.steps
            .iter()
            .map(|s| {
                format!(
                    "Step {} — OBSERVATION: {} ACTION: {}",
                    s.index, s.observation, s.action
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub id: String,
    pub trajectory_id: String,
    pub annotator: String,
    pub text: String,
    pub created_at: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sign::Positive => "positive",
            Sign::Negative => "negative",
        }
    }

    pub fn parse(s: &str) -> Option<Sign> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Some(Sign::Positive),
            "negative" => Some(Sign::Negative),
            _ => None,
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive, contiguous step range plus the text it refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorRef {
    pub step_start: usize,
    pub step_end: usize,
    pub excerpt: String,
}

/// A grounded unit of feedback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aspect {
    pub id: String,
    pub feedback_id: String,
    pub trajectory_id: String,
    pub sign: Sign,
    pub feedback_text: String,
    pub behavior: BehaviorRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metric {
    pub id: String,
    pub name: String,
    pub definition: String,
    #[serde(default)]
    pub good_examples: Vec<String>,
    #[serde(default)]
    pub bad_examples: Vec<String>,
}

impl Metric {
    pub fn example_count(&self) -> usize {
        self.good_examples.len() + self.bad_examples.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub seed: u64,
    pub candidate_index: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub examples_stripped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSet {
    pub id: String,
    pub parent_id: Option<String>,
    pub requested_n: usize,
    pub provenance: Provenance,
    pub metrics: Vec<Metric>,
}

impl MetricSet {
    pub fn metric(&self, id: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.id == id)
    }

    pub fn metric_ids(&self) -> Vec<&str> {
        self.metrics.iter().map(|m| m.id.as_str()).collect()
    }

    /// Content-derived id, stable across reruns.
    pub fn content_id(
        parent_id: Option<&str>,
        requested_n: usize,
        provenance: &Provenance,
        metrics: &[Metric],
    ) -> String {
        let body = serde_json::to_string(metrics).unwrap_or_default();
        let digest = crate::text::short_digest(&[
            parent_id.unwrap_or(""),
            &requested_n.to_string(),
            &provenance.seed.to_string(),
            &provenance.candidate_index.to_string(),
            &body,
        ]);
        format!("ms-{digest}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RatingValue {
    #[serde(rename = "+1")]
    PlusOne,
    #[serde(rename = "-1")]
    MinusOne,
    #[serde(rename = "na")]
    NotApplicable,
}

impl RatingValue {
    pub fn as_str(&self) -> &'static str {
        match self {
            RatingValue::PlusOne => "+1",
            RatingValue::MinusOne => "-1",
            RatingValue::NotApplicable => "na",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "+1" | "1" => Some(RatingValue::PlusOne),
            "-1" => Some(RatingValue::MinusOne),
            "na" | "n/a" => Some(RatingValue::NotApplicable),
            _ => None,
        }
    }

    pub fn polarity(&self) -> Option<Sign> {
        match self {
            RatingValue::PlusOne => Some(Sign::Positive),
            RatingValue::MinusOne => Some(Sign::Negative),
            RatingValue::NotApplicable => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub trajectory_id: String,
    pub metric_id: String,
    pub value: RatingValue,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trait {
    pub trajectory_id: String,
    pub metric_id: String,
    pub polarity: Sign,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceId {
    pub trajectory_id: String,
    pub feedback_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchPair {
    pub aspect_id: String,
    pub sign: Sign,
    #[serde(rename = "trait")]
    pub matched: Option<Trait>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub instance_id: InstanceId,
    pub pairs: Vec<MatchPair>,
    pub unmatched_traits: Vec<Trait>,
}

impl MatchRecord {
    pub fn aspects_matched(&self) -> usize {
        self.pairs.iter().filter(|p| p.matched.is_some()).count()
    }

    /// Distinct traits that at least one aspect points to.
    pub fn matched_traits(&self) -> Vec<&Trait> {
        let mut seen = HashSet::new();
        self.pairs
            .iter()
            .filter_map(|p| p.matched.as_ref())
            .filter(|t| seen.insert(t.metric_id.as_str()))
            .collect()
    }

    pub fn traits_total(&self) -> usize {
        self.matched_traits().len() + self.unmatched_traits.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
    All,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "holdout" => Some(Split::Holdout),
            "all" => Some(Split::All),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ReportCounts {
    pub aspects_total: u64,
    pub aspects_matched: u64,
    pub traits_total: u64,
    pub traits_unmatched: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub metric_set_id: String,
    pub split: Split,
    pub coverage: Fraction,
    /// `None` when no instance produced a trait.
    pub redundancy: Option<Fraction>,
    pub per_instance: Vec<MatchRecord>,
    pub counts: ReportCounts,
    /// Instances whose traits count toward redundancy although their feedback
    /// yielded no aspects.
    #[serde(default)]
    pub flagged_instances: Vec<InstanceId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationOutcome {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<Vec<String>> {
        if self.violations.is_empty() {
            Ok(self.warnings)
        } else {
            Err(Error::Validation(self.violations))
        }
    }
}

/// Check the per-trajectory invariants. Id uniqueness across a workspace is
/// enforced at import time.
pub fn validate_trajectory(t: &Trajectory) -> ValidationOutcome {
    let mut out = ValidationOutcome::default();
    if t.id.trim().is_empty() {
        out.violations.push(Violation::new("id", "id empty"));
    }
    if t.steps.is_empty() {
        out.violations.push(Violation::new("steps", "steps empty"));
    }
    for (pos, step) in t.steps.iter().enumerate() {
        if step.index != pos {
            out.violations.push(Violation::new(
                format!("steps[{pos}].index"),
                format!("index density: expected {pos}, found {}", step.index),
            ));
        }
    }
    out
}

/// One trait per ±1 rating, in input order. N/A ratings are dropped.
pub fn derive_traits(ratings: &[Rating]) -> Result<Vec<Trait>> {
    let mut seen = HashSet::new();
    let mut traits = Vec::new();
    for r in ratings {
        if !seen.insert((r.trajectory_id.as_str(), r.metric_id.as_str())) {
            return Err(Error::DuplicateRating {
                trajectory_id: r.trajectory_id.clone(),
                metric_id: r.metric_id.clone(),
            });
        }
        if let Some(polarity) = r.value.polarity() {
            traits.push(Trait {
                trajectory_id: r.trajectory_id.clone(),
                metric_id: r.metric_id.clone(),
                polarity,
            });
        }
    }
    Ok(traits)
}
