//! Model-based judging of trajectories against a metric set, and the score
//! aggregates derived from the ratings.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::fraction::Fraction;
use crate::gateway::{field, parallel_map, Gateway, ModelRequest, ModelRole, OutputSchema, SchemaType};
use crate::model::{MetricSet, Rating, RatingValue, Trajectory};
use crate::text::tagged;

pub const JUDGE_INSTRUCTIONS: &str = "You evaluate an AI agent's trajectory against a list of metrics. \
For every metric, rate the trajectory \"+1\" if the agent shows the positive behavior the metric \
defines, \"-1\" if it shows the opposite, negative behavior, or \"na\" if the metric does not apply \
to this trajectory. Use the good and bad examples to calibrate. Give a short rationale for every rating, \
and rate every metric exactly once.";

pub fn judge_schema(ms: &MetricSet) -> OutputSchema {
    OutputSchema::new(
        "ratings",
        vec![field(
            "ratings",
            SchemaType::array(SchemaType::object(vec![
                field("metric_id", SchemaType::enumeration(&ms.metric_ids())),
                field("value", SchemaType::enumeration(&["+1", "-1", "na"])),
                field("rationale", SchemaType::String),
            ])),
        )],
    )
}

/// The success flag is deliberately not shown to the judge.
pub fn judge_request(gw: &Gateway, t: &Trajectory, ms: &MetricSet) -> ModelRequest {
    let metrics: Vec<_> = ms
        .metrics
        .iter()
        .map(|m| {
            json!({
                "id": m.id,
                "name": m.name,
                "definition": m.definition,
                "good_examples": m.good_examples,
                "bad_examples": m.bad_examples,
            })
        })
        .collect();
    let user = format!(
        "Task: {}\n\n{}\n\n{}",
        t.task,
        tagged("metrics", &serde_json::to_string_pretty(&metrics).unwrap_or_default()),
        tagged("trajectory", &t.render_steps()),
    );
    gw.request(ModelRole::Judge)
        .system(JUDGE_INSTRUCTIONS)
        .user(user)
        .schema(judge_schema(ms))
}

#[derive(Debug, Deserialize)]
struct RawRating {
    metric_id: String,
    value: RatingValue,
    rationale: String,
}

#[derive(Debug, Deserialize)]
struct RawRatings {
    ratings: Vec<RawRating>,
}

/// One rating per metric, in metric-set order. An incomplete or duplicated
/// reply gets one re-prompt.
pub fn judge_trajectory(gw: &Gateway, t: &Trajectory, ms: &MetricSet) -> Result<Vec<Rating>> {
    if ms.metrics.is_empty() {
        return Err(Error::InvalidArgument(format!("metric set {} is empty", ms.id)));
    }
    let mut req = judge_request(gw, t, ms);
    for attempt in 0..2 {
        let resp = gw.complete(&req)?;
        let raw: RawRatings = serde_json::from_value(resp.structured.clone().unwrap_or_default())
            .map_err(|e| Error::JudgeSchema(e.to_string()))?;
        match arrange(&raw.ratings, t, ms) {
            Ok(r) => return Ok(r),
            Err(problem) if attempt == 0 => {
                tracing::debug!(trajectory = %t.id, %problem, "re-prompting judge");
                req = req.followup(
                    &resp.text,
                    format!("{problem} Rate every metric in the list exactly once."),
                );
            }
            Err(problem) => return Err(Error::JudgeSchema(format!("{}: {problem}", t.id))),
        }
    }
    unreachable!("judge loop returns within two attempts")
}

fn arrange(raw: &[RawRating], t: &Trajectory, ms: &MetricSet) -> std::result::Result<Vec<Rating>, String> {
    let mut seen = HashSet::new();
    for r in raw {
        if ms.metric(&r.metric_id).is_none() {
            return Err(format!("Unknown metric id {:?}.", r.metric_id));
        }
        if !seen.insert(r.metric_id.as_str()) {
            return Err(format!("Metric {} was rated more than once.", r.metric_id));
        }
    }
    let missing: Vec<&str> = ms
        .metrics
        .iter()
        .map(|m| m.id.as_str())
        .filter(|id| !seen.contains(id))
        .collect();
    if !missing.is_empty() {
        return Err(format!("Missing ratings for: {}.", missing.join(", ")));
    }
    Ok(ms
        .metrics
        .iter()
        .map(|m| {
            let r = raw.iter().find(|r| r.metric_id == m.id).expect("checked above");
            Rating {
                trajectory_id: t.id.clone(),
                metric_id: m.id.clone(),
                value: r.value,
                rationale: r.rationale.trim().to_string(),
            }
        })
        .collect())
}

/// Judge every trajectory concurrently; ratings grouped per trajectory in
/// input order.
pub fn judge_all(gw: &Gateway, trajectories: &[&Trajectory], ms: &MetricSet) -> Result<Vec<Vec<Rating>>> {
    parallel_map(trajectories, gw.max_parallel(), |_, t| judge_trajectory(gw, t, ms))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RatingCounts {
    pub n_pos: u64,
    pub n_neg: u64,
    pub n_na: u64,
}

pub fn rating_counts(ratings: &[Rating], metric_id: &str) -> RatingCounts {
    let mut c = RatingCounts::default();
    for r in ratings.iter().filter(|r| r.metric_id == metric_id) {
        match r.value {
            RatingValue::PlusOne => c.n_pos += 1,
            RatingValue::MinusOne => c.n_neg += 1,
            RatingValue::NotApplicable => c.n_na += 1,
        }
    }
    c
}

/// #(+1) / (#(+1) + #(−1)); `None` when no rating is ±1.
pub fn metric_score(ratings: &[Rating], metric_id: &str) -> Option<Fraction> {
    let c = rating_counts(ratings, metric_id);
    Fraction::new(c.n_pos, c.n_pos + c.n_neg)
}

/// #(−1) over the same non-N/A base as [`metric_score`].
pub fn failure_rate(ratings: &[Rating], metric_id: &str) -> Option<Fraction> {
    let c = rating_counts(ratings, metric_id);
    Fraction::new(c.n_neg, c.n_pos + c.n_neg)
}

/// Mean of the defined metric scores; zero when none is defined.
pub fn mean_metric_score(ratings: &[Rating], ms: &MetricSet) -> Fraction {
    let defined: Vec<Fraction> = ms
        .metrics
        .iter()
        .filter_map(|m| metric_score(ratings, &m.id))
        .collect();
    Fraction::mean(&defined).unwrap_or(Fraction::ZERO)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub score: Option<f64>,
    pub failure_rate: Option<f64>,
    pub n_pos: u64,
    pub n_neg: u64,
    pub n_na: u64,
}

fn decimal(f: Fraction) -> f64 {
    f.render().parse().unwrap_or(f.to_f64())
}

/// Per-metric aggregate table in the scores.json shape.
pub fn score_table(ratings: &[Rating], ms: &MetricSet) -> BTreeMap<String, ScoreEntry> {
    ms.metrics
        .iter()
        .map(|m| {
            let c = rating_counts(ratings, &m.id);
            (
                m.id.clone(),
                ScoreEntry {
                    score: metric_score(ratings, &m.id).map(decimal),
                    failure_rate: failure_rate(ratings, &m.id).map(decimal),
                    n_pos: c.n_pos,
                    n_neg: c.n_neg,
                    n_na: c.n_na,
                },
            )
        })
        .collect()
}
