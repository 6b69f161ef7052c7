//! Meta-evaluation: match grounded aspects with judge traits per instance
//! and pool coverage and redundancy over all instances.

use std::collections::HashSet;

use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::fraction::Fraction;
use crate::gateway::{field, parallel_map, Gateway, ModelRequest, ModelRole, OutputSchema, SchemaType};
use crate::judging::judge_all;
use crate::model::{
    derive_traits, Aspect, Feedback, InstanceId, MatchPair, MatchRecord, MetricSet, QualityReport, Rating,
    ReportCounts, Sign, Split, Trait, Trajectory,
};
use crate::text::tagged;

pub const MATCH_INSTRUCTIONS: &str = "You compare aspects of a human's feedback on an AI agent's \
trajectory with traits an automatic judge detected in the same trajectory. For each aspect, find \
the best matching trait or decide that there is no matching trait. A positive aspect can only match \
a positive trait and a negative aspect only a negative trait. Several aspects may match the same \
trait. Answer with one entry per aspect; use null for trait_id when nothing matches.";

/// One (trajectory, feedback) pair with its grounded aspects.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub trajectory: Trajectory,
    pub feedback: Feedback,
    pub aspects: Vec<Aspect>,
}

impl Instance {
    pub fn id(&self) -> InstanceId {
        InstanceId {
            trajectory_id: self.trajectory.id.clone(),
            feedback_id: self.feedback.id.clone(),
        }
    }
}

pub fn match_schema() -> OutputSchema {
    OutputSchema::new(
        "matches",
        vec![field(
            "matches",
            SchemaType::array(SchemaType::object(vec![
                field("aspect_id", SchemaType::String),
                field("trait_id", SchemaType::nullable(SchemaType::String)),
            ])),
        )],
    )
}

pub fn match_request(gw: &Gateway, aspects: &[Aspect], traits: &[Trait], ms: &MetricSet) -> ModelRequest {
    let a: Vec<_> = aspects
        .iter()
        .map(|a| {
            json!({
                "id": a.id,
                "sign": a.sign.as_str(),
                "feedback": a.feedback_text,
                "behavior": a.behavior.excerpt,
            })
        })
        .collect();
    let t: Vec<_> = traits
        .iter()
        .map(|t| {
            let m = ms.metric(&t.metric_id);
            json!({
                "id": t.metric_id,
                "polarity": t.polarity.as_str(),
                "metric": m.map(|m| m.name.as_str()).unwrap_or(""),
                "definition": m.map(|m| m.definition.as_str()).unwrap_or(""),
                "examples": m.map(|m| match t.polarity {
                    Sign::Positive => m.good_examples.clone(),
                    Sign::Negative => m.bad_examples.clone(),
                }).unwrap_or_default(),
            })
        })
        .collect();
    let user = format!(
        "{}\n\n{}",
        tagged("aspects", &serde_json::to_string_pretty(&a).unwrap_or_default()),
        tagged("traits", &serde_json::to_string_pretty(&t).unwrap_or_default()),
    );
    gw.request(ModelRole::Matcher)
        .system(MATCH_INSTRUCTIONS)
        .user(user)
        .schema(match_schema())
}

#[derive(Debug, Deserialize)]
struct RawMatch {
    aspect_id: String,
    trait_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawMatches {
    matches: Vec<RawMatch>,
}

/// Build a record from a proposed (aspect → trait id) assignment, discarding
/// unknown or sign-inconsistent targets.
fn assemble(
    instance_id: InstanceId,
    aspects: &[Aspect],
    traits: &[Trait],
    proposal: impl Fn(&Aspect) -> Option<String>,
) -> MatchRecord {
    let pairs: Vec<MatchPair> = aspects
        .iter()
        .map(|a| {
            let matched = proposal(a).and_then(|tid| match traits.iter().find(|t| t.metric_id == tid) {
                None => {
                    tracing::warn!(aspect = %a.id, trait_id = %tid, "matcher named an unknown trait");
                    None
                }
                Some(t) if t.polarity != a.sign => {
                    tracing::warn!(aspect = %a.id, trait_id = %tid, "discarding sign-inconsistent match");
                    None
                }
                Some(t) => Some(t.clone()),
            });
            MatchPair {
                aspect_id: a.id.clone(),
                sign: a.sign,
                matched,
            }
        })
        .collect();
    let hit: HashSet<&str> = pairs
        .iter()
        .filter_map(|p| p.matched.as_ref().map(|t| t.metric_id.as_str()))
        .collect();
    let unmatched_traits = traits
        .iter()
        .filter(|t| !hit.contains(t.metric_id.as_str()))
        .cloned()
        .collect();
    MatchRecord {
        instance_id,
        pairs,
        unmatched_traits,
    }
}

/// Ask the matcher model to pair each aspect with at most one trait.
/// Instances with no aspects or no traits are resolved without a call.
pub fn match_instance(
    gw: &Gateway,
    instance_id: InstanceId,
    aspects: &[Aspect],
    traits: &[Trait],
    ms: &MetricSet,
) -> Result<MatchRecord> {
    if aspects.is_empty() || traits.is_empty() {
        return Ok(assemble(instance_id, aspects, traits, |_| None));
    }
    let resp = gw.complete(&match_request(gw, aspects, traits, ms))?;
    let raw: RawMatches =
        serde_json::from_value(resp.structured.clone().unwrap_or_default()).map_err(|e| Error::Schema(e.to_string()))?;
    Ok(assemble(instance_id, aspects, traits, |a| {
        raw.matches
            .iter()
            .find(|m| m.aspect_id == a.id)
            .and_then(|m| m.trait_id.clone())
            .filter(|s| !s.is_empty())
    }))
}

/// Deterministic reference matcher over an explicit (aspect_id, trait_id)
/// relation. Traits are never reserved, so a maximum-cardinality matching
/// is the product of independent per-aspect choices; each aspect takes the
/// lexicographically smallest related, sign-consistent trait id.
pub fn oracle_match(
    instance_id: InstanceId,
    aspects: &[Aspect],
    traits: &[Trait],
    relation: &[(String, String)],
) -> MatchRecord {
    assemble(instance_id, aspects, traits, |a| {
        traits
            .iter()
            .filter(|t| t.polarity == a.sign)
            .filter(|t| relation.iter().any(|(ai, ti)| *ai == a.id && *ti == t.metric_id))
            .map(|t| t.metric_id.clone())
            .min()
    })
}

/// Pooled coverage and redundancy over `records`.
pub fn quality_report(records: &[MatchRecord], metric_set_id: &str, split: Split) -> Result<QualityReport> {
    let mut counts = ReportCounts::default();
    let mut flagged = Vec::new();
    for r in records {
        counts.aspects_total += r.pairs.len() as u64;
        counts.aspects_matched += r.aspects_matched() as u64;
        counts.traits_total += r.traits_total() as u64;
        counts.traits_unmatched += r.unmatched_traits.len() as u64;
        if r.pairs.is_empty() && r.traits_total() > 0 {
            flagged.push(r.instance_id.clone());
        }
    }
    let coverage = Fraction::new(counts.aspects_matched, counts.aspects_total).ok_or_else(|| {
        Error::EmptyEvaluation(format!("no aspects across {} instances of the {split:?} split", records.len()))
    })?;
    Ok(QualityReport {
        metric_set_id: metric_set_id.to_string(),
        split,
        coverage,
        redundancy: Fraction::new(counts.traits_unmatched, counts.traits_total),
        per_instance: records.to_vec(),
        counts,
        flagged_instances: flagged,
    })
}

/// Judge, match and report one metric set over a list of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub ratings: Vec<Rating>,
    pub matches: Vec<MatchRecord>,
    pub report: QualityReport,
}

pub fn evaluate_metric_set(gw: &Gateway, ms: &MetricSet, instances: &[Instance], split: Split) -> Result<Evaluation> {
    if instances.is_empty() {
        return Err(Error::EmptyEvaluation(format!("the {split:?} split has no instances")));
    }
    let trajectories: Vec<&Trajectory> = instances.iter().map(|i| &i.trajectory).collect();
    let per_traj = judge_all(gw, &trajectories, ms)?;
    let traits: Vec<Vec<Trait>> = per_traj.iter().map(|r| derive_traits(r)).collect::<Result<_>>()?;
    let jobs: Vec<(&Instance, &Vec<Trait>)> = instances.iter().zip(&traits).collect();
    let matches = parallel_map(&jobs, gw.max_parallel(), |_, (inst, traits)| {
        match_instance(gw, inst.id(), &inst.aspects, traits, ms)
    })?;
    let report = quality_report(&matches, &ms.id, split)?;
    Ok(Evaluation {
        ratings: per_traj.into_iter().flatten().collect(),
        matches,
        report,
    })
}
