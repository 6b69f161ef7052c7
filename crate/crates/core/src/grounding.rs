//! Feedback grounding: split one free-text comment into signed aspects and
//! tie each aspect to a contiguous range of trajectory steps.

use std::collections::HashSet;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::gateway::{field, parallel_map, Gateway, ModelRequest, ModelRole, OutputSchema, SchemaType};
use crate::model::{Aspect, BehaviorRef, Feedback, Sign, Trajectory, ValidationOutcome, Violation};
use crate::text::{normalize_whitespace, short_digest, tagged, truncate_chars};

/// Hard cap on aspects per feedback.
pub const MAX_ASPECTS: usize = 10;
/// Counts above this are accepted with a warning.
pub const TYPICAL_MAX_ASPECTS: usize = 5;
/// Length of the fallback excerpt when the model's excerpt is not found in
/// the referenced steps.
const FALLBACK_EXCERPT_CHARS: usize = 300;

pub const GROUNDING_INSTRUCTIONS: &str = "You analyse human feedback on an AI agent's trajectory.\n\
Follow these instructions: (1) break down the feedback into bullet points; \
(2) for each bullet point, find the corresponding part of the trajectory to which the feedback refers.\n\
For every bullet point report: the bullet text (feedback_text); its sign, \"positive\" if it praises \
the agent and \"negative\" if it criticises it; the inclusive range of step indices it refers to \
(step_start, step_end); and an excerpt copied verbatim from those steps.";

pub fn grounding_schema() -> OutputSchema {
    OutputSchema::new(
        "grounded_aspects",
        vec![field(
            "aspects",
            SchemaType::array(SchemaType::object(vec![
                field("feedback_text", SchemaType::String),
                field("sign", SchemaType::enumeration(&["positive", "negative"])),
                field("step_start", SchemaType::Integer),
                field("step_end", SchemaType::Integer),
                field("excerpt", SchemaType::String),
            ])),
        )],
    )
}

#[derive(Debug, Clone, Deserialize)]
struct RawAspect {
    feedback_text: String,
    sign: Sign,
    step_start: i64,
    step_end: i64,
    excerpt: String,
}

#[derive(Debug, Deserialize)]
struct RawGrounding {
    aspects: Vec<RawAspect>,
}

pub fn grounding_request(gw: &Gateway, t: &Trajectory, f: &Feedback) -> ModelRequest {
    let n = t.steps.len();
    let user = format!(
        "Task: {}\n\n{}\n\nThe trajectory has {n} steps, indexed 0 to {}.\n\n{}",
        t.task,
        tagged("trajectory", &t.render_steps()),
        n.saturating_sub(1),
        tagged("feedback", f.text.trim()),
    );
    gw.request(ModelRole::Grounder)
        .system(GROUNDING_INSTRUCTIONS)
        .user(user)
        .schema(grounding_schema())
}

/// Ground one feedback against its trajectory.
///
/// Out-of-range step references or too many aspects get one repair
/// re-prompt; a second failure is a typed error. Zero aspects is an error
/// without repair.
pub fn ground_feedback(gw: &Gateway, t: &Trajectory, f: &Feedback) -> Result<Vec<Aspect>> {
    if f.trajectory_id != t.id {
        return Err(Error::InvalidArgument(format!(
            "feedback {} belongs to {}, not {}",
            f.id, f.trajectory_id, t.id
        )));
    }
    let req = grounding_request(gw, t, f);
    let resp = gw.complete(&req)?;
    let raw = decode(&resp)?;
    let raw = match check(&raw, t.steps.len(), &f.id) {
        Ok(()) => raw,
        Err(Problem::Empty) => return Err(empty(f)),
        Err(problem) => {
            tracing::warn!(feedback = %f.id, issue = %problem.describe(), "repairing grounding output");
            let repair = req.followup(
                &resp.text,
                format!(
                    "{} Every step_start and step_end must be an index from 0 to {}, with \
                     step_start <= step_end, and there may be at most {MAX_ASPECTS} aspects. \
                     Reply again with the corrected aspects.",
                    problem.describe(),
                    t.steps.len().saturating_sub(1)
                ),
            );
            let resp = gw.complete(&repair)?;
            let raw = decode(&resp)?;
            match check(&raw, t.steps.len(), &f.id) {
                Ok(()) => raw,
                Err(Problem::Empty) => return Err(empty(f)),
                Err(Problem::TooMany(count)) => {
                    return Err(Error::GroundingCount {
                        count,
                        cap: MAX_ASPECTS,
                    })
                }
                Err(Problem::Bounds(detail)) => return Err(Error::GroundingBounds { detail }),
            }
        }
    };
    Ok(build_aspects(t, f, &raw))
}

/// Ground many (trajectory, feedback) pairs concurrently, in input order.
pub fn ground_all(gw: &Gateway, pairs: &[(&Trajectory, &Feedback)]) -> Result<Vec<Vec<Aspect>>> {
    parallel_map(pairs, gw.max_parallel(), |_, (t, f)| ground_feedback(gw, t, f))
}

fn empty(f: &Feedback) -> Error {
    Error::EmptyGrounding {
        feedback_id: f.id.clone(),
    }
}

fn decode(resp: &crate::gateway::ModelResponse) -> Result<Vec<RawAspect>> {
    let value = resp.structured.clone().unwrap_or_default();
    let parsed: RawGrounding = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    Ok(parsed.aspects)
}

enum Problem {
    Empty,
    TooMany(usize),
    Bounds(String),
}

impl Problem {
    fn describe(&self) -> String {
        match self {
            Problem::Empty => "No aspects were returned.".to_string(),
            Problem::TooMany(n) => format!("You returned {n} aspects, above the limit of {MAX_ASPECTS}."),
            Problem::Bounds(d) => format!("Some step references are invalid: {d}."),
        }
    }
}

fn check(raw: &[RawAspect], step_count: usize, feedback_id: &str) -> std::result::Result<(), Problem> {
    if raw.is_empty() {
        return Err(Problem::Empty);
    }
    let bad: Vec<String> = raw
        .iter()
        .enumerate()
        .filter(|(_, a)| !range_ok(a.step_start, a.step_end, step_count))
        .map(|(i, a)| format!("aspect {i} of {feedback_id} has range [{}, {}]", a.step_start, a.step_end))
        .collect();
    if !bad.is_empty() {
        return Err(Problem::Bounds(bad.join("; ")));
    }
    if raw.len() > MAX_ASPECTS {
        return Err(Problem::TooMany(raw.len()));
    }
    Ok(())
}

fn range_ok(start: i64, end: i64, step_count: usize) -> bool {
    start >= 0 && start <= end && (end as u64) < step_count as u64
}

/// Whitespace-normalized text of the referenced steps.
pub fn behavior_text(t: &Trajectory, start: usize, end: usize) -> String {
    let joined = t.steps[start..=end]
        .iter()
        .map(|s| format!("{} {}", s.observation, s.action))
        .collect::<Vec<_>>()
        .join(" ");
    normalize_whitespace(&joined)
}

fn build_aspects(t: &Trajectory, f: &Feedback, raw: &[RawAspect]) -> Vec<Aspect> {
    let mut taken = HashSet::new();
    raw.iter()
        .map(|r| {
            let (start, end) = (r.step_start as usize, r.step_end as usize);
            let source = behavior_text(t, start, end);
            let excerpt = normalize_whitespace(&r.excerpt);
            let excerpt = if !excerpt.is_empty() && source.contains(&excerpt) {
                excerpt
            } else {
                truncate_chars(&source, FALLBACK_EXCERPT_CHARS).to_string()
            };
            let text = normalize_whitespace(&r.feedback_text);
            let base = format!(
                "asp-{}",
                short_digest(&[&f.id, r.sign.as_str(), &text, &format!("{start}-{end}")])
            );
            let mut id = base.clone();
            let mut k = 2;
            while !taken.insert(id.clone()) {
                id = format!("{base}-{k}");
                k += 1;
            }
            Aspect {
                id,
                feedback_id: f.id.clone(),
                trajectory_id: t.id.clone(),
                sign: r.sign,
                feedback_text: text,
                behavior: BehaviorRef {
                    step_start: start,
                    step_end: end,
                    excerpt,
                },
            }
        })
        .collect()
}

/// Check bounds, excerpt provenance and per-feedback counts. Counts above
/// [`TYPICAL_MAX_ASPECTS`] but within the cap are warnings.
pub fn validate_aspects(aspects: &[Aspect], t: &Trajectory) -> ValidationOutcome {
    let mut out = ValidationOutcome::default();
    let n = t.steps.len();
    for (i, a) in aspects.iter().enumerate() {
        let b = &a.behavior;
        if a.trajectory_id != t.id {
            out.violations.push(Violation::new(
                format!("aspects[{i}].trajectory_id"),
                format!("refers to {}, expected {}", a.trajectory_id, t.id),
            ));
        }
        if b.step_start > b.step_end || b.step_end >= n {
            out.violations.push(Violation::new(
                format!("aspects[{i}].behavior"),
                format!("step range [{}, {}] outside 0..{n}", b.step_start, b.step_end),
            ));
            continue;
        }
        if !behavior_text(t, b.step_start, b.step_end).contains(&normalize_whitespace(&b.excerpt)) {
            out.violations.push(Violation::new(
                format!("aspects[{i}].behavior.excerpt"),
                "excerpt not found in the referenced steps",
            ));
        }
    }
    let mut per_feedback: Vec<(&str, usize)> = Vec::new();
    for a in aspects {
        match per_feedback.iter_mut().find(|(id, _)| *id == a.feedback_id) {
            Some((_, c)) => *c += 1,
            None => per_feedback.push((&a.feedback_id, 1)),
        }
    }
    if aspects.is_empty() {
        out.violations.push(Violation::new("aspects", "no aspects"));
    }
    for (fid, count) in per_feedback {
        if count > MAX_ASPECTS {
            out.violations.push(Violation::new(
                "aspects",
                format!("{count} aspects for feedback {fid}, above the cap of {MAX_ASPECTS}"),
            ));
        } else if count > TYPICAL_MAX_ASPECTS {
            out.warnings
                .push(format!("{count} aspects for feedback {fid}: above typical range"));
        }
    }
    out
}
