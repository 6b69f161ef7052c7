//! Scripted model backends and fixtures shared by the integration tests.
//!
//! "Theme world": trajectory `i` touches two of six behaviour themes,
//! `i % 6` (goes badly) and `(i + 1) % 6` (goes well), and its feedback
//! mentions exactly those two. Mock models recover themes from text, so a
//! metric set of size `n` covers `min(n, 6)` themes and every metric beyond
//! the sixth is a filler the judge rates +1 everywhere.

#![allow(dead_code)]

use std::sync::Arc;

use serde_json::{json, Value};

use induct_core::gateway::{BackendError, Gateway, GatewayConfig, ModelRequest, ScriptedBackend};
use induct_core::text::extract_block;
use induct_core::{Feedback, Step, Trajectory};

pub mod ladder_world;

pub const THEMES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Grounder,
    Clusterer,
    Iterative,
    Judge,
    Matcher,
    Improver,
    Agent,
}

pub fn kind(req: &ModelRequest) -> Kind {
    let sys = req.system_text();
    let user = req.user_text();
    if sys.starts_with("You cluster") {
        if user.contains("<existing_metrics>") {
            Kind::Iterative
        } else {
            Kind::Clusterer
        }
    } else if user.contains("<feedback>") {
        Kind::Grounder
    } else if user.contains("<traits>") {
        Kind::Matcher
    } else if user.contains("<current_prompt>") {
        Kind::Improver
    } else if user.contains("<metrics>") {
        Kind::Judge
    } else {
        Kind::Agent
    }
}

pub fn block_json(req: &ModelRequest, tag: &str) -> Value {
    let user = req.user_text();
    let body = extract_block(&user, tag).unwrap_or_else(|| panic!("request has no <{tag}> block"));
    serde_json::from_str(body).unwrap_or_else(|e| panic!("<{tag}> is not JSON: {e}"))
}

/// Requested metric count from a clustering prompt.
pub fn requested_n(req: &ModelRequest) -> usize {
    let sys = req.system_text();
    let rest = sys.split("exactly ").nth(1).expect("count in prompt");
    rest.split_whitespace().next().unwrap().parse().unwrap()
}

pub fn gateway<F>(f: F) -> (Gateway, ScriptedBackend)
where
    F: Fn(&ModelRequest) -> String + Send + Sync + 'static,
{
    let b = ScriptedBackend::new(move |r| Ok::<_, BackendError>(f(r)));
    (Gateway::new(Arc::new(b.clone()), GatewayConfig::default()), b)
}

/// The trailing number of an identifier or name ("theme-3-handling" → 3).
pub fn number_in(s: &str) -> Option<usize> {
    s.split(|c: char| !c.is_ascii_digit())
        .find(|p| !p.is_empty())
        .and_then(|p| p.parse().ok())
}

pub fn theme_text(theme: usize, good: bool) -> String {
    format!("theme {theme} happens and goes {}", if good { "well" } else { "badly" })
}

pub fn theme_trajectory(i: usize) -> Trajectory {
    let (bad, good) = (i % THEMES, (i + 1) % THEMES);
    Trajectory {
        id: format!("traj-{i:02}"),
        task: format!("Task number {i}"),
        agent: "fixture".into(),
        source: "theme-world".into(),
        steps: vec![
            Step::new(0, format!("The agent starts task {i}."), "look"),
            Step::new(1, theme_text(bad, false), format!("act {bad}")),
            Step::new(2, theme_text(good, true), format!("act {good}")),
        ],
        success: Some(i.is_multiple_of(2)),
    }
}

pub fn theme_feedback_text(i: usize) -> String {
    let (bad, good) = (i % THEMES, (i + 1) % THEMES);
    format!("About theme {bad}: the agent handled it badly. About theme {good}: the agent handled it well.")
}

pub fn theme_feedback(i: usize) -> Feedback {
    Feedback {
        id: format!("fb-{i:02}"),
        trajectory_id: format!("traj-{i:02}"),
        annotator: "ann".into(),
        text: theme_feedback_text(i),
        created_at: "2025-01-01T00:00:00Z".into(),
    }
}

pub fn theme_jsonl(n: usize) -> String {
    (0..n)
        .map(|i| serde_json::to_string(&theme_trajectory(i)).unwrap() + "\n")
        .collect()
}

/// Grounder: one aspect per "About theme k" sentence, located on the step
/// whose observation mentions that theme.
pub fn theme_grounder(req: &ModelRequest) -> String {
    let user = req.user_text();
    let feedback = extract_block(&user, "feedback").unwrap();
    let trajectory = extract_block(&user, "trajectory").unwrap();
    let mut aspects = Vec::new();
    for sentence in feedback.split("About ").filter(|s| !s.trim().is_empty()) {
        let theme = number_in(sentence).unwrap();
        let good = sentence.contains("well");
        let text = theme_text(theme, good);
        let step = trajectory
            .lines()
            .position(|l| l.contains(&text))
            .expect("theme appears in trajectory");
        aspects.push(json!({
            "feedback_text": format!("About {}", sentence.trim()),
            "sign": if good { "positive" } else { "negative" },
            "step_start": step,
            "step_end": step,
            "excerpt": text,
        }));
    }
    json!({ "aspects": aspects }).to_string()
}

fn aspects_by_theme(req: &ModelRequest) -> Vec<Vec<String>> {
    let mut by = vec![Vec::new(); THEMES];
    for a in block_json(req, "aspects").as_array().unwrap() {
        let theme = number_in(a["feedback"].as_str().unwrap()).unwrap();
        by[theme].push(a["id"].as_str().unwrap().to_string());
    }
    by
}

/// Clusterer: one metric per theme up to `min(n, 6)`, then fillers.
/// `opaque` themes get names that do not reveal the theme.
pub fn theme_clusterer_with(req: &ModelRequest, opaque: &[usize]) -> String {
    let n = requested_n(req);
    let by = aspects_by_theme(req);
    let any = by.iter().flatten().next().cloned().unwrap();
    let mut metrics = Vec::new();
    for (j, examples) in by.iter().enumerate().take(n) {
        let (name, definition) = if opaque.contains(&j) {
            (format!("Cluster {j}"), "A recurring pattern in the agent's behavior.".to_string())
        } else {
            (format!("Theme {j} handling"), format!("How the agent deals with theme {j}."))
        };
        metrics.push(json!({
            "name": name,
            "definition": definition,
            "good_aspects": examples,
            "bad_aspects": [],
        }));
    }
    for k in THEMES..n {
        metrics.push(json!({
            "name": format!("Filler {k}"),
            "definition": "General conduct.",
            "good_aspects": [any],
            "bad_aspects": [],
        }));
    }
    json!({ "metrics": metrics }).to_string()
}

pub fn theme_clusterer(req: &ModelRequest) -> String {
    theme_clusterer_with(req, &[])
}

/// Judge: a theme metric is +1/-1 where the trajectory shows the theme going
/// well/badly and na elsewhere; fillers are +1 everywhere.
pub fn theme_judge(req: &ModelRequest) -> String {
    let user = req.user_text();
    let trajectory = extract_block(&user, "trajectory").unwrap();
    let ratings: Vec<Value> = block_json(req, "metrics")
        .as_array()
        .unwrap()
        .iter()
        .map(|m| {
            let id = m["id"].as_str().unwrap();
            let value = if id.starts_with("filler") {
                "+1"
            } else {
                let j = number_in(id).unwrap();
                if trajectory.contains(&theme_text(j, true)) {
                    "+1"
                } else if trajectory.contains(&theme_text(j, false)) {
                    "-1"
                } else {
                    "na"
                }
            };
            json!({"metric_id": id, "value": value, "rationale": "scripted"})
        })
        .collect();
    json!({ "ratings": ratings }).to_string()
}

/// Matcher: an aspect about theme j goes to the same-sign trait whose metric
/// name is "Theme j handling", or — for opaque names — whose examples contain
/// the aspect's behaviour excerpt.
pub fn theme_matcher(req: &ModelRequest) -> String {
    let traits = block_json(req, "traits");
    let traits = traits.as_array().unwrap();
    let matches: Vec<Value> = block_json(req, "aspects")
        .as_array()
        .unwrap()
        .iter()
        .map(|a| {
            let theme = number_in(a["feedback"].as_str().unwrap()).unwrap();
            let excerpt = a["behavior"].as_str().unwrap();
            let hit = traits.iter().find(|t| {
                t["polarity"] == a["sign"]
                    && (t["metric"].as_str() == Some(&format!("Theme {theme} handling"))
                        || t["examples"]
                            .as_array()
                            .is_some_and(|ex| ex.iter().any(|e| e.as_str() == Some(excerpt))))
            });
            json!({"aspect_id": a["id"], "trait_id": hit.map(|t| t["id"].clone())})
        })
        .collect();
    json!({ "matches": matches }).to_string()
}

/// Every theme-world role at once.
pub fn theme_world(req: &ModelRequest) -> String {
    match kind(req) {
        Kind::Grounder => theme_grounder(req),
        Kind::Clusterer => theme_clusterer(req),
        Kind::Judge => theme_judge(req),
        Kind::Matcher => theme_matcher(req),
        other => panic!("theme world has no {other:?}"),
    }
}

pub fn theme_instances(n: usize) -> Vec<induct_core::metaeval::Instance> {
    let (g, _) = gateway(theme_grounder);
    (0..n)
        .map(|i| {
            let t = theme_trajectory(i);
            let f = theme_feedback(i);
            let aspects = induct_core::grounding::ground_feedback(&g, &t, &f).unwrap();
            induct_core::metaeval::Instance {
                trajectory: t,
                feedback: f,
                aspects,
            }
        })
        .collect()
}
