//! Scripted models for the key-door ladder fixture.
//!
//! Stage 1 induces {key-handling, goal-reaching}; stage 2 adds
//! door-handling; stage 3 adds navigation-efficiency. The improver appends
//! the directive tied to the first failing metric that has one.

use serde_json::{json, Value};

use induct_core::gateway::ModelRequest;
use induct_core::ladder::{LadderConfig, INITIAL_PROMPT};
use induct_core::optimizer::OptimizerConfig;
use induct_core::text::extract_block;
use induct_core::{Feedback, Result, Trajectory};

use super::{block_json, kind, requested_n, Kind};

pub const KEY_DIRECTIVE: &str = "\n- Always pick up the key.";
pub const DOOR_DIRECTIVE: &str = "\n- Unlock the door once you hold the key.";
pub const PATH_DIRECTIVE: &str = "\n- Follow the shortest path to each target.";

const METRICS: [(&str, &str); 4] = [
    ("Key handling", "Whether the agent picks up the key."),
    ("Goal reaching", "Whether the agent reaches the goal."),
    ("Door handling", "Whether the agent opens the locked door."),
    ("Navigation efficiency", "Whether the agent moves without idling."),
];

pub fn directive_for(metric_id: &str) -> Option<&'static str> {
    match metric_id {
        "key-handling" => Some(KEY_DIRECTIVE),
        "door-handling" => Some(DOOR_DIRECTIVE),
        "navigation-efficiency" => Some(PATH_DIRECTIVE),
        _ => None,
    }
}

pub fn config() -> LadderConfig {
    LadderConfig {
        optimizer: OptimizerConfig {
            n_min: 2,
            n_max: 2,
            sets_per_n: 1,
            max_rounds: 1,
            ..OptimizerConfig::default()
        },
        ..LadderConfig::default()
    }
}

pub fn prompts() -> [String; 4] {
    let p0 = INITIAL_PROMPT.to_string();
    let p1 = format!("{p0}{KEY_DIRECTIVE}");
    let p2 = format!("{p1}{DOOR_DIRECTIVE}");
    let p3 = format!("{p2}{PATH_DIRECTIVE}");
    [p0, p1, p2, p3]
}

pub fn feedback(_stage: usize, trajectories: &[Trajectory]) -> Result<Vec<Feedback>> {
    Ok(trajectories
        .iter()
        .map(|t| Feedback {
            id: format!("fb-{}", t.id),
            trajectory_id: t.id.clone(),
            annotator: "ann".into(),
            text: "The agent wandered instead of solving the puzzle.".into(),
            created_at: "2025-01-01T00:00:00Z".into(),
        })
        .collect())
}

fn grounder(req: &ModelRequest) -> String {
    let user = req.user_text();
    let trajectory = extract_block(&user, "trajectory").unwrap();
    let action = trajectory
        .lines()
        .next()
        .and_then(|l| l.rsplit("ACTION: ").next())
        .unwrap()
        .trim();
    json!({"aspects": [{
        "feedback_text": "The agent wandered instead of solving the puzzle.",
        "sign": "negative",
        "step_start": 0,
        "step_end": 0,
        "excerpt": action,
    }]})
    .to_string()
}

fn aspect_ids(req: &ModelRequest) -> Vec<Value> {
    block_json(req, "aspects")
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["id"].clone())
        .collect()
}

fn clusterer(req: &ModelRequest) -> String {
    let n = requested_n(req);
    let ids = aspect_ids(req);
    let metrics: Vec<Value> = METRICS[..n]
        .iter()
        .map(|(name, def)| json!({"name": name, "definition": def, "good_aspects": [], "bad_aspects": ids}))
        .collect();
    json!({ "metrics": metrics }).to_string()
}

fn iterative(req: &ModelRequest) -> String {
    let existing = block_json(req, "existing_metrics");
    let existing = existing.as_array().unwrap();
    let ids = aspect_ids(req);
    let mut metrics: Vec<Value> = existing
        .iter()
        .map(|m| {
            json!({"id": m["id"], "name": m["name"], "definition": m["definition"],
                   "good_aspects": [], "bad_aspects": [ids[0]]})
        })
        .collect();
    let (name, def) = METRICS[existing.len()];
    metrics.push(json!({"id": "", "name": name, "definition": def, "good_aspects": [], "bad_aspects": ids}));
    json!({ "metrics": metrics }).to_string()
}

/// Rates against the environment's own messages.
pub fn judge_value(metric_id: &str, trajectory: &str) -> &'static str {
    let pass = match metric_id {
        "key-handling" => trajectory.contains("You picked up the key"),
        "door-handling" => trajectory.contains("The door is open"),
        "goal-reaching" => trajectory.contains("Task complete"),
        "navigation-efficiency" => !trajectory.lines().any(|l| l.ends_with("ACTION: wait")),
        other => panic!("unknown metric {other}"),
    };
    if pass {
        "+1"
    } else {
        "-1"
    }
}

fn judge(req: &ModelRequest) -> String {
    let user = req.user_text();
    let trajectory = extract_block(&user, "trajectory").unwrap();
    let ratings: Vec<Value> = block_json(req, "metrics")
        .as_array()
        .unwrap()
        .iter()
        .map(|m| {
            let id = m["id"].as_str().unwrap();
            json!({"metric_id": id, "value": judge_value(id, trajectory), "rationale": "scripted"})
        })
        .collect();
    json!({ "ratings": ratings }).to_string()
}

fn matcher(req: &ModelRequest) -> String {
    let traits = block_json(req, "traits");
    let first_negative = traits
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["polarity"] == "negative")
        .map(|t| t["id"].clone());
    let matches: Vec<Value> = block_json(req, "aspects")
        .as_array()
        .unwrap()
        .iter()
        .map(|a| json!({"aspect_id": a["id"], "trait_id": first_negative}))
        .collect();
    json!({ "matches": matches }).to_string()
}

fn improver(req: &ModelRequest) -> String {
    let user = req.user_text();
    let current = extract_block(&user, "current_prompt").unwrap().to_string();
    let evals = block_json(req, "evaluations");
    let order: Vec<String> = evals[0]["ratings"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["metric_id"].as_str().unwrap().to_string())
        .collect();
    let failing = |id: &str| {
        evals.as_array().unwrap().iter().any(|e| {
            e["ratings"]
                .as_array()
                .unwrap()
                .iter()
                .any(|r| r["metric_id"] == id && r["value"] == "-1")
        })
    };
    let next = order
        .iter()
        .filter(|id| failing(id))
        .filter_map(|id| directive_for(id))
        .find(|d| !current.contains(d.trim()));
    let prompt = match next {
        Some(d) => format!("{current}{d}"),
        None => current,
    };
    json!({ "prompt": prompt }).to_string()
}

pub fn models(req: &ModelRequest) -> String {
    match kind(req) {
        Kind::Grounder => grounder(req),
        Kind::Clusterer => clusterer(req),
        Kind::Iterative => iterative(req),
        Kind::Judge => judge(req),
        Kind::Matcher => matcher(req),
        Kind::Improver => improver(req),
        Kind::Agent => panic!("the fixture agent is not model-backed"),
    }
}
