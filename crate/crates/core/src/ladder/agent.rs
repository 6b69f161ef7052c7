//! Agent policies for the key-door game and the episode runner.

use serde::Deserialize;

use super::keydoor::{Action, KeyDoor, Pos, Task, MSG_DONE};
use crate::error::{Error, Result};
use crate::gateway::{field, Gateway, ModelRole, OutputSchema, SchemaType};
use crate::model::{Step, Trajectory};
use crate::text::tagged;

/// What a policy sees before choosing an action.
pub struct View<'a> {
    pub task: &'a Task,
    pub env: &'a KeyDoor,
    pub observation: &'a str,
    pub history: &'a [Step],
}

pub trait AgentPolicy: Send + Sync {
    fn name(&self) -> &str;
    fn act(&self, prompt: &str, view: &View<'_>) -> Result<Action>;
}

/// Rule-following agent whose behaviour is switched on by phrases in its
/// prompt:
///
/// * "pick up the key" — fetch the key before anything else;
/// * "unlock the door" — with the key in hand, walk next to the door and unlock it;
/// * "shortest path" — navigate by breadth-first search instead of greedily.
///
/// Greedy navigation moves horizontally toward the target when possible,
/// otherwise vertically, otherwise waits.
#[derive(Debug, Clone, Copy, Default)]
pub struct DirectiveAgent;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Directives {
    pub fetch_key: bool,
    pub unlock: bool,
    pub shortest_path: bool,
}

impl Directives {
    pub fn parse(prompt: &str) -> Directives {
        let p = prompt.to_lowercase();
        Directives {
            fetch_key: p.contains("pick up the key"),
            unlock: p.contains("unlock the door"),
            shortest_path: p.contains("shortest path"),
        }
    }
}

fn greedy_move(env: &KeyDoor, target: Pos) -> Action {
    let (x, y) = env.state.pos;
    let (tx, ty) = target;
    let open = env.state.door_open;
    let horizontal = match tx.cmp(&x) {
        std::cmp::Ordering::Greater => Some(Action::Right),
        std::cmp::Ordering::Less => Some(Action::Left),
        std::cmp::Ordering::Equal => None,
    };
    let vertical = match ty.cmp(&y) {
        std::cmp::Ordering::Greater => Some(Action::Down),
        std::cmp::Ordering::Less => Some(Action::Up),
        std::cmp::Ordering::Equal => None,
    };
    for a in [horizontal, vertical].into_iter().flatten() {
        if a.step((x, y)).is_some_and(|p| env.passable(p, open)) {
            return a;
        }
    }
    Action::Wait
}

/// Free cell next to the door closest to the agent (Manhattan distance,
/// first in left/right/up/down order on ties).
fn door_approach(env: &KeyDoor) -> Option<Pos> {
    let (dx, dy) = env.layout.door;
    let (x, y) = env.state.pos;
    [(dx.wrapping_sub(1), dy), (dx + 1, dy), (dx, dy.wrapping_sub(1)), (dx, dy + 1)]
        .into_iter()
        .filter(|&p| !env.layout.is_wall(p))
        .min_by_key(|&(px, py)| px.abs_diff(x) + py.abs_diff(y))
}

impl DirectiveAgent {
    fn navigate(d: Directives, env: &KeyDoor, target: Pos) -> Action {
        if d.shortest_path {
            env.bfs_first_move(target).unwrap_or(Action::Wait)
        } else {
            greedy_move(env, target)
        }
    }
}

impl AgentPolicy for DirectiveAgent {
    fn name(&self) -> &str {
        "directive"
    }

    fn act(&self, prompt: &str, view: &View<'_>) -> Result<Action> {
        let d = Directives::parse(prompt);
        let env = view.env;
        let s = &env.state;
        if d.fetch_key && !s.has_key {
            if s.pos == env.layout.key {
                return Ok(Action::Pickup);
            }
            return Ok(Self::navigate(d, env, env.layout.key));
        }
        if d.unlock && s.has_key && !s.door_open {
            if env.adjacent_to_door() {
                return Ok(Action::Unlock);
            }
            if let Some(target) = door_approach(env) {
                return Ok(Self::navigate(d, env, target));
            }
        }
        Ok(Self::navigate(d, env, env.layout.goal))
    }
}

/// Agent backed by the gateway's agent role; the ladder prompt is its
/// system message.
pub struct LlmAgent {
    gateway: Gateway,
}

impl LlmAgent {
    pub fn new(gateway: Gateway) -> Self {
        LlmAgent { gateway }
    }
}

#[derive(Deserialize)]
struct ActionReply {
    action: String,
}

impl AgentPolicy for LlmAgent {
    fn name(&self) -> &str {
        "llm"
    }

    fn act(&self, prompt: &str, view: &View<'_>) -> Result<Action> {
        let history = view
            .history
            .iter()
            .map(|s| format!("Step {} — OBSERVATION: {} ACTION: {}", s.index, s.observation, s.action))
            .collect::<Vec<_>>()
            .join("\n");
        let names: Vec<&str> = Action::ALL.iter().map(|a| a.as_str()).collect();
        let req = self
            .gateway
            .request(ModelRole::Agent)
            .system(prompt)
            .user(format!(
                "Task: {}\n\n{}\n\nCurrent observation: {}\n\nChoose the next action, one of: {}.",
                view.task.description(),
                tagged("history", &history),
                view.observation,
                names.join(", ")
            ))
            .schema(OutputSchema::new(
                "action",
                vec![field("action", SchemaType::enumeration(&names))],
            ));
        let resp = self.gateway.complete(&req)?;
        let reply: ActionReply = serde_json::from_value(resp.structured.unwrap_or_default())?;
        Action::parse(&reply.action).ok_or_else(|| Error::Schema(format!("unknown action {:?}", reply.action)))
    }
}

/// Play one episode of `task` with at most `step_cap` recorded steps.
///
/// Each step pairs the observation before acting with the action taken.
/// Reaching the goal appends a final step whose action is `done`, if the cap
/// leaves room for it. Policy failures surface as [`Error::Episode`]
/// carrying the partial trajectory.
pub fn run_episode(
    task: &Task,
    policy: &dyn AgentPolicy,
    prompt: &str,
    step_cap: usize,
    trajectory_id: &str,
) -> Result<Trajectory> {
    if step_cap == 0 {
        return Err(Error::InvalidArgument("step cap must be at least 1".into()));
    }
    let mut env = KeyDoor::new(task.layout.clone());
    let mut steps: Vec<Step> = Vec::new();
    let mut last = "The episode begins.".to_string();
    let mut success = false;
    while steps.len() < step_cap {
        if env.at_goal() {
            steps.push(Step::new(steps.len(), format!("{last} {MSG_DONE}"), "done"));
            success = true;
            break;
        }
        let observation = format!("{last} {}", env.observe());
        let action = {
            let view = View {
                task,
                env: &env,
                observation: &observation,
                history: &steps,
            };
            policy.act(prompt, &view)
        };
        let action = match action {
            Ok(a) => a,
            Err(e) => {
                let partial = trajectory(task, policy, trajectory_id, steps, None);
                return Err(Error::Episode {
                    task_id: task.id.clone(),
                    message: e.to_string(),
                    partial: Box::new(partial),
                });
            }
        };
        steps.push(Step::new(steps.len(), observation, action.as_str()));
        last = env.apply(action);
    }
    let success = success || env.at_goal();
    Ok(trajectory(task, policy, trajectory_id, steps, Some(success)))
}

fn trajectory(task: &Task, policy: &dyn AgentPolicy, id: &str, steps: Vec<Step>, success: Option<bool>) -> Trajectory {
    Trajectory {
        id: id.to_string(),
        task: format!("{}: {}", task.id, task.description()),
        agent: policy.name().to_string(),
        source: "keydoor".to_string(),
        steps,
        success,
    }
}
