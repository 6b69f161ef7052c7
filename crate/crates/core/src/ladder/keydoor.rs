//! "Key-door": a deterministic text grid game. The agent must pick up the
//! key, unlock the door from an adjacent cell and walk to the goal.
//!
//! Legend: `#` wall, `A` agent start, `K` key, `D` locked door, `G` goal.

use std::collections::VecDeque;
use std::fmt;

use crate::error::{Error, Result};

pub type Pos = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Pickup,
    Unlock,
    Wait,
}

impl Action {
    pub const ALL: [Action; 7] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Pickup,
        Action::Unlock,
        Action::Wait,
    ];

    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
            Action::Pickup => "pickup",
            Action::Unlock => "unlock",
            Action::Wait => "wait",
        }
    }

    pub fn parse(s: &str) -> Option<Action> {
        let s = s.trim().to_ascii_lowercase();
        Action::ALL.into_iter().find(|a| a.as_str() == s)
    }

    /// Target cell of a move, or `None` for non-moves and moves off the grid.
    pub fn step(&self, (x, y): Pos) -> Option<Pos> {
        match self {
            Action::Up => Some((x, y.checked_sub(1)?)),
            Action::Down => Some((x, y + 1)),
            Action::Left => Some((x.checked_sub(1)?, y)),
            Action::Right => Some((x + 1, y)),
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Static layout of a task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub walls: Vec<Vec<bool>>,
    pub start: Pos,
    pub key: Pos,
    pub door: Pos,
    pub goal: Pos,
}

impl Layout {
    /// Parse a template, then move the agent and key to the given cells.
    pub fn from_rows(rows: &[&str], start: Pos, key: Pos) -> Result<Layout> {
        let mut walls = Vec::new();
        let (mut door, mut goal) = (None, None);
        for (y, row) in rows.iter().enumerate() {
            let mut line = Vec::new();
            for (x, c) in row.chars().enumerate() {
                line.push(c == '#');
                match c {
                    'D' => door = Some((x, y)),
                    'G' => goal = Some((x, y)),
                    '#' | '.' | 'A' | 'K' => {}
                    other => return Err(Error::InvalidArgument(format!("unknown grid cell {other:?}"))),
                }
            }
            walls.push(line);
        }
        let layout = Layout {
            walls,
            start,
            key,
            door: door.ok_or_else(|| Error::InvalidArgument("template has no door".into()))?,
            goal: goal.ok_or_else(|| Error::InvalidArgument("template has no goal".into()))?,
        };
        for (what, p) in [("start", start), ("key", key)] {
            if layout.is_wall(p) || p == layout.door || p == layout.goal {
                return Err(Error::InvalidArgument(format!("{what} {p:?} is not a free cell")));
            }
        }
        Ok(layout)
    }

    pub fn width(&self) -> usize {
        self.walls.first().map_or(0, |r| r.len())
    }

    pub fn height(&self) -> usize {
        self.walls.len()
    }

    pub fn is_wall(&self, (x, y): Pos) -> bool {
        self.walls.get(y).and_then(|r| r.get(x)).copied().unwrap_or(true)
    }
}

const TEMPLATE_S: [&str; 5] = ["#######", "#A..#G#", "#K..D.#", "#...#.#", "#######"];
const TEMPLATE_T: [&str; 5] = ["#########", "#A..#...#", "#K..D.#.#", "#...#.#G#", "#########"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub id: String,
    pub layout: Layout,
}

impl Task {
    pub fn description(&self) -> String {
        format!(
            "Reach the goal G on a {}x{} grid. A locked door D blocks the way; a key K lies on the floor.",
            self.layout.width(),
            self.layout.height()
        )
    }
}

/// The built-in task catalogue: `kd-01` .. `kd-10`. Tasks on the second
/// template put a dead end on the direct route to the goal.
pub fn catalogue() -> Vec<Task> {
    let spec: [(&str, &[&str], Pos, Pos); 10] = [
        ("kd-01", &TEMPLATE_S, (1, 1), (1, 2)),
        ("kd-02", &TEMPLATE_S, (1, 3), (2, 1)),
        ("kd-03", &TEMPLATE_S, (2, 2), (3, 3)),
        ("kd-04", &TEMPLATE_T, (1, 1), (1, 2)),
        ("kd-05", &TEMPLATE_T, (1, 3), (3, 1)),
        ("kd-06", &TEMPLATE_T, (2, 1), (2, 3)),
        ("kd-07", &TEMPLATE_S, (3, 3), (1, 1)),
        ("kd-08", &TEMPLATE_S, (1, 2), (3, 2)),
        ("kd-09", &TEMPLATE_T, (3, 1), (1, 3)),
        ("kd-10", &TEMPLATE_T, (2, 3), (1, 1)),
    ];
    spec.iter()
        .map(|(id, rows, start, key)| Task {
            id: id.to_string(),
            layout: Layout::from_rows(rows, *start, *key).expect("built-in templates are valid"),
        })
        .collect()
}

pub fn task(id: &str) -> Result<Task> {
    catalogue()
        .into_iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::NotFound(format!("key-door task {id}")))
}

pub fn default_train_tasks() -> Vec<String> {
    (1..=6).map(|i| format!("kd-{i:02}")).collect()
}

pub fn default_full_tasks() -> Vec<String> {
    (1..=10).map(|i| format!("kd-{i:02}")).collect()
}

/// Mutable game state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    pub pos: Pos,
    pub has_key: bool,
    pub door_open: bool,
}

#[derive(Debug, Clone)]
pub struct KeyDoor {
    pub layout: Layout,
    pub state: State,
}

pub const MSG_PICKUP: &str = "You picked up the key.";
pub const MSG_UNLOCK: &str = "The door is open.";
pub const MSG_WAIT: &str = "You wait.";
pub const MSG_DONE: &str = "You reached the goal. Task complete.";

impl KeyDoor {
    pub fn new(layout: Layout) -> Self {
        let state = State {
            pos: layout.start,
            has_key: false,
            door_open: false,
        };
        KeyDoor { layout, state }
    }

    pub fn passable(&self, p: Pos, door_open: bool) -> bool {
        !self.layout.is_wall(p) && (p != self.layout.door || door_open)
    }

    pub fn at_goal(&self) -> bool {
        self.state.pos == self.layout.goal
    }

    pub fn adjacent_to_door(&self) -> bool {
        let (x, y) = self.state.pos;
        let (dx, dy) = self.layout.door;
        x.abs_diff(dx) + y.abs_diff(dy) == 1
    }

    /// Apply one action and describe the outcome.
    pub fn apply(&mut self, action: Action) -> String {
        match action {
            Action::Pickup => {
                if !self.state.has_key && self.state.pos == self.layout.key {
                    self.state.has_key = true;
                    MSG_PICKUP.to_string()
                } else {
                    "There is nothing to pick up here.".to_string()
                }
            }
            Action::Unlock => {
                if self.state.has_key && !self.state.door_open && self.adjacent_to_door() {
                    self.state.door_open = true;
                    MSG_UNLOCK.to_string()
                } else {
                    "Nothing happens.".to_string()
                }
            }
            Action::Wait => MSG_WAIT.to_string(),
            mv => match mv.step(self.state.pos) {
                Some(p) if p == self.layout.door && !self.state.door_open => "The door is locked.".to_string(),
                Some(p) if self.passable(p, self.state.door_open) => {
                    self.state.pos = p;
                    format!("You move {mv}.")
                }
                _ => "You bump into a wall.".to_string(),
            },
        }
    }

    /// Text observation: position, item states and a map.
    pub fn observe(&self) -> String {
        let s = &self.state;
        let l = &self.layout;
        let key = if s.has_key {
            "You hold the key.".to_string()
        } else {
            format!("The key is at {:?}.", l.key)
        };
        let door = if s.door_open { "open" } else { "locked" };
        format!(
            "You are at {:?}. {key} The door at {:?} is {door}. The goal is at {:?}. Map: {}",
            s.pos,
            l.door,
            l.goal,
            self.render_map()
        )
    }

    pub fn render_map(&self) -> String {
        let mut rows = Vec::new();
        for y in 0..self.layout.height() {
            let mut row = String::new();
            for x in 0..self.layout.width() {
                let p = (x, y);
                let c = if p == self.state.pos {
                    'A'
                } else if self.layout.is_wall(p) {
                    '#'
                } else if p == self.layout.door && !self.state.door_open {
                    'D'
                } else if p == self.layout.goal {
                    'G'
                } else if p == self.layout.key && !self.state.has_key {
                    'K'
                } else {
                    '.'
                };
                row.push(c);
            }
            rows.push(row);
        }
        rows.join("/")
    }

    /// First move of a shortest path to `target` over currently passable
    /// cells, trying moves in [`Action::MOVES`] order. `None` if unreachable
    /// or already there.
    pub fn bfs_first_move(&self, target: Pos) -> Option<Action> {
        let from = self.state.pos;
        if from == target {
            return None;
        }
        let open = self.state.door_open;
        let mut first: std::collections::HashMap<Pos, Action> = std::collections::HashMap::new();
        let mut queue = VecDeque::new();
        for a in Action::MOVES {
            if let Some(p) = a.step(from) {
                if self.passable(p, open) && !first.contains_key(&p) {
                    first.insert(p, a);
                    queue.push_back(p);
                }
            }
        }
        while let Some(p) = queue.pop_front() {
            if p == target {
                return first.get(&p).copied();
            }
            let via = first[&p];
            for a in Action::MOVES {
                if let Some(q) = a.step(p) {
                    if q != from && self.passable(q, open) && !first.contains_key(&q) {
                        first.insert(q, via);
                        queue.push_back(q);
                    }
                }
            }
        }
        None
    }
}
