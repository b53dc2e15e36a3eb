//! Observable world state shared by the task model, the simulator and the planners.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Index of an action in the action table.
///
/// `0` is the idle sentinel, `1..=N` are base actions and `N+1..=2N` are the
/// recovery actions (`recovery id = base id + N`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u16);

impl ActionId {
    pub const IDLE: ActionId = ActionId(0);

    pub fn is_idle(self) -> bool {
        self.0 == 0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_idle() {
            f.write_str("idle")
        } else {
            write!(f, "A{}", self.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    Human,
    Robot,
}

/// Per-action execution indicator: `-1` failed, `0` not attempted, `+1` completed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskState(Vec<i8>);

impl TaskState {
    pub fn new(n: usize) -> Self {
        TaskState(vec![0; n])
    }

    /// Builds a task state from raw indicator values, rejecting anything outside `{-1, 0, 1}`.
    pub fn from_values(values: Vec<i8>) -> Option<Self> {
        values
            .iter()
            .all(|v| (-1..=1).contains(v))
            .then_some(TaskState(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Value for base action `id` (1-based).
    pub fn get(&self, id: ActionId) -> i8 {
        self.0[id.index() - 1]
    }

    pub fn set(&mut self, id: ActionId, value: i8) {
        debug_assert!((-1..=1).contains(&value));
        self.0[id.index() - 1] = value;
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn is_complete(&self) -> bool {
        self.0.iter().all(|&v| v == 1)
    }

    pub fn completed_count(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }
}

/// The human's current action as seen by the robot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanAction {
    Unknown,
    Idle,
    Action(ActionId),
}

/// Observable DE-MDP state `(s_a, a^h, t^h, t^r, d)` plus the robot's current action.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub task: TaskState,
    pub human_action: HumanAction,
    /// Steps since the current human action started.
    pub t_h: u32,
    /// Steps since the current robot action started; zero while the robot idles.
    pub t_r: u32,
    pub detected: bool,
    pub robot_action: ActionId,
}

impl WorldState {
    pub fn initial(n: usize) -> Self {
        WorldState {
            task: TaskState::new(n),
            human_action: HumanAction::Unknown,
            t_h: 0,
            t_r: 0,
            detected: false,
            robot_action: ActionId::IDLE,
        }
    }

    /// True when both agents are executing the same joint action.
    pub fn joint_in_progress(&self) -> bool {
        matches!(self.human_action, HumanAction::Action(a) if a == self.robot_action && !a.is_idle())
    }
}
