//! Hierarchical task model: the action table, the sequential/independent/parallel
//! tree over it, and the precedence and feasibility rules derived from the tree.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::state::{ActionId, Agent, HumanAction, TaskState, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    HumanOnly = 0,
    RobotOnly = 1,
    Either = 2,
    Joint = 3,
}

impl Capability {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Capability::HumanOnly),
            1 => Some(Capability::RobotOnly),
            2 => Some(Capability::Either),
            3 => Some(Capability::Joint),
            _ => None,
        }
    }

    pub fn permits(self, agent: Agent) -> bool {
        matches!(
            (self, agent),
            (Capability::Either | Capability::Joint, _)
                | (Capability::HumanOnly, Agent::Human)
                | (Capability::RobotOnly, Agent::Robot)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Capability::HumanOnly => "human_only",
            Capability::RobotOnly => "robot_only",
            Capability::Either => "either",
            Capability::Joint => "joint",
        }
    }
}

/// One assembly action `(o_j, δ_j, p^f_j)`. Durations are integer multiples of the base step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub id: ActionId,
    pub name: String,
    pub capability: Capability,
    pub duration_h: u32,
    pub duration_r: u32,
    /// Coefficient of variation of the duration model; `None` defers to the scenario.
    pub duration_cv: Option<f64>,
    pub p_fail: f64,
    pub recovery_of: Option<ActionId>,
}

impl ActionSpec {
    pub fn new(id: u16, name: impl Into<String>, capability: Capability, duration_h: u32, duration_r: u32) -> Self {
        ActionSpec {
            id: ActionId(id),
            name: name.into(),
            capability,
            duration_h,
            duration_r,
            duration_cv: None,
            p_fail: 0.0,
            recovery_of: None,
        }
    }

    pub fn with_p_fail(mut self, p_fail: f64) -> Self {
        self.p_fail = p_fail;
        self
    }

    pub fn is_recovery(&self) -> bool {
        self.recovery_of.is_some()
    }

    /// Nominal duration when executed by `agent`.
    pub fn duration(&self, agent: Agent) -> u32 {
        match agent {
            Agent::Human => self.duration_h,
            Agent::Robot => self.duration_r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Sequential,
    Independent,
    Parallel,
}

impl NodeKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "sequential" => Some(NodeKind::Sequential),
            "independent" => Some(NodeKind::Independent),
            "parallel" => Some(NodeKind::Parallel),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            NodeKind::Sequential => "sequential",
            NodeKind::Independent => "independent",
            NodeKind::Parallel => "parallel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskTree {
    Leaf(ActionId),
    Node { kind: NodeKind, children: Vec<TaskTree> },
}

impl TaskTree {
    pub fn leaf(id: u16) -> Self {
        TaskTree::Leaf(ActionId(id))
    }

    pub fn node(kind: NodeKind, children: Vec<TaskTree>) -> Self {
        TaskTree::Node { kind, children }
    }

    fn collect_leaves(&self, out: &mut Vec<ActionId>) {
        match self {
            TaskTree::Leaf(id) => out.push(*id),
            TaskTree::Node { children, .. } => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    pub fn leaves(&self) -> Vec<ActionId> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            TaskTree::Leaf(id) => json!({ "leaf": id.0 }),
            TaskTree::Node { kind, children } => json!({
                "kind": kind.name(),
                "children": children.iter().map(TaskTree::to_json).collect::<Vec<_>>(),
            }),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum HtmError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("duplicate action id {0}")]
    DuplicateAction(u16),
    #[error("joint action {id} has duration_h={duration_h} but duration_r={duration_r}")]
    JointDurationMismatch { id: u16, duration_h: u32, duration_r: u32 },
    #[error("unknown node kind `{0}`")]
    UnknownNodeKind(String),
    #[error("unknown capability `{0}`")]
    UnknownCapability(String),
    #[error("task model has no actions")]
    Empty,
    #[error("action {id}: {message}")]
    InvalidAction { id: u16, message: String },
    #[error("leaf references unknown action {0}")]
    UnknownLeaf(u16),
    #[error("action {0} appears in more than one leaf")]
    DuplicateLeaf(u16),
    #[error("base action {0} does not appear in any leaf")]
    MissingLeaf(u16),
    #[error("recovery action {0} may not appear as a leaf")]
    RecoveryLeaf(u16),
    #[error("node with no children")]
    EmptyNode,
    #[error("unknown action id {0}")]
    UnknownAction(u16),
    #[error("action {0} is not a base action")]
    NotBaseAction(u16),
}

/// Validated hierarchical task model. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Htm {
    /// Indexed by `id - 1` for ids `1..=2N`.
    actions: Vec<ActionSpec>,
    n: usize,
    root: TaskTree,
    /// Base actions that must be completed before each base action may start.
    requires: Vec<Vec<ActionId>>,
}

impl Htm {
    /// Validates a tree over `base` actions. Recovery actions listed in `extra_recovery`
    /// override the defaults; the rest are generated from their base action.
    pub fn new(base: Vec<ActionSpec>, root: TaskTree) -> Result<Self, HtmError> {
        Self::with_recovery(base, Vec::new(), root)
    }

    pub fn with_recovery(mut base: Vec<ActionSpec>, recovery: Vec<ActionSpec>, root: TaskTree) -> Result<Self, HtmError> {
        if base.is_empty() {
            return Err(HtmError::Empty);
        }
        base.sort_by_key(|a| a.id);
        for pair in base.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(HtmError::DuplicateAction(pair[0].id.0));
            }
        }
        let n = base.len();
        for (i, a) in base.iter().enumerate() {
            if a.id.index() != i + 1 {
                return Err(HtmError::InvalidAction {
                    id: a.id.0,
                    message: format!("base action ids must be contiguous 1..={n}"),
                });
            }
            if a.recovery_of.is_some() {
                return Err(HtmError::InvalidAction { id: a.id.0, message: "base action marked as recovery".into() });
            }
            validate_action(a)?;
        }

        let mut recovery_slots: Vec<Option<ActionSpec>> = vec![None; n];
        for r in recovery {
            let id = r.id.index();
            if id <= n || id > 2 * n {
                return Err(HtmError::InvalidAction {
                    id: r.id.0,
                    message: format!("recovery ids must lie in {}..={}", n + 1, 2 * n),
                });
            }
            let expected = ActionId((id - n) as u16);
            if r.recovery_of.is_some_and(|b| b != expected) {
                return Err(HtmError::InvalidAction {
                    id: r.id.0,
                    message: format!("recovery id must equal base id + {n}"),
                });
            }
            if recovery_slots[id - n - 1].is_some() {
                return Err(HtmError::DuplicateAction(r.id.0));
            }
            let r = ActionSpec { recovery_of: Some(expected), ..r };
            validate_action(&r)?;
            recovery_slots[id - n - 1] = Some(r);
        }

        let mut actions = base;
        for (i, slot) in recovery_slots.into_iter().enumerate() {
            let b = &actions[i];
            let r = slot.unwrap_or_else(|| ActionSpec {
                id: ActionId((n + i + 1) as u16),
                name: format!("recover {}", b.name),
                recovery_of: Some(b.id),
                ..b.clone()
            });
            actions.push(r);
        }

        // Every base id in exactly one leaf.
        let mut seen = vec![false; n];
        check_tree(&root, n, &mut seen)?;
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(HtmError::MissingLeaf((missing + 1) as u16));
        }

        let mut requires = vec![Vec::new(); n];
        collect_requirements(&root, &[], &mut requires);
        for r in &mut requires {
            r.sort();
            r.dedup();
        }

        Ok(Htm { actions, n, root, requires })
    }

    /// Number of base actions `N`.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn root(&self) -> &TaskTree {
        &self.root
    }

    /// Every action, base then recovery.
    pub fn actions(&self) -> &[ActionSpec] {
        &self.actions
    }

    pub fn base_actions(&self) -> &[ActionSpec] {
        &self.actions[..self.n]
    }

    pub fn action(&self, id: ActionId) -> Option<&ActionSpec> {
        if id.is_idle() {
            return None;
        }
        self.actions.get(id.index() - 1)
    }

    /// Panicking accessor for ids already known to be valid.
    pub fn spec(&self, id: ActionId) -> &ActionSpec {
        &self.actions[id.index() - 1]
    }

    pub fn is_base(&self, id: ActionId) -> bool {
        !id.is_idle() && id.index() <= self.n
    }

    /// The base action an id stands for (itself for base actions).
    pub fn base_of(&self, id: ActionId) -> ActionId {
        if id.index() > self.n {
            ActionId((id.index() - self.n) as u16)
        } else {
            id
        }
    }

    pub fn recovery_of_base(&self, base: ActionId) -> ActionId {
        ActionId((base.index() + self.n) as u16)
    }

    /// Largest action id, i.e. `2N`.
    pub fn max_id(&self) -> usize {
        2 * self.n
    }

    /// Ids of actions the agent may ever perform, idle first (`A` for the robot, `A_h` for the human).
    pub fn agent_actions(&self, agent: Agent) -> Vec<ActionId> {
        std::iter::once(ActionId::IDLE)
            .chain(self.actions.iter().filter(|a| a.capability.permits(agent)).map(|a| a.id))
            .collect()
    }

    /// `N_r`: robot-performable actions plus idle.
    pub fn n_robot_actions(&self) -> usize {
        self.agent_actions(Agent::Robot).len()
    }

    /// `N_h`: human-performable actions plus idle.
    pub fn n_human_actions(&self) -> usize {
        self.agent_actions(Agent::Human).len()
    }

    pub fn requirements(&self, base: ActionId) -> &[ActionId] {
        &self.requires[base.index() - 1]
    }

    /// Whether every ordering constraint on base action `id` is met by `s`.
    pub fn precedence_satisfied(&self, s: &TaskState, id: ActionId) -> Result<bool, HtmError> {
        if id.is_idle() || id.index() > 2 * self.n {
            return Err(HtmError::UnknownAction(id.0));
        }
        if !self.is_base(id) {
            return Err(HtmError::NotBaseAction(id.0));
        }
        Ok(self.requirements_met(s, id))
    }

    fn requirements_met(&self, s: &TaskState, base: ActionId) -> bool {
        self.requires[base.index() - 1].iter().all(|&r| s.get(r) == 1)
    }

    /// Whether `id` could be started given task progress alone: not completed, not failed
    /// (unless `id` is its recovery), and precedence met.
    pub fn available(&self, s: &TaskState, id: ActionId) -> bool {
        if id.is_idle() {
            return true;
        }
        let base = self.base_of(id);
        let value = s.get(base);
        let status_ok = if self.is_base(id) { value == 0 } else { value == -1 };
        status_ok && self.requirements_met(s, base)
    }

    /// Joint actions and their recoveries.
    pub fn is_joint(&self, id: ActionId) -> bool {
        !id.is_idle() && self.spec(id).capability == Capability::Joint
    }

    /// Feasible action set `A_f` for `agent` in state `s`, sorted by id.
    pub fn feasible_actions(&self, s: &WorldState, agent: Agent) -> Vec<ActionId> {
        match agent {
            Agent::Robot => self.robot_feasible(s),
            Agent::Human => self.human_feasible(s),
        }
    }

    fn robot_feasible(&self, s: &WorldState) -> Vec<ActionId> {
        if !s.detected {
            return vec![ActionId::IDLE];
        }
        let human_current = match s.human_action {
            HumanAction::Action(a) => Some(a),
            _ => None,
        };
        if let Some(h) = human_current {
            if self.is_joint(h) {
                return vec![h];
            }
        }
        let mut out = Vec::new();
        if s.human_action != HumanAction::Idle {
            out.push(ActionId::IDLE);
        }
        out.extend(self.actions.iter().filter_map(|a| {
            let ok = matches!(a.capability, Capability::RobotOnly | Capability::Either)
                && Some(a.id) != human_current
                && self.available(&s.task, a.id);
            ok.then_some(a.id)
        }));
        out
    }

    fn human_feasible(&self, s: &WorldState) -> Vec<ActionId> {
        let mut out = vec![ActionId::IDLE];
        out.extend(self.actions.iter().filter_map(|a| {
            let ok = a.capability.permits(Agent::Human)
                && a.id != s.robot_action
                && self.available(&s.task, a.id);
            ok.then_some(a.id)
        }));
        out
    }

    /// Serialises to the JSON document format accepted by [`parse_htm`].
    pub fn to_document(&self) -> serde_json::Value {
        let actions: Vec<_> = self
            .actions
            .iter()
            .map(|a| {
                let mut v = json!({
                    "id": a.id.0,
                    "name": a.name,
                    "capability": a.capability.name(),
                    "duration_h": a.duration_h,
                    "duration_r": a.duration_r,
                    "p_fail": a.p_fail,
                });
                if let Some(cv) = a.duration_cv {
                    v["duration_cv"] = json!(cv);
                }
                if let Some(b) = a.recovery_of {
                    v["recovery_of"] = json!(b.0);
                }
                v
            })
            .collect();
        json!({ "actions": actions, "root": self.root.to_json() })
    }

    /// Copy of this model with every action's failure probability replaced.
    pub fn with_uniform_p_fail(&self, p_fail: f64) -> Htm {
        let mut out = self.clone();
        for a in &mut out.actions {
            a.p_fail = p_fail;
        }
        out
    }

    /// Set of distinct nominal robot durations, used by reports.
    pub fn robot_durations(&self) -> BTreeSet<u32> {
        self.base_actions()
            .iter()
            .filter(|a| a.capability.permits(Agent::Robot))
            .map(|a| a.duration_r)
            .collect()
    }
}

impl fmt::Display for Htm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn walk(t: &TaskTree, htm: &Htm, depth: usize, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match t {
                TaskTree::Leaf(id) => {
                    let a = htm.spec(*id);
                    writeln!(
                        f,
                        "{:indent$}{} {} [{}] h={} r={} p_fail={}",
                        "",
                        id,
                        a.name,
                        a.capability.name(),
                        a.duration_h,
                        a.duration_r,
                        a.p_fail,
                        indent = depth * 2
                    )
                }
                TaskTree::Node { kind, children } => {
                    writeln!(f, "{:indent$}{}", "", kind.name(), indent = depth * 2)?;
                    children.iter().try_for_each(|c| walk(c, htm, depth + 1, f))
                }
            }
        }
        walk(&self.root, self, 0, f)
    }
}

fn validate_action(a: &ActionSpec) -> Result<(), HtmError> {
    let err = |message: String| HtmError::InvalidAction { id: a.id.0, message };
    if !(0.0..=1.0).contains(&a.p_fail) {
        return Err(err(format!("p_fail {} outside [0, 1]", a.p_fail)));
    }
    if let Some(cv) = a.duration_cv {
        if !(cv >= 0.0 && cv.is_finite()) {
            return Err(err(format!("duration_cv {cv} must be finite and nonnegative")));
        }
    }
    if a.capability == Capability::Joint && a.duration_h != a.duration_r {
        return Err(HtmError::JointDurationMismatch { id: a.id.0, duration_h: a.duration_h, duration_r: a.duration_r });
    }
    if a.capability.permits(Agent::Human) && a.duration_h == 0 {
        return Err(err("duration_h must be at least 1".into()));
    }
    if a.capability.permits(Agent::Robot) && a.duration_r == 0 {
        return Err(err("duration_r must be at least 1".into()));
    }
    Ok(())
}

fn check_tree(t: &TaskTree, n: usize, seen: &mut [bool]) -> Result<(), HtmError> {
    match t {
        TaskTree::Leaf(id) => {
            let i = id.index();
            if i > n && i <= 2 * n {
                return Err(HtmError::RecoveryLeaf(id.0));
            }
            if i == 0 || i > n {
                return Err(HtmError::UnknownLeaf(id.0));
            }
            if std::mem::replace(&mut seen[i - 1], true) {
                return Err(HtmError::DuplicateLeaf(id.0));
            }
            Ok(())
        }
        TaskTree::Node { children, .. } => {
            if children.is_empty() {
                return Err(HtmError::EmptyNode);
            }
            children.iter().try_for_each(|c| check_tree(c, n, seen))
        }
    }
}

/// Walks the tree carrying the leaves that must already be complete; a sequential node
/// adds each child's leaves to the requirement of every later sibling.
fn collect_requirements(t: &TaskTree, inherited: &[ActionId], out: &mut [Vec<ActionId>]) {
    match t {
        TaskTree::Leaf(id) => out[id.index() - 1].extend_from_slice(inherited),
        TaskTree::Node { kind: NodeKind::Sequential, children } => {
            let mut acc = inherited.to_vec();
            for c in children {
                collect_requirements(c, &acc, out);
                acc.extend(c.leaves());
            }
        }
        TaskTree::Node { children, .. } => {
            children.iter().for_each(|c| collect_requirements(c, inherited, out));
        }
    }
}

// ---------------------------------------------------------------------------
// Document format

#[derive(Deserialize)]
struct HtmDoc {
    actions: Vec<ActionDoc>,
    root: NodeDoc,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CapabilityDoc {
    Code(u8),
    Name(String),
}

#[derive(Deserialize)]
struct ActionDoc {
    id: u16,
    #[serde(default)]
    name: Option<String>,
    capability: CapabilityDoc,
    #[serde(default)]
    duration_h: Option<u32>,
    #[serde(default)]
    duration_r: Option<u32>,
    #[serde(default)]
    duration_cv: Option<f64>,
    #[serde(default)]
    p_fail: Option<f64>,
    #[serde(default)]
    recovery_of: Option<u16>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NodeDoc {
    Leaf { leaf: u16 },
    Node { kind: String, children: Vec<NodeDoc> },
}

fn convert_node(doc: NodeDoc) -> Result<TaskTree, HtmError> {
    match doc {
        NodeDoc::Leaf { leaf } => Ok(TaskTree::Leaf(ActionId(leaf))),
        NodeDoc::Node { kind, children } => {
            let kind = NodeKind::parse(&kind).ok_or(HtmError::UnknownNodeKind(kind))?;
            let children = children.into_iter().map(convert_node).collect::<Result<_, _>>()?;
            Ok(TaskTree::Node { kind, children })
        }
    }
}

fn convert_action(doc: ActionDoc) -> Result<ActionSpec, HtmError> {
    let capability = match doc.capability {
        CapabilityDoc::Code(c) => Capability::from_code(c).ok_or_else(|| HtmError::UnknownCapability(c.to_string()))?,
        CapabilityDoc::Name(s) => match s.as_str() {
            "human_only" | "human" => Capability::HumanOnly,
            "robot_only" | "robot" => Capability::RobotOnly,
            "either" | "both" => Capability::Either,
            "joint" => Capability::Joint,
            _ => return Err(HtmError::UnknownCapability(s)),
        },
    };
    // An agent-incompatible duration may be omitted; a joint action may give just one.
    let (duration_h, duration_r) = match (doc.duration_h, doc.duration_r) {
        (Some(h), Some(r)) => (h, r),
        (Some(h), None) if !capability.permits(Agent::Robot) || capability == Capability::Joint => (h, h),
        (None, Some(r)) if !capability.permits(Agent::Human) || capability == Capability::Joint => (r, r),
        _ => {
            return Err(HtmError::InvalidAction { id: doc.id, message: "missing duration".into() });
        }
    };
    Ok(ActionSpec {
        id: ActionId(doc.id),
        name: doc.name.unwrap_or_else(|| format!("A{}", doc.id)),
        capability,
        duration_h,
        duration_r,
        duration_cv: doc.duration_cv,
        p_fail: doc.p_fail.unwrap_or(0.0),
        recovery_of: doc.recovery_of.map(ActionId),
    })
}

/// Parses and validates an HTM document.
pub fn parse_htm(text: &str) -> Result<Htm, HtmError> {
    let doc: HtmDoc = serde_json::from_str(text).map_err(|e| HtmError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let root = convert_node(doc.root)?;
    let mut base = Vec::new();
    let mut recovery = Vec::new();
    let mut ids = BTreeSet::new();
    for a in doc.actions {
        if !ids.insert(a.id) {
            return Err(HtmError::DuplicateAction(a.id));
        }
        let a = convert_action(a)?;
        if a.recovery_of.is_some() {
            recovery.push(a);
        } else {
            base.push(a);
        }
    }
    Htm::with_recovery(base, recovery, root)
}

/// Built-in chair assembly: four rails, a joint side transport, three screws placed by the
/// robot, screwing and seat placement by the human.
pub fn chair() -> Htm {
    use Capability::*;
    let rails = (1..=4).map(|i| ActionSpec::new(i, format!("place rail {i}"), Either, 10, 12));
    let screws = (6..=8).map(|i| ActionSpec::new(i, format!("place screw {}", i - 5), RobotOnly, 12, 12));
    let actions: Vec<_> = rails
        .chain([ActionSpec::new(5, "transport left side", Joint, 14, 14)])
        .chain(screws)
        .chain([
            ActionSpec::new(9, "tighten screws", HumanOnly, 30, 30),
            ActionSpec::new(10, "place seat", HumanOnly, 14, 14),
        ])
        .collect();
    let root = TaskTree::node(
        NodeKind::Sequential,
        vec![
            TaskTree::node(NodeKind::Independent, (1..=4).map(TaskTree::leaf).collect()),
            TaskTree::leaf(5),
            TaskTree::node(NodeKind::Independent, (6..=8).map(TaskTree::leaf).collect()),
            TaskTree::leaf(9),
            TaskTree::leaf(10),
        ],
    );
    Htm::new(actions, root).expect("built-in chair model is valid")
}
