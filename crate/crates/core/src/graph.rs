//! Exhaustive decision graph for the deterministic setting, backward-induction solver and an
//! independent expectimax oracle.
//!
//! Nodes are robot decision points keyed by the full simulator state ([`SimKey`]); an edge is a
//! robot action and leads to a distribution over (elapsed steps, next node or terminal). Human
//! choices made in between are expanded as chance branches with the human model's weights.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{CheckedAdd, CheckedMul, One, Signed, ToPrimitive, Zero};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demdp::{effective_cv, effective_p_fail, DemdpError, HumanModel, NominalChance, Pending, SimCore, SimKey};
use crate::htm::Htm;
use crate::policy::{greedy_choice, RobotPolicy};
use crate::scenario::ScenarioConfig;
use crate::state::ActionId;

pub type Prob = Ratio<u128>;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph solving needs a deterministic scenario: {0}; use the learned policy for this regime")]
    Stochastic(String),
    #[error("state budget exceeded: {reached} nodes reached (limit {limit})")]
    Budget { limit: usize, reached: usize },
    #[error("cycle through node {0}: state canonicalization is not well founded")]
    Cycle(usize),
    #[error("branch probability overflowed 128-bit rationals")]
    Overflow,
    #[error("depth cap {0} exceeded")]
    Depth(usize),
    #[error(transparent)]
    Sim(#[from] DemdpError),
    #[error("policy file: {0}")]
    Format(String),
}

/// Rejects scenarios whose dynamics are not deterministic.
pub fn check_deterministic(htm: &Htm, cfg: &ScenarioConfig) -> Result<(), GraphError> {
    if cfg.p_change > 0.0 {
        return Err(GraphError::Stochastic(format!("p_change = {} > 0", cfg.p_change)));
    }
    for a in htm.actions() {
        let id = a.id;
        let p = effective_p_fail(htm, cfg, id);
        if p > 0.0 {
            return Err(GraphError::Stochastic(format!("p_fail = {p} > 0 for {id}")));
        }
        let cv = effective_cv(htm, cfg, id);
        if cv > 0.0 {
            return Err(GraphError::Stochastic(format!("duration_cv = {cv} > 0 for {id}")));
        }
    }
    Ok(())
}

/// Successor of a robot choice.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub prob: Prob,
    pub dt: u64,
    /// `None` when the task is finished.
    pub next: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub action: ActionId,
    pub branches: Vec<Branch>,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub key: SimKey,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub branches: usize,
    pub build_ms: f64,
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "nodes={} edges={} branches={} build_ms={:.1}", self.nodes, self.edges, self.branches, self.build_ms)
    }
}

#[derive(Debug, Clone)]
pub struct DecisionGraph {
    pub nodes: Vec<Node>,
    /// Distribution over the first decision point (the human moves first).
    pub root: Vec<Branch>,
    pub stats: GraphStats,
}

pub struct GraphOptions {
    pub max_nodes: usize,
    pub human: Arc<dyn HumanModel>,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions { max_nodes: 2_000_000, human: Arc::new(crate::demdp::UniformHuman) }
    }
}

struct Builder<'a> {
    human: &'a dyn HumanModel,
    max_nodes: usize,
    index: HashMap<SimKey, u32>,
    nodes: Vec<Node>,
    todo: Vec<(u32, SimCore)>,
}

impl Builder<'_> {
    /// Runs the dynamics from `core` until the robot must decide or the task ends, branching
    /// on every human choice.
    fn settle(
        &self,
        mut core: SimCore,
        prob: Prob,
        mut dt: u64,
        out: &mut Vec<(Option<SimCore>, Prob, u64)>,
    ) -> Result<(), GraphError> {
        loop {
            match core.pending() {
                Pending::Done => {
                    out.push((None, prob, dt));
                    return Ok(());
                }
                Pending::Robot => {
                    out.push((Some(core), prob, dt));
                    return Ok(());
                }
                Pending::Advance => {
                    let t0 = core.now();
                    core.advance(&mut NominalChance)?;
                    dt += core.now() - t0;
                }
                Pending::Human => {
                    let options = core.human_options();
                    let dist: Vec<_> = self
                        .human
                        .distribution(&core.world_state(), &options)
                        .into_iter()
                        .filter(|&(_, w)| w > 0)
                        .collect();
                    if dist.is_empty() {
                        core.apply_human(ActionId::IDLE, &mut NominalChance)?;
                        continue;
                    }
                    let total: u64 = dist.iter().map(|(_, w)| w).sum();
                    for (a, w) in dist {
                        let mut c = core.clone();
                        c.apply_human(a, &mut NominalChance)?;
                        let p = prob.checked_mul(&Prob::new(w as u128, total as u128)).ok_or(GraphError::Overflow)?;
                        self.settle(c, p, dt, out)?;
                    }
                    return Ok(());
                }
            }
        }
    }

    fn intern(&mut self, core: SimCore) -> Result<u32, GraphError> {
        let key = core.key();
        if let Some(&id) = self.index.get(&key) {
            return Ok(id);
        }
        if self.nodes.len() >= self.max_nodes {
            return Err(GraphError::Budget { limit: self.max_nodes, reached: self.nodes.len() });
        }
        let id = self.nodes.len() as u32;
        self.index.insert(key.clone(), id);
        self.nodes.push(Node { key, edges: Vec::new() });
        self.todo.push((id, core));
        Ok(id)
    }

    fn branches(&mut self, core: SimCore) -> Result<Vec<Branch>, GraphError> {
        let mut raw = Vec::new();
        self.settle(core, Prob::one(), 0, &mut raw)?;
        let mut merged: Vec<Branch> = Vec::with_capacity(raw.len());
        for (c, prob, dt) in raw {
            let next = match c {
                Some(c) => Some(self.intern(c)?),
                None => None,
            };
            match merged.iter_mut().find(|b| b.next == next && b.dt == dt) {
                Some(b) => b.prob = b.prob.checked_add(&prob).ok_or(GraphError::Overflow)?,
                None => merged.push(Branch { prob, dt, next }),
            }
        }
        Ok(merged)
    }
}

/// Enumerates every reachable robot decision point under nominal durations.
pub fn build_graph(htm: Arc<Htm>, cfg: &ScenarioConfig, opts: &GraphOptions) -> Result<DecisionGraph, GraphError> {
    check_deterministic(&htm, cfg)?;
    let start = Instant::now();
    let mut b = Builder {
        human: opts.human.as_ref(),
        max_nodes: opts.max_nodes,
        index: HashMap::new(),
        nodes: Vec::new(),
        todo: Vec::new(),
    };
    let root = b.branches(SimCore::new(htm, cfg.clone()))?;
    while let Some((id, core)) = b.todo.pop() {
        let mut edges = Vec::new();
        for a in core.robot_options() {
            let mut c = core.clone();
            c.apply_robot(a, &mut NominalChance)?;
            edges.push(Edge { action: a, branches: b.branches(c)? });
        }
        if edges.is_empty() {
            return Err(DemdpError::Deadlock.into());
        }
        b.nodes[id as usize].edges = edges;
    }
    let edges = b.nodes.iter().map(|n| n.edges.len()).sum();
    let branches = b.nodes.iter().flat_map(|n| &n.edges).map(|e| e.branches.len()).sum();
    let stats =
        GraphStats { nodes: b.nodes.len(), edges, branches, build_ms: start.elapsed().as_secs_f64() * 1000.0 };
    log::info!("decision graph: {stats}");
    Ok(DecisionGraph { nodes: b.nodes, root, stats })
}

/// Arithmetic used by the solver: floats for large graphs, exact rationals for checks.
pub trait Value: Clone + fmt::Debug {
    fn zero() -> Self;
    fn steps(dt: u64) -> Self;
    fn prob(p: &Prob) -> Self;
    fn add(&self, other: &Self) -> Self;
    fn mul(&self, other: &Self) -> Self;
    /// Strictly better (smaller), with any rounding slack the representation needs.
    fn less(&self, other: &Self) -> bool;
    fn as_f64(&self) -> f64;
}

impl Value for f64 {
    fn zero() -> Self {
        0.0
    }
    fn steps(dt: u64) -> Self {
        dt as f64
    }
    fn prob(p: &Prob) -> Self {
        *p.numer() as f64 / *p.denom() as f64
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn less(&self, other: &Self) -> bool {
        *self < *other - 1e-9 * other.abs().max(1.0)
    }
    fn as_f64(&self) -> f64 {
        *self
    }
}

impl Value for BigRational {
    fn zero() -> Self {
        Zero::zero()
    }
    fn steps(dt: u64) -> Self {
        BigRational::from_integer(BigInt::from(dt))
    }
    fn prob(p: &Prob) -> Self {
        BigRational::new(BigInt::from(*p.numer()), BigInt::from(*p.denom()))
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn less(&self, other: &Self) -> bool {
        self < other
    }
    fn as_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
}

/// How chance branches are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Expectation over the human's choices (the robot cannot control them).
    #[default]
    Expected,
    /// Best case over the human's choices: plain shortest path in the weighted graph.
    Optimistic,
}

#[derive(Debug, Clone)]
pub struct Solution<V> {
    pub values: Vec<V>,
    pub actions: Vec<ActionId>,
    pub root: V,
}

fn aggregate<V: Value>(branches: &[Branch], values: &[Option<V>], objective: Objective) -> V {
    let term = |b: &Branch| {
        let tail = b.next.map_or_else(V::zero, |n| values[n as usize].clone().expect("successor solved first"));
        V::steps(b.dt).add(&tail)
    };
    match objective {
        Objective::Expected => branches.iter().fold(V::zero(), |acc, b| acc.add(&V::prob(&b.prob).mul(&term(b)))),
        Objective::Optimistic => branches
            .iter()
            .map(term)
            .reduce(|best, v| if v.less(&best) { v } else { best })
            .unwrap_or_else(V::zero),
    }
}

/// Nodes in an order where every successor precedes its predecessors.
fn post_order(g: &DecisionGraph) -> Result<Vec<u32>, GraphError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut mark = vec![Mark::New; g.nodes.len()];
    let mut order = Vec::with_capacity(g.nodes.len());
    for start in 0..g.nodes.len() {
        if mark[start] != Mark::New {
            continue;
        }
        let mut stack: Vec<(u32, usize)> = vec![(start as u32, 0)];
        mark[start] = Mark::Open;
        while let Some(&mut (n, ref mut next)) = stack.last_mut() {
            let succ: Vec<u32> =
                g.nodes[n as usize].edges.iter().flat_map(|e| e.branches.iter().filter_map(|b| b.next)).collect();
            if let Some(&s) = succ.get(*next) {
                *next += 1;
                match mark[s as usize] {
                    Mark::New => {
                        mark[s as usize] = Mark::Open;
                        stack.push((s, 0));
                    }
                    Mark::Open => return Err(GraphError::Cycle(s as usize)),
                    Mark::Done => {}
                }
            } else {
                mark[n as usize] = Mark::Done;
                order.push(n);
                stack.pop();
            }
        }
    }
    Ok(order)
}

/// Backward induction: min over robot actions, ties to the lowest id.
pub fn solve_with<V: Value>(g: &DecisionGraph, objective: Objective) -> Result<Solution<V>, GraphError> {
    let mut values: Vec<Option<V>> = vec![None; g.nodes.len()];
    let mut actions = vec![ActionId::IDLE; g.nodes.len()];
    for n in post_order(g)? {
        let node = &g.nodes[n as usize];
        let mut best: Option<(ActionId, V)> = None;
        for e in &node.edges {
            let v = aggregate(&e.branches, &values, objective);
            if best.as_ref().is_none_or(|(_, b)| v.less(b)) {
                best = Some((e.action, v));
            }
        }
        let (a, v) = best.expect("decision node has an edge");
        actions[n as usize] = a;
        values[n as usize] = Some(v);
    }
    let root = aggregate(&g.root, &values, objective);
    Ok(Solution { values: values.into_iter().map(|v| v.expect("all nodes solved")).collect(), actions, root })
}

/// Largest |V(n) - min_a Q(n, a)| over all nodes, in exact arithmetic.
pub fn bellman_residual(g: &DecisionGraph, values: &[BigRational]) -> BigRational {
    let opt: Vec<Option<BigRational>> = values.iter().cloned().map(Some).collect();
    let mut worst = <BigRational as Zero>::zero();
    for (n, node) in g.nodes.iter().enumerate() {
        let q = node
            .edges
            .iter()
            .map(|e| aggregate(&e.branches, &opt, Objective::Expected))
            .min()
            .expect("decision node has an edge");
        let r = (&values[n] - q).abs();
        if r > worst {
            worst = r;
        }
    }
    worst
}

/// Look-up table from state key to robot action, with expected remaining steps.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    pub table: HashMap<SimKey, (ActionId, f64)>,
    pub root_value: f64,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    root_value: f64,
    actions: std::collections::BTreeMap<String, u16>,
    values: std::collections::BTreeMap<String, f64>,
}

impl TabularPolicy {
    pub fn from_solution<V: Value>(g: &DecisionGraph, sol: &Solution<V>) -> Self {
        let table = g
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.key.clone(), (sol.actions[i], sol.values[i].as_f64())))
            .collect();
        TabularPolicy { table, root_value: sol.root.as_f64() }
    }

    pub fn action(&self, key: &SimKey) -> Option<ActionId> {
        self.table.get(key).map(|&(a, _)| a)
    }

    pub fn value(&self, key: &SimKey) -> Option<f64> {
        self.table.get(key).map(|&(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// JSON document with sorted keys, so exports are byte-stable.
    pub fn export(&self) -> String {
        let mut file = PolicyFile { root_value: self.root_value, actions: Default::default(), values: Default::default() };
        for (k, &(a, v)) in &self.table {
            file.actions.insert(k.to_string(), a.0);
            file.values.insert(k.to_string(), v);
        }
        serde_json::to_string_pretty(&file).expect("serializable")
    }

    pub fn import(text: &str) -> Result<Self, GraphError> {
        let file: PolicyFile = serde_json::from_str(text).map_err(|e| GraphError::Format(e.to_string()))?;
        let mut table = HashMap::new();
        for (k, a) in file.actions {
            let v = file.values.get(&k).copied().unwrap_or(f64::NAN);
            let key: SimKey = k.parse().map_err(|e| GraphError::Format(format!("key {k:?}: {e}")))?;
            table.insert(key, (ActionId(a), v));
        }
        Ok(TabularPolicy { table, root_value: file.root_value })
    }
}

impl RobotPolicy for TabularPolicy {
    fn name(&self) -> &str {
        "graph"
    }

    /// States outside the table (only reachable if the rollout model differs from the one the
    /// graph was built with) fall back to the greedy rule.
    fn choose(&self, core: &SimCore, feasible: &[ActionId], _rng: &mut dyn RngCore) -> ActionId {
        match self.action(&core.key()) {
            Some(a) if feasible.contains(&a) => a,
            _ => {
                log::debug!("state {} not in policy table", core.key());
                greedy_choice(core.htm(), feasible)
            }
        }
    }
}

/// Builds and solves with the default expected-value objective.
pub fn plan(htm: Arc<Htm>, cfg: &ScenarioConfig, opts: &GraphOptions) -> Result<(TabularPolicy, GraphStats), GraphError> {
    let g = build_graph(htm, cfg, opts)?;
    let sol = solve_with::<f64>(&g, Objective::Expected)?;
    Ok((TabularPolicy::from_solution(&g, &sol), g.stats))
}

/// Brute-force optimal expected makespan by plain recursion on the simulator, sharing no code
/// with the graph builder. Exponential; meant for tiny instances.
pub fn expectimax_oracle(
    htm: Arc<Htm>,
    cfg: &ScenarioConfig,
    human: &dyn HumanModel,
    depth_cap: usize,
) -> Result<BigRational, GraphError> {
    check_deterministic(&htm, cfg)?;
    fn go(core: &SimCore, human: &dyn HumanModel, depth: usize) -> Result<BigRational, GraphError> {
        if depth == 0 {
            return Err(GraphError::Depth(0));
        }
        match core.pending() {
            Pending::Done => Ok(<BigRational as Zero>::zero()),
            Pending::Advance => {
                let mut c = core.clone();
                c.advance(&mut NominalChance)?;
                let dt = BigRational::from_integer(BigInt::from(c.now() - core.now()));
                Ok(dt + go(&c, human, depth - 1)?)
            }
            Pending::Robot => {
                let mut best: Option<BigRational> = None;
                for a in core.robot_options() {
                    let mut c = core.clone();
                    c.apply_robot(a, &mut NominalChance)?;
                    let v = go(&c, human, depth - 1)?;
                    if best.as_ref().is_none_or(|b| v < *b) {
                        best = Some(v);
                    }
                }
                best.ok_or(GraphError::Sim(DemdpError::Deadlock))
            }
            Pending::Human => {
                let options = core.human_options();
                let dist = human.distribution(&core.world_state(), &options);
                let total: u64 = dist.iter().map(|(_, w)| w).sum();
                if total == 0 {
                    let mut c = core.clone();
                    c.apply_human(ActionId::IDLE, &mut NominalChance)?;
                    return go(&c, human, depth - 1);
                }
                let mut sum = <BigRational as Zero>::zero();
                for (a, w) in dist.into_iter().filter(|&(_, w)| w > 0) {
                    let mut c = core.clone();
                    c.apply_human(a, &mut NominalChance)?;
                    let p = BigRational::new(BigInt::from(w), BigInt::from(total));
                    sum += p * go(&c, human, depth - 1)?;
                }
                Ok(sum)
            }
        }
    }
    go(&SimCore::new(htm, cfg.clone()), human, depth_cap).map_err(|e| match e {
        GraphError::Depth(_) => GraphError::Depth(depth_cap),
        e => e,
    })
}
