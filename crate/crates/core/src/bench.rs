//! Random task generation, Monte-Carlo benchmark suites and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::demdp::Env;
use crate::graph::{plan, GraphError, GraphOptions};
use crate::htm::{ActionSpec, Capability, Htm, NodeKind, TaskTree};
use crate::policy::{evaluate_episodes, EpisodeResult, EvalError, GreedyPolicy, RandomPolicy, RobotPolicy, Stats};
use crate::rl::{train, TrainConfig, TrainError};
use crate::scenario::ScenarioConfig;

pub const MIN_DURATION: u32 = 4;
pub const MAX_DURATION: u32 = 16;
const MAX_DEPTH: usize = 4;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("random task size must be a positive multiple of 4, got {0}")]
    BadSize(usize),
    #[error("policy {policy} refused for scenario {scenario}: {reason}")]
    Refused { policy: String, scenario: String, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Random task of `n` actions: n/4 joint, n/2 robot-only, n/4 either, durations uniform in
/// [4, 16], random tree of depth at most 4.
pub fn generate_random_htm(n: usize, seed: u64) -> Result<Htm, BenchError> {
    if n == 0 || !n.is_multiple_of(4) || n > u16::MAX as usize / 2 {
        return Err(BenchError::BadSize(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut caps = Vec::with_capacity(n);
    caps.extend(std::iter::repeat_n(Capability::Joint, n / 4));
    caps.extend(std::iter::repeat_n(Capability::RobotOnly, n / 2));
    caps.extend(std::iter::repeat_n(Capability::Either, n / 4));
    caps.shuffle(&mut rng);
    let draw = |rng: &mut ChaCha8Rng| rng.random_range(MIN_DURATION..=MAX_DURATION);
    let actions: Vec<ActionSpec> = caps
        .iter()
        .enumerate()
        .map(|(i, &cap)| {
            let (h, r) = match cap {
                Capability::Either => (draw(&mut rng), draw(&mut rng)),
                _ => {
                    let d = draw(&mut rng);
                    (d, d)
                }
            };
            ActionSpec::new(i as u16 + 1, format!("a{}", i + 1), cap, h, r)
        })
        .collect();
    let mut ids: Vec<u16> = (1..=n as u16).collect();
    ids.shuffle(&mut rng);
    let root = random_tree(&ids, 1, &mut rng);
    Ok(Htm::new(actions, root).expect("generated task is well formed"))
}

fn random_kind(rng: &mut ChaCha8Rng) -> NodeKind {
    [NodeKind::Sequential, NodeKind::Independent, NodeKind::Parallel][rng.random_range(0..3)]
}

fn random_tree(ids: &[u16], depth: usize, rng: &mut ChaCha8Rng) -> TaskTree {
    if ids.len() == 1 {
        return TaskTree::leaf(ids[0]);
    }
    let kind = random_kind(rng);
    if depth >= MAX_DEPTH {
        return TaskTree::node(kind, ids.iter().map(|&i| TaskTree::leaf(i)).collect());
    }
    let groups = rng.random_range(2..=4.min(ids.len()));
    // Distinct cut points give non-empty groups.
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, ids.len() - 1, groups - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut children = Vec::with_capacity(groups);
    let mut start = 0;
    for end in cuts.into_iter().chain(std::iter::once(ids.len())) {
        children.push(random_tree(&ids[start..end], depth + 1, rng));
        start = end;
    }
    TaskTree::node(kind, children)
}

/// Policies the benchmark knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Graph,
    Rl,
    Greedy,
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::Rl, PolicyKind::Graph, PolicyKind::Greedy, PolicyKind::Random];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Graph => "graph",
            PolicyKind::Rl => "rl",
            PolicyKind::Greedy => "greedy",
            PolicyKind::Random => "random",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown policy {s:?}; expected graph, rl, greedy or random"))
    }
}

/// Builds (plans or trains) a policy for the scenario. The graph policy is refused unless the
/// scenario is deterministic.
pub fn build_policy(
    kind: PolicyKind,
    scenario: &Scenario,
    graph: &GraphOptions,
    train_cfg: &TrainConfig,
) -> Result<Arc<dyn RobotPolicy>, BenchError> {
    Ok(match kind {
        PolicyKind::Greedy => Arc::new(GreedyPolicy),
        PolicyKind::Random => Arc::new(RandomPolicy),
        PolicyKind::Graph => match plan(scenario.htm.clone(), &scenario.cfg, graph) {
            Ok((p, _)) => Arc::new(p),
            Err(GraphError::Stochastic(reason)) => {
                return Err(BenchError::Refused { policy: "graph".into(), scenario: scenario.name.clone(), reason })
            }
            Err(e) => return Err(e.into()),
        },
        PolicyKind::Rl => {
            let env = Env::new(scenario.htm.clone(), scenario.cfg.clone());
            Arc::new(train(&env, train_cfg)?.table)
        }
    })
}

/// One benchmark cell.
#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub scenario: String,
    pub policy: String,
    pub trials: u64,
    pub mean: f64,
    pub std: f64,
    pub records: Vec<EpisodeResult>,
}

impl BenchResult {
    pub fn stats(&self) -> Stats {
        Stats::from_makespans(self.records.iter().map(|r| r.makespan).collect())
    }
}

/// A named task under a named scenario.
#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    pub htm: Arc<Htm>,
    pub cfg: ScenarioConfig,
}

/// Runs every policy on the scenario. `seed` drives all per-trial seeds, so the results do not
/// depend on the number of worker threads.
pub fn run_benchmark(
    scenario: &Scenario,
    policies: &[(String, Arc<dyn RobotPolicy>)],
    trials: u64,
    seed: u64,
) -> Result<Vec<BenchResult>, BenchError> {
    let env = Env::new(scenario.htm.clone(), scenario.cfg.clone());
    policies
        .iter()
        .map(|(name, policy)| {
            let records = evaluate_episodes(policy.as_ref(), &env, trials.max(1), seed)?;
            let stats = Stats::from_makespans(records.iter().map(|r| r.makespan).collect());
            Ok(BenchResult {
                scenario: scenario.name.clone(),
                policy: name.clone(),
                trials: records.len() as u64,
                mean: stats.mean,
                std: stats.std,
                records,
            })
        })
        .collect()
}

pub const CSV_HEADER: [&str; 8] = ["scenario", "policy", "trial", "seed", "steps", "n_events", "n_changes", "n_failures"];

/// Per-trial records, one row each.
pub fn write_csv<W: std::io::Write>(results: &[BenchResult], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in results {
        for (i, t) in r.records.iter().enumerate() {
            w.write_record([
                r.scenario.clone(),
                r.policy.clone(),
                i.to_string(),
                t.seed.to_string(),
                t.makespan.to_string(),
                t.events.to_string(),
                t.changes.to_string(),
                t.failures.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cell(mean: f64, std: f64) -> String {
    format!("{mean:.1} [{std:.1}]")
}

/// Rows are policies, columns are scenarios, in order of first appearance.
pub fn summarize(results: &[BenchResult]) -> String {
    let mut scenarios: Vec<&str> = Vec::new();
    let mut policies: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, &str), String> = BTreeMap::new();
    for r in results {
        if !scenarios.contains(&r.scenario.as_str()) {
            scenarios.push(&r.scenario);
        }
        if !policies.contains(&r.policy.as_str()) {
            policies.push(&r.policy);
        }
        cells.insert((r.policy.as_str(), r.scenario.as_str()), cell(r.mean, r.std));
    }
    let mut header = vec!["policy"];
    header.extend(&scenarios);
    let rows: Vec<Vec<String>> = policies
        .iter()
        .map(|p| {
            let mut row = vec![p.to_string()];
            row.extend(scenarios.iter().map(|s| cells.get(&(*p, *s)).cloned().unwrap_or_else(|| "-".into())));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cols: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cols.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.clone(), &mut out);
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
