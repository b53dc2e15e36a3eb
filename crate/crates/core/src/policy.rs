//! Robot policies, the greedy and random baselines, and Monte-Carlo evaluation.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demdp::{episode_seed, DemdpError, Env, SimCore, TraceRecord};
use crate::state::{ActionId, Agent};

/// Anything that picks the robot's next action at a decision point.
pub trait RobotPolicy: Send + Sync {
    fn name(&self) -> &str;

    /// `feasible` is never empty and is sorted by id.
    fn choose(&self, core: &SimCore, feasible: &[ActionId], rng: &mut dyn RngCore) -> ActionId;
}

/// Shortest nominal robot duration; idle only when nothing else is feasible.
#[derive(Debug, Default, Clone, Copy)]
pub struct GreedyPolicy;

impl RobotPolicy for GreedyPolicy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn choose(&self, core: &SimCore, feasible: &[ActionId], _rng: &mut dyn RngCore) -> ActionId {
        greedy_choice(core.htm(), feasible)
    }
}

pub fn greedy_choice(htm: &crate::Htm, feasible: &[ActionId]) -> ActionId {
    feasible
        .iter()
        .filter(|a| !a.is_idle())
        .min_by_key(|&&a| (htm.spec(a).duration(Agent::Robot), a))
        .copied()
        .unwrap_or(ActionId::IDLE)
}

/// Uniform over the feasible set.
#[derive(Debug, Default, Clone, Copy)]
pub struct RandomPolicy;

impl RobotPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn choose(&self, _core: &SimCore, feasible: &[ActionId], rng: &mut dyn RngCore) -> ActionId {
        feasible[rng.random_range(0..feasible.len())]
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("episode {episode} exceeded {limit} robot decisions")]
    StepLimit { episode: u64, limit: u64 },
    #[error("episode {episode}: {source}")]
    Sim { episode: u64, source: DemdpError },
}

/// Outcome of one rollout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub makespan: u64,
    pub decisions: u64,
    pub events: u32,
    pub changes: u32,
    pub failures: u32,
}

pub const MAX_DECISIONS: u64 = 1_000_000;

/// Seed of the policy's own random stream for an episode, independent of the environment's.
fn policy_seed(env_seed: u64) -> u64 {
    episode_seed(env_seed, 0x5EED_0F70_11C7)
}

/// Runs one episode from `seed` to the end.
pub fn run_episode(policy: &dyn RobotPolicy, template: &Env, seed: u64) -> Result<EpisodeResult, DemdpError> {
    rollout(policy, template.clone(), seed).map(|(r, _)| r)
}

/// Same episode as [`run_episode`] with the same seed, plus the event trace.
pub fn run_episode_traced(
    policy: &dyn RobotPolicy,
    template: &Env,
    seed: u64,
) -> Result<(EpisodeResult, Vec<TraceRecord>), DemdpError> {
    rollout(policy, template.clone().with_trace(), seed).map(|(r, env)| (r, env.trace().to_vec()))
}

fn rollout(policy: &dyn RobotPolicy, mut env: Env, seed: u64) -> Result<(EpisodeResult, Env), DemdpError> {
    env.reset_with_seed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(policy_seed(seed));
    let mut decisions = 0;
    while !env.is_done() {
        if decisions >= MAX_DECISIONS {
            return Err(DemdpError::Deadlock);
        }
        let feasible = env.feasible_robot_actions();
        if feasible.is_empty() {
            return Err(DemdpError::Deadlock);
        }
        let a = policy.choose(env.core(), &feasible, &mut rng);
        env.step(a)?;
        decisions += 1;
    }
    let c = env.core().counters();
    let result = EpisodeResult {
        seed,
        makespan: env.elapsed(),
        decisions,
        events: c.events,
        changes: c.changes,
        failures: c.failures,
    };
    Ok((result, env))
}

/// Mean and population standard deviation of makespans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub makespans: Vec<u64>,
}

impl Stats {
    pub fn from_makespans(makespans: Vec<u64>) -> Self {
        let n = makespans.len().max(1) as f64;
        let mean = makespans.iter().map(|&m| m as f64).sum::<f64>() / n;
        let var = makespans.iter().map(|&m| (m as f64 - mean).powi(2)).sum::<f64>() / n;
        Stats { mean, std: var.sqrt(), makespans }
    }
}

impl fmt::Display for Stats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} [{:.1}]", self.mean, self.std)
    }
}

/// Runs `n` independent episodes in parallel; episode `i` uses `episode_seed(seed, i)`.
/// Results come back in episode order whatever the thread count.
pub fn evaluate_episodes(
    policy: &dyn RobotPolicy,
    template: &Env,
    n: u64,
    seed: u64,
) -> Result<Vec<EpisodeResult>, EvalError> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            run_episode(policy, template, episode_seed(seed, i)).map_err(|source| match source {
                DemdpError::Deadlock => EvalError::StepLimit { episode: i, limit: MAX_DECISIONS },
                source => EvalError::Sim { episode: i, source },
            })
        })
        .collect()
}

pub fn evaluate(policy: &dyn RobotPolicy, template: &Env, n: u64, seed: u64) -> Result<Stats, EvalError> {
    let runs = evaluate_episodes(policy, template, n, seed)?;
    Ok(Stats::from_makespans(runs.into_iter().map(|r| r.makespan).collect()))
}
