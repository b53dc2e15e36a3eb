//! Masked tabular Q-learning over the observable DE-MDP state.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demdp::{episode_seed, DemdpError, Env, SimCore};
use crate::policy::{evaluate, greedy_choice, RobotPolicy, Stats};
use crate::state::{ActionId, HumanAction, WorldState};

/// Observable state, with elapsed times grouped into buckets of `bucket` steps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    pub task: Vec<i8>,
    pub human: HumanAction,
    pub t_h: u32,
    pub t_r: u32,
    pub detected: bool,
    pub robot: ActionId,
}

pub fn encode_state(s: &WorldState, bucket: u32) -> StateKey {
    let bucket = bucket.max(1);
    StateKey {
        task: s.task.values().to_vec(),
        human: s.human_action,
        t_h: s.t_h / bucket,
        t_r: s.t_r / bucket,
        detected: s.detected,
        robot: s.robot_action,
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.task {
            f.write_str(match v {
                1 => "+",
                -1 => "-",
                _ => "0",
            })?;
        }
        let human = match self.human {
            HumanAction::Unknown => "?".to_string(),
            HumanAction::Idle => "0".to_string(),
            HumanAction::Action(a) => a.0.to_string(),
        };
        write!(f, "|{human}|{}|{}|{}|{}", self.t_h, self.t_r, u8::from(self.detected), self.robot.0)
    }
}

impl FromStr for StateKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('|').collect();
        let [task, human, t_h, t_r, d, robot] = parts[..] else {
            return Err(format!("expected 6 fields in {s:?}"));
        };
        let task = task
            .chars()
            .map(|c| match c {
                '+' => Ok(1),
                '0' => Ok(0),
                '-' => Ok(-1),
                _ => Err(format!("bad task symbol {c:?}")),
            })
            .collect::<Result<_, _>>()?;
        let num = |x: &str| x.parse::<u32>().map_err(|e| format!("{x:?}: {e}"));
        let human = match human {
            "?" => HumanAction::Unknown,
            "0" => HumanAction::Idle,
            x => HumanAction::Action(ActionId(num(x)? as u16)),
        };
        let detected = match d {
            "0" => false,
            "1" => true,
            x => return Err(format!("bad detection flag {x:?}")),
        };
        Ok(StateKey { task, human, t_h: num(t_h)?, t_r: num(t_r)?, detected, robot: ActionId(num(robot)? as u16) })
    }
}

/// Action values and visit counts per encoded state; index 0 is idle.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub bucket: u32,
    pub n_actions: usize,
    pub values: HashMap<StateKey, Vec<f64>>,
    pub visits: HashMap<StateKey, Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    bucket: u32,
    n_actions: usize,
    values: BTreeMap<String, Vec<f64>>,
    visits: BTreeMap<String, Vec<u32>>,
}

impl QTable {
    pub fn new(n_actions: usize, bucket: u32) -> Self {
        QTable { bucket: bucket.max(1), n_actions, values: HashMap::new(), visits: HashMap::new() }
    }

    pub fn q(&self, key: &StateKey, a: ActionId) -> f64 {
        self.values.get(key).map_or(0.0, |v| v[a.index()])
    }

    /// Best feasible action, ties to the lowest id; `None` for a state never visited.
    pub fn best(&self, key: &StateKey, feasible: &[ActionId]) -> Option<ActionId> {
        let row = self.values.get(key)?;
        let mut best: Option<(ActionId, f64)> = None;
        for &a in feasible {
            let q = row[a.index()];
            if best.is_none_or(|(_, b)| q > b) {
                best = Some((a, q));
            }
        }
        best.map(|(a, _)| a)
    }

    fn max_q(&self, key: &StateKey, feasible: &[ActionId]) -> f64 {
        feasible.iter().map(|&a| self.q(key, a)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sorted JSON; identical tables give identical bytes.
    pub fn export(&self) -> String {
        let ck = Checkpoint {
            bucket: self.bucket,
            n_actions: self.n_actions,
            values: self.values.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            visits: self.visits.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        };
        serde_json::to_string_pretty(&ck).expect("serializable")
    }

    pub fn import(text: &str) -> Result<Self, String> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let parse = |k: &String| k.parse::<StateKey>();
        let mut values = HashMap::new();
        for (k, v) in &ck.values {
            if v.len() != ck.n_actions {
                return Err(format!("state {k}: {} values, expected {}", v.len(), ck.n_actions));
            }
            values.insert(parse(k)?, v.clone());
        }
        let mut visits = HashMap::new();
        for (k, v) in &ck.visits {
            visits.insert(parse(k)?, v.clone());
        }
        Ok(QTable { bucket: ck.bucket, n_actions: ck.n_actions, values, visits })
    }
}

impl RobotPolicy for QTable {
    fn name(&self) -> &str {
        "rl"
    }

    /// Greedy in the learned values; unseen states fall back to the greedy baseline.
    fn choose(&self, core: &SimCore, feasible: &[ActionId], _rng: &mut dyn RngCore) -> ActionId {
        self.best(&encode_state(&core.world_state(), self.bucket), feasible)
            .unwrap_or_else(|| greedy_choice(core.htm(), feasible))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: u64,
    pub learning_rate: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episodes over which epsilon decays linearly.
    pub epsilon_decay: f64,
    /// Episodes between evaluations for the training curve; 0 disables it.
    pub eval_interval: u64,
    pub eval_episodes: u64,
    pub bucket: u32,
    /// Training aborts if any action value exceeds this magnitude.
    pub value_cap: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 200_000,
            learning_rate: 0.1,
            epsilon_start: 0.3,
            epsilon_end: 0.01,
            epsilon_decay: 0.8,
            eval_interval: 0,
            eval_episodes: 100,
            bucket: 1,
            value_cap: 1e9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.episodes == 0 {
            return bad("episodes must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]");
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return bad("epsilon must be in [0, 1]");
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay) {
            return bad("epsilon_decay must be in [0, 1]");
        }
        Ok(())
    }

    pub fn epsilon(&self, episode: u64) -> f64 {
        let horizon = self.epsilon_decay * self.episodes as f64;
        if horizon <= 0.0 || episode as f64 >= horizon {
            return self.epsilon_end;
        }
        let f = episode as f64 / horizon;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("values diverged at episode {episode}: |Q({state}, {action})| = {value:e} exceeds the cap")]
    Diverged { episode: u64, state: String, action: ActionId, value: f64 },
    #[error(transparent)]
    Sim(#[from] DemdpError),
    #[error(transparent)]
    Eval(#[from] crate::policy::EvalError),
}

/// One point of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub episode: u64,
    pub eval_mean: f64,
    pub eval_std: f64,
}

pub struct Trained {
    pub table: QTable,
    pub curve: Vec<CurvePoint>,
}

/// Episodic Q-learning with epsilon-greedy exploration restricted to the feasible set. The
/// environment's scenario supplies the discount, applied per elapsed step.
pub fn train(env: &Env, cfg: &TrainConfig) -> Result<Trained, TrainError> {
    cfg.validate()?;
    let mut env = env.clone();
    let gamma = env.config().gamma;
    let mut table = QTable::new(env.htm().max_id() + 1, cfg.bucket);
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, u64::MAX));
    let mut curve = Vec::new();
    for ep in 0..cfg.episodes {
        let eps = cfg.epsilon(ep);
        env.reset_with_seed(episode_seed(cfg.seed, ep));
        let mut key = encode_state(&env.state(), table.bucket);
        let mut feasible = env.feasible_robot_actions();
        while !env.is_done() {
            let a = if rng.random::<f64>() < eps {
                feasible[rng.random_range(0..feasible.len())]
            } else {
                table.best(&key, &feasible).unwrap_or(feasible[0])
            };
            let t0 = env.elapsed();
            let out = env.step(a)?;
            let dt = env.elapsed() - t0;
            let next_key = encode_state(&out.state, table.bucket);
            let next_feasible = if out.done { Vec::new() } else { env.feasible_robot_actions() };
            let target = if out.done {
                out.reward
            } else {
                out.reward + gamma.powf(dt as f64) * table.max_q(&next_key, &next_feasible)
            };
            assert!(feasible.contains(&a), "update on infeasible pair ({key}, {a})");
            let n = table.n_actions;
            let row = table.values.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            row[a.index()] += cfg.learning_rate * (target - row[a.index()]);
            let q = row[a.index()];
            table.visits.entry(key.clone()).or_insert_with(|| vec![0; n])[a.index()] += 1;
            if !q.is_finite() || q.abs() > cfg.value_cap {
                return Err(TrainError::Diverged { episode: ep, state: key.to_string(), action: a, value: q });
            }
            key = next_key;
            feasible = next_feasible;
        }
        if cfg.eval_interval > 0 && (ep + 1) % cfg.eval_interval == 0 {
            let s: Stats = evaluate(&table, &env, cfg.eval_episodes, episode_seed(cfg.seed ^ 0xE7A1, ep))?;
            log::info!("episode {}: eval {s}", ep + 1);
            curve.push(CurvePoint { episode: ep + 1, eval_mean: s.mean, eval_std: s.std });
        }
    }
    Ok(Trained { table, curve })
}

pub fn write_curve<W: std::io::Write>(curve: &[CurvePoint], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
