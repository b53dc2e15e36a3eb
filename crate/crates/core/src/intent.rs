//! Recursive Bayesian estimate of the goal the human's hand is heading to.
//!
//! Likelihoods combine a proximity feature `exp(-lambda * distance)` and an alignment feature
//! `exp(kappa * (cos(phi) - 1))` between the hand velocity and the hand-to-goal direction. The
//! goal process is a Markov chain that stays put with probability `rho`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demdp::DetectionModel;
use crate::state::ActionId;

#[derive(Debug, Error, PartialEq)]
pub enum IntentError {
    #[error("goal set is empty")]
    NoGoals,
    #[error("goal {0}: position must be finite and match the dimension of the first goal")]
    BadPosition(u32),
    #[error("duplicate goal id {0}")]
    DuplicateGoal(u32),
    #[error("rho must be in [0, 1], got {0}")]
    BadRho(f64),
    #[error("unknown goal {0}")]
    UnknownGoal(u32),
    #[error("belief has {got} entries for {expected} goals")]
    Size { expected: usize, got: usize },
    #[error("invalid belief: entries must be non-negative and sum to 1")]
    BadBelief,
    #[error("trajectory: {0}")]
    Trajectory(String),
    #[error("goal file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub id: u32,
    /// Metres.
    pub position: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_id: Option<ActionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSet {
    pub goals: Vec<Goal>,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_rho() -> f64 {
    0.9
}

impl GoalSet {
    pub fn new(goals: Vec<Goal>, rho: f64) -> Result<Self, IntentError> {
        let g = GoalSet { goals, rho };
        g.validate()?;
        Ok(g)
    }

    pub fn parse(text: &str) -> Result<Self, IntentError> {
        let g: GoalSet = serde_json::from_str(text).map_err(|e| IntentError::Format(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), IntentError> {
        let first = self.goals.first().ok_or(IntentError::NoGoals)?;
        let dim = first.position.len();
        for (i, g) in self.goals.iter().enumerate() {
            if g.position.len() != dim || dim == 0 || g.position.iter().any(|x| !x.is_finite()) {
                return Err(IntentError::BadPosition(g.id));
            }
            if self.goals[..i].iter().any(|h| h.id == g.id) {
                return Err(IntentError::DuplicateGoal(g.id));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(IntentError::BadRho(self.rho));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.goals[0].position.len()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.goals.iter().position(|g| g.id == id)
    }

    pub fn for_action(&self, action: ActionId) -> Option<&Goal> {
        self.goals.iter().find(|g| g.action_id == Some(action))
    }
}

/// Hand pose at step `t`. A missing velocity counts as a stationary hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: u64,
    pub position: Vec<f64>,
    #[serde(default)]
    pub velocity: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntentParams {
    /// Proximity decay, 1/m.
    pub lambda: f64,
    /// Alignment concentration.
    pub kappa: f64,
    /// Speeds below this (m/step) carry no direction.
    pub eps_v: f64,
}

impl Default for IntentParams {
    fn default() -> Self {
        IntentParams { lambda: 1.0, kappa: 2.0, eps_v: 0.01 }
    }
}

/// Probabilities over the goals, in goal-set order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn uniform(n: usize) -> Self {
        Belief(vec![1.0 / n as f64; n])
    }

    pub fn new(probs: Vec<f64>) -> Result<Self, IntentError> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(IntentError::BadBelief);
        }
        Ok(Belief(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn proximity(hand: &[f64], goal: &[f64], p: &IntentParams) -> f64 {
    (-p.lambda * distance(hand, goal)).exp()
}

pub fn alignment(hand: &[f64], velocity: Option<&[f64]>, goal: &[f64], p: &IntentParams) -> f64 {
    let Some(v) = velocity else { return 1.0 };
    let speed = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dist = distance(hand, goal);
    if speed < p.eps_v {
        return 1.0;
    }
    if dist == 0.0 {
        // Already at the goal: no direction to disagree with.
        return 1.0;
    }
    let cos = v.iter().zip(goal).zip(hand).map(|((vi, gi), hi)| vi * (gi - hi)).sum::<f64>() / (speed * dist);
    (p.kappa * (cos.clamp(-1.0, 1.0) - 1.0)).exp()
}

/// Per-goal likelihood of the observation, the product of both features.
pub fn likelihoods(obs: &Observation, goals: &GoalSet, p: &IntentParams) -> Vec<f64> {
    goals
        .goals
        .iter()
        .map(|g| proximity(&obs.position, &g.position, p) * alignment(&obs.position, obs.velocity.as_deref(), &g.position, p))
        .collect()
}

/// Prediction step: stay with probability rho, otherwise move uniformly to another goal.
pub fn predict(b: &Belief, rho: f64) -> Belief {
    let n = b.len();
    if n == 1 {
        return b.clone();
    }
    let off = (1.0 - rho) / (n - 1) as f64;
    let total: f64 = b.0.iter().sum();
    Belief(b.0.iter().map(|&p| rho * p + off * (total - p)).collect())
}

/// Prediction, multiplication by the likelihoods, normalisation.
pub fn update_with_likelihoods(b: &Belief, lik: &[f64], rho: f64) -> Result<Belief, IntentError> {
    if lik.len() != b.len() {
        return Err(IntentError::Size { expected: b.len(), got: lik.len() });
    }
    let pred = predict(b, rho);
    let un: Vec<f64> = pred.0.iter().zip(lik).map(|(p, l)| p * l).collect();
    let z: f64 = un.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        log::warn!("degenerate likelihoods {lik:?}; belief reset to uniform");
        return Ok(Belief::uniform(b.len()));
    }
    Ok(Belief(un.into_iter().map(|u| u / z).collect()))
}

pub fn belief_update(b: &Belief, obs: &Observation, goals: &GoalSet, p: &IntentParams) -> Result<Belief, IntentError> {
    if b.len() != goals.len() {
        return Err(IntentError::Size { expected: goals.len(), got: b.len() });
    }
    update_with_likelihoods(b, &likelihoods(obs, goals, p), goals.rho)
}

/// Most probable goal; ties go to the lowest goal id.
pub fn map_goal(b: &Belief, goals: &GoalSet) -> u32 {
    let mut best = (goals.goals[0].id, b.0[0]);
    for (g, &p) in goals.goals.iter().zip(&b.0).skip(1) {
        if p > best.1 || (p == best.1 && g.id < best.0) {
            best = (g.id, p);
        }
    }
    best.0
}

/// Filters a whole sequence from `prior`; element `i` is the belief after observation `i`.
pub fn run_filter(
    obs: &[Observation],
    goals: &GoalSet,
    p: &IntentParams,
    prior: Belief,
) -> Result<Vec<Belief>, IntentError> {
    let mut b = prior;
    obs.iter()
        .map(|o| {
            b = belief_update(&b, o, goals, p)?;
            Ok(b.clone())
        })
        .collect()
}

/// Fills missing velocities by backward differences (the first sample stays stationary).
pub fn with_velocities(mut obs: Vec<Observation>) -> Vec<Observation> {
    for i in 1..obs.len() {
        if obs[i].velocity.is_none() {
            let dt = (obs[i].t.saturating_sub(obs[i - 1].t)).max(1) as f64;
            let v = obs[i].position.iter().zip(&obs[i - 1].position).map(|(a, b)| (a - b) / dt).collect();
            obs[i].velocity = Some(v);
        }
    }
    obs
}

/// Synthetic reach toward a goal.
#[derive(Debug, Clone, PartialEq)]
pub struct Reach {
    pub start: Vec<f64>,
    pub goal: u32,
    /// Metres per step.
    pub speed: f64,
    pub noise_std: f64,
    /// Switch to another goal at this step.
    pub switch: Option<(u64, u32)>,
    pub max_steps: u64,
}

/// Straight line at constant speed toward the current goal plus isotropic Gaussian noise; ends
/// on arrival (the final sample is the goal itself when noiseless). Velocities are finite
/// differences of the noisy positions.
pub fn simulate_trajectory(reach: &Reach, goals: &GoalSet, rng: &mut dyn RngCore) -> Result<Vec<Observation>, IntentError> {
    let find = |id| goals.goals.iter().find(|g| g.id == id).ok_or(IntentError::UnknownGoal(id));
    let mut target = find(reach.goal)?;
    if let Some((_, id)) = reach.switch {
        find(id)?;
    }
    if reach.start.len() != goals.dim() || !(reach.speed > 0.0) {
        return Err(IntentError::Trajectory("start dimension or speed invalid".into()));
    }
    let noise = Normal::new(0.0, reach.noise_std.max(0.0)).map_err(|e| IntentError::Trajectory(e.to_string()))?;
    let mut clean = reach.start.clone();
    let mut out = vec![Observation { t: 0, position: clean.clone(), velocity: None }];
    for t in 1..=reach.max_steps {
        if let Some((at, id)) = reach.switch {
            if t == at {
                target = find(id)?;
            }
        }
        let d = distance(&clean, &target.position);
        let arrived = d <= reach.speed * (1.0 + 1e-9);
        if arrived {
            clean = target.position.clone();
        } else {
            let f = reach.speed / d;
            clean = clean.iter().zip(&target.position).map(|(c, g)| c + f * (g - c)).collect();
        }
        let position = if reach.noise_std > 0.0 {
            clean.iter().map(|c| c + noise.sample(rng)).collect()
        } else {
            clean.clone()
        };
        out.push(Observation { t, position, velocity: None });
        if arrived && reach.switch.is_none_or(|(at, _)| t >= at) {
            break;
        }
    }
    Ok(with_velocities(out))
}

/// Reads `t,x,y[,z]` rows; a header line is optional.
pub fn read_trajectory_csv<R: std::io::Read>(input: R) -> Result<Vec<Observation>, IntentError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| IntentError::Trajectory(e.to_string()))?;
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let nums: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| IntentError::Trajectory(format!("line {}: {e}", i + 1))))
            .collect::<Result<_, _>>()?;
        if nums.len() < 3 || nums.len() > 4 || nums[0] < 0.0 || nums[0].fract() != 0.0 {
            return Err(IntentError::Trajectory(format!("line {}: expected t,x,y[,z]", i + 1)));
        }
        out.push(Observation { t: nums[0] as u64, position: nums[1..].to_vec(), velocity: None });
    }
    Ok(with_velocities(out))
}

/// Per-step filter output `t, p_<goal>..., map_goal`.
pub fn write_filter_csv<W: std::io::Write>(
    obs: &[Observation],
    beliefs: &[Belief],
    goals: &GoalSet,
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend(goals.goals.iter().map(|g| format!("p_{}", g.id)));
    header.push("map_goal".into());
    w.write_record(&header)?;
    for (o, b) in obs.iter().zip(beliefs) {
        let mut row = vec![o.t.to_string()];
        row.extend(b.probs().iter().map(|p| format!("{p:.6}")));
        row.push(map_goal(b, goals).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Detection latency from the filter: the step at which the MAP goal is the one linked to the
/// human's action with posterior above `threshold`, on a synthetic reach from `start`.
#[derive(Debug, Clone)]
pub struct IntentDetection {
    pub goals: GoalSet,
    pub params: IntentParams,
    pub start: Vec<f64>,
    pub speed: f64,
    pub noise_std: f64,
    pub threshold: f64,
}

impl IntentDetection {
    pub fn new(goals: GoalSet) -> Self {
        let dim = goals.dim();
        IntentDetection {
            goals,
            params: IntentParams::default(),
            start: vec![0.0; dim],
            speed: 0.5,
            noise_std: 0.05,
            threshold: 0.8,
        }
    }

    /// `None` when the human's action has no goal.
    pub fn detection_step(&self, human: ActionId, rng: &mut dyn RngCore) -> Option<u32> {
        let goal = self.goals.for_action(human)?;
        let reach = Reach {
            start: self.start.clone(),
            goal: goal.id,
            speed: self.speed,
            noise_std: self.noise_std,
            switch: None,
            max_steps: 10_000,
        };
        let obs = simulate_trajectory(&reach, &self.goals, rng).ok()?;
        let gi = self.goals.index_of(goal.id)?;
        let beliefs = run_filter(&obs, &self.goals, &self.params, Belief::uniform(self.goals.len())).ok()?;
        let hit = beliefs
            .iter()
            .position(|b| map_goal(b, &self.goals) == goal.id && b.probs()[gi] > self.threshold)
            .unwrap_or(beliefs.len() - 1);
        Some((hit as u32).max(1))
    }
}

impl DetectionModel for IntentDetection {
    fn delay(&self, human: ActionId, default: u32, rng: &mut dyn RngCore) -> u32 {
        self.detection_step(human, rng).unwrap_or(default)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn goals(positions: &[[f64; 2]], rho: f64) -> GoalSet {
        let goals = positions
            .iter()
            .enumerate()
            .map(|(i, p)| Goal { id: i as u32 + 1, position: p.to_vec(), action_id: None })
            .collect();
        GoalSet::new(goals, rho).unwrap()
    }

    fn obs(position: [f64; 2], velocity: Option<[f64; 2]>) -> Observation {
        Observation { t: 0, position: position.to_vec(), velocity: velocity.map(|v| v.to_vec()) }
    }

    #[test]
    fn features() {
        let p = IntentParams::default();
        let g = goals(&[[1.0, 1.0]], 0.9);
        assert_eq!(likelihoods(&obs([1.0, 1.0], Some([0.0, 0.0])), &g, &p), vec![1.0]);
        let far = likelihoods(&obs([3.0, 1.0], Some([0.001, 0.0])), &g, &p)[0];
        assert!((far - (-2.0f64).exp()).abs() < 1e-15);
        let toward = likelihoods(&obs([0.0, 1.0], Some([0.5, 0.0])), &g, &p)[0];
        assert!((toward - (-1.0f64).exp()).abs() < 1e-15);
        let away = alignment(&[0.0, 1.0], Some(&[-0.5, 0.0]), &[1.0, 1.0], &p);
        assert!((away - (-4.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn update_edge_cases() {
        let g = goals(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 0.9);
        let u = update_with_likelihoods(&Belief::uniform(3), &[0.4, 0.4, 0.4], g.rho).unwrap();
        for p in u.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = Belief::new(vec![0.6, 0.4]).unwrap();
        assert_eq!(update_with_likelihoods(&b, &[0.3, 0.0], 1.0).unwrap().probs(), &[1.0, 0.0]);
        assert_eq!(update_with_likelihoods(&b, &[0.0, 0.0], 0.9).unwrap(), Belief::uniform(2));
    }

    #[test]
    fn map_tie_break() {
        let g = goals(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 0.9);
        assert_eq!(map_goal(&Belief::new(vec![0.2, 0.7, 0.1]).unwrap(), &g), 2);
        let g2 = goals(&[[0.0, 0.0], [1.0, 0.0]], 0.9);
        assert_eq!(map_goal(&Belief::uniform(2), &g2), 1);
    }

    #[test]
    fn uninformative_transition_gives_uniform() {
        let b = Belief::new(vec![0.7, 0.2, 0.1]).unwrap();
        for p in predict(&b, 1.0 / 3.0).probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn noiseless_reach_is_collinear_and_arrives() {
        let g = goals(&[[6.0, 8.0], [-10.0, 0.0]], 0.9);
        let reach = Reach { start: vec![0.0, 0.0], goal: 1, speed: 1.0, noise_std: 0.0, switch: None, max_steps: 100 };
        let mut rng = rand::rng();
        let tr = simulate_trajectory(&reach, &g, &mut rng).unwrap();
        assert_eq!(tr.len(), 11);
        assert_eq!(tr.last().unwrap().position, vec![6.0, 8.0]);
        for o in &tr {
            let cross = o.position[0] * 8.0 - o.position[1] * 6.0;
            assert!(cross.abs() < 1e-9);
        }
    }

    #[test]
    fn csv_reading() {
        let text = "t,x,y\n0,0.0,0.0\n1,0.5,0.0\n";
        let obs = read_trajectory_csv(text.as_bytes()).unwrap();
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[1].velocity, Some(vec![0.5, 0.0]));
        assert!(read_trajectory_csv("0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn goal_file_validation() {
        let ok = r#"{"goals":[{"id":1,"position":[0,0],"action_id":3},{"id":2,"position":[1,0]}],"rho":0.8}"#;
        let g = GoalSet::parse(ok).unwrap();
        assert_eq!(g.for_action(ActionId(3)).unwrap().id, 1);
        assert_eq!(GoalSet::parse(r#"{"goals":[]}"#), Err(IntentError::NoGoals));
        assert!(matches!(GoalSet::parse(r#"{"goals":[{"id":1,"position":[0]},{"id":1,"position":[1]}]}"#), Err(IntentError::DuplicateGoal(1))));
    }
}
