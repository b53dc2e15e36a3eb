use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::htm::Htm;
use crate::scenario::ScenarioConfig;
use crate::state::{ActionId, Agent, WorldState};

use super::sim::{Chance, EventRecord, Pending, RngChance, SimCore};
use super::{DemdpError, EventKind};

/// Decision rule of the simulated (uncontrollable) human.
///
/// A model is a distribution over the non-idle options with integer weights, so planners
/// can branch on it exactly and simulators can sample it.
pub trait HumanModel: Send + Sync {
    /// Weighted choices; an empty `options` slice means the human idles.
    fn distribution(&self, state: &WorldState, options: &[ActionId]) -> Vec<(ActionId, u64)>;

    fn choose(&self, state: &WorldState, options: &[ActionId], rng: &mut dyn RngCore) -> ActionId {
        let dist = self.distribution(state, options);
        let total: u64 = dist.iter().map(|(_, w)| w).sum();
        if total == 0 {
            return ActionId::IDLE;
        }
        let mut x = rng.random_range(0..total);
        for (a, w) in dist {
            if x < w {
                return a;
            }
            x -= w;
        }
        unreachable!("draw below total weight")
    }
}

/// Uniform choice over the human's feasible non-idle actions.
#[derive(Debug, Default, Clone, Copy)]
pub struct UniformHuman;

impl HumanModel for UniformHuman {
    fn distribution(&self, _state: &WorldState, options: &[ActionId]) -> Vec<(ActionId, u64)> {
        options.iter().map(|&a| (a, 1)).collect()
    }

    fn choose(&self, _state: &WorldState, options: &[ActionId], rng: &mut dyn RngCore) -> ActionId {
        if options.is_empty() {
            ActionId::IDLE
        } else {
            options[rng.random_range(0..options.len())]
        }
    }
}

/// Always takes the lowest-numbered option.
#[derive(Debug, Default, Clone, Copy)]
pub struct LowestIdHuman;

impl HumanModel for LowestIdHuman {
    fn distribution(&self, _state: &WorldState, options: &[ActionId]) -> Vec<(ActionId, u64)> {
        options.iter().min().map(|&a| vec![(a, 1)]).unwrap_or_default()
    }
}

/// Uniform human decision from an observable state.
pub fn choose_human_action<R: Rng + ?Sized>(htm: &Htm, s: &WorldState, rng: &mut R) -> ActionId {
    let options: Vec<ActionId> = htm.feasible_actions(s, Agent::Human).into_iter().filter(|a| !a.is_idle()).collect();
    if options.is_empty() {
        ActionId::IDLE
    } else {
        options[rng.random_range(0..options.len())]
    }
}

/// Latency model for the detection event; the fixed scenario delay is the default.
pub trait DetectionModel: Send + Sync {
    fn delay(&self, human: ActionId, default: u32, rng: &mut dyn RngCore) -> u32;
}

struct EnvChance<'a> {
    rng: &'a mut ChaCha8Rng,
    detection: Option<&'a dyn DetectionModel>,
}

impl Chance for EnvChance<'_> {
    fn duration(&mut self, nominal: u32, cv: f64) -> u32 {
        RngChance::new(&mut *self.rng).duration(nominal, cv)
    }

    fn fails(&mut self, p_fail: f64) -> bool {
        RngChance::new(&mut *self.rng).fails(p_fail)
    }

    fn change_offset(&mut self, p_change: f64, rate: f64, max: u32) -> Option<u32> {
        RngChance::new(&mut *self.rng).change_offset(p_change, rate, max)
    }

    fn detection_delay(&mut self, human: ActionId, default: u32) -> u32 {
        match self.detection {
            Some(d) => d.delay(human, default, self.rng),
            None => default,
        }
    }
}

/// Counter-based seed splitter: independent, reorderable per-episode seeds.
pub fn episode_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: u64,
    pub event: EventKind,
    pub dt: u64,
    pub time: u64,
    pub state: WorldState,
    pub robot_action: ActionId,
    pub reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: WorldState,
    /// Negative elapsed steps since the previous decision.
    pub reward: f64,
    pub done: bool,
    pub events: Vec<EventRecord>,
}

/// Episodic environment: the robot acts at decision points, the human model and the
/// event dynamics run in between.
#[derive(Clone)]
pub struct Env {
    htm: Arc<Htm>,
    cfg: ScenarioConfig,
    core: SimCore,
    rng: ChaCha8Rng,
    human: Arc<dyn HumanModel>,
    detection: Option<Arc<dyn DetectionModel>>,
    trace: Option<Vec<TraceRecord>>,
    k: u64,
}

impl Env {
    pub fn new(htm: Arc<Htm>, cfg: ScenarioConfig) -> Self {
        let core = SimCore::new(htm.clone(), cfg.clone());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Env { htm, cfg, core, rng, human: Arc::new(UniformHuman), detection: None, trace: None, k: 0 }
    }

    pub fn with_human_model(mut self, human: Arc<dyn HumanModel>) -> Self {
        self.human = human;
        self
    }

    pub fn with_detection(mut self, detection: Arc<dyn DetectionModel>) -> Self {
        self.detection = Some(detection);
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn human_model(&self) -> &Arc<dyn HumanModel> {
        &self.human
    }

    pub fn htm(&self) -> &Arc<Htm> {
        &self.htm
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn core(&self) -> &SimCore {
        &self.core
    }

    pub fn state(&self) -> WorldState {
        self.core.world_state()
    }

    pub fn is_done(&self) -> bool {
        self.core.is_done()
    }

    /// Makespan so far, in steps.
    pub fn elapsed(&self) -> u64 {
        self.core.now()
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn feasible_robot_actions(&self) -> Vec<ActionId> {
        self.core.robot_options()
    }

    /// Restarts with the scenario seed.
    pub fn reset(&mut self) -> WorldState {
        self.reset_with_seed(self.cfg.seed)
    }

    pub fn reset_with_seed(&mut self, seed: u64) -> WorldState {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.core = SimCore::new(self.htm.clone(), self.cfg.clone());
        self.k = 0;
        if let Some(t) = &mut self.trace {
            t.clear();
        }
        self.resolve_human();
        self.core.world_state()
    }

    fn resolve_human(&mut self) {
        if self.core.pending() == Pending::Human {
            let options = self.core.human_options();
            let state = self.core.world_state();
            let choice = self.human.choose(&state, &options, &mut self.rng);
            let detection = self.detection.clone();
            let mut chance = EnvChance { rng: &mut self.rng, detection: detection.as_deref() };
            self.core.apply_human(choice, &mut chance).expect("human model picks a feasible action");
        }
    }

    /// Applies the robot's choice and runs until the next robot decision point or the end.
    pub fn step(&mut self, robot_choice: ActionId) -> Result<StepOutcome, DemdpError> {
        match self.core.pending() {
            Pending::Done => return Err(DemdpError::EpisodeDone),
            Pending::Robot => {}
            _ => return Err(DemdpError::NotAwaiting(Agent::Robot)),
        }
        let start = self.core.now();
        let detection = self.detection.clone();
        let mut chance = EnvChance { rng: &mut self.rng, detection: detection.as_deref() };
        self.core.apply_robot(robot_choice, &mut chance)?;
        let mut events = Vec::new();
        loop {
            self.resolve_human();
            match self.core.pending() {
                Pending::Robot | Pending::Done => break,
                Pending::Human => continue,
                Pending::Advance => {
                    let mut chance = EnvChance { rng: &mut self.rng, detection: detection.as_deref() };
                    let batch = self.core.advance(&mut chance)?;
                    if let Some(trace) = &mut self.trace {
                        let state = self.core.world_state();
                        for e in &batch {
                            trace.push(TraceRecord {
                                k: self.k,
                                event: e.kind,
                                dt: e.dt,
                                time: e.time,
                                state: state.clone(),
                                robot_action: robot_choice,
                                reward: -(e.dt as f64),
                                action: e.action,
                                success: e.success,
                            });
                            self.k += 1;
                        }
                    }
                    events.extend(batch);
                }
            }
        }
        if self.core.pending() == Pending::Robot && self.core.robot_options().is_empty() {
            return Err(DemdpError::Deadlock);
        }
        Ok(StepOutcome {
            state: self.core.world_state(),
            reward: -((self.core.now() - start) as f64),
            done: self.core.is_done(),
            events,
        })
    }
}
