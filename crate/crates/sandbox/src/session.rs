//! One interactive episode: the client is the human, a policy drives the robot.

use std::sync::Arc;

use hrc_core::demdp::{DemdpError, EventRecord, Pending, RngChance, SimCore};
use hrc_core::policy::RobotPolicy;
use hrc_core::{ActionId, Htm, HumanAction, ScenarioConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// What the client sends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Choice {
    Action { action_id: u16 },
    Idle,
    ChangeOfMind,
    /// Let the episode run on from a mid-action checkpoint.
    Continue,
}

/// One simulator transition, in application order. Replaying the log on a fresh core with
/// the session seed reproduces the state exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "action", rename_all = "snake_case")]
pub enum Transition {
    Human(ActionId),
    Robot(ActionId),
    Advance,
    Change,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingHumanChoice,
    /// Events are being applied. A frame left in this state is a checkpoint: the human's
    /// detected action is under way and the client may continue or change their mind.
    Advancing,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub seq: u64,
    /// Number of DE-MDP events applied so far.
    pub k: u64,
    pub event: String,
    pub dt: u64,
    pub time: u64,
    pub s_a: Vec<i8>,
    pub human_action: Value,
    pub robot_action: Value,
    /// Chose a joint action and waits for the robot to join.
    pub human_waiting: bool,
    pub detected: bool,
    /// Actions the human may pick now; 0 stands for idle.
    pub feasible_human: Vec<u16>,
    pub can_change_mind: bool,
    pub status: Status,
    pub reward: f64,
    pub done: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub makespan: Option<u64>,
    pub belief: Option<Vec<f64>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("session is finished")]
    Done,
    #[error("{choice:?} not allowed now; feasible: {feasible:?}")]
    Infeasible { choice: Choice, feasible: Vec<u16> },
    #[error(transparent)]
    Sim(#[from] DemdpError),
}

pub struct Session {
    pub id: String,
    pub policy_name: String,
    pub seed: u64,
    htm: Arc<Htm>,
    cfg: ScenarioConfig,
    policy: Arc<dyn RobotPolicy>,
    core: SimCore,
    rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    frames: Vec<Frame>,
    log: Vec<Transition>,
    checkpoint: bool,
}

fn action_value(a: ActionId) -> Value {
    if a.is_idle() {
        json!("idle")
    } else {
        json!(a.0)
    }
}

impl Session {
    /// Changes of mind come from the client, so the scenario's own change probability is
    /// switched off.
    pub fn new(
        id: String,
        htm: Arc<Htm>,
        mut cfg: ScenarioConfig,
        policy: Arc<dyn RobotPolicy>,
        policy_name: String,
        seed: u64,
    ) -> Self {
        cfg.p_change = 0.0;
        let core = SimCore::new(htm.clone(), cfg.clone());
        let mut s = Session {
            id,
            policy_name,
            seed,
            htm,
            cfg,
            policy,
            core,
            rng: ChaCha8Rng::seed_from_u64(seed),
            policy_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15),
            frames: Vec::new(),
            log: Vec::new(),
            checkpoint: false,
        };
        s.push_frame("start", 0);
        s
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

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn log(&self) -> &[Transition] {
        &self.log
    }

    pub fn status(&self) -> Status {
        match self.core.pending() {
            Pending::Done => Status::Done,
            Pending::Human => Status::AwaitingHumanChoice,
            _ => Status::Advancing,
        }
    }

    pub fn feasible_human(&self) -> Vec<u16> {
        if self.core.pending() != Pending::Human {
            return Vec::new();
        }
        std::iter::once(0).chain(self.core.human_options().into_iter().map(|a| a.0)).collect()
    }

    fn push_frame(&mut self, event: &str, dt: u64) {
        let s = self.core.world_state();
        let done = self.core.is_done();
        let human_action = match s.human_action {
            HumanAction::Unknown => json!("unknown"),
            HumanAction::Idle => json!("idle"),
            HumanAction::Action(a) => json!(a.0),
        };
        let frame = Frame {
            seq: self.frames.len() as u64,
            k: u64::from(self.core.counters().events),
            event: event.to_string(),
            dt,
            time: self.core.now(),
            s_a: s.task.values().to_vec(),
            human_action,
            robot_action: action_value(s.robot_action),
            human_waiting: self.core.human_waiting(),
            detected: s.detected,
            feasible_human: self.feasible_human(),
            can_change_mind: self.core.human_can_change_mind() && self.core.pending() == Pending::Advance,
            status: self.status(),
            reward: -(self.core.now() as f64),
            done,
            makespan: done.then(|| self.core.now()),
            belief: None,
        };
        self.frames.push(frame);
    }

    /// Runs the robot and the event dynamics until the human has to act, a checkpoint is
    /// reached or the task is finished. A checkpoint is any point where time is about to
    /// advance while the human's detected action can still be abandoned; `resume` skips the
    /// one the client just continued from.
    fn run(&mut self, mut resume: bool) -> Result<(), SessionError> {
        loop {
            match self.core.pending() {
                Pending::Done | Pending::Human => return Ok(()),
                Pending::Robot => {
                    let feasible = self.core.robot_options();
                    let a = self.policy.choose(&self.core, &feasible, &mut self.policy_rng);
                    self.core.apply_robot(a, &mut RngChance::new(&mut self.rng))?;
                    self.log.push(Transition::Robot(a));
                    self.push_frame("robot_choice", 0);
                }
                Pending::Advance => {
                    if !resume && self.core.human_can_change_mind() {
                        self.checkpoint = true;
                        return Ok(());
                    }
                    resume = false;
                    let batch: Vec<EventRecord> = self.core.advance(&mut RngChance::new(&mut self.rng))?;
                    self.log.push(Transition::Advance);
                    for e in batch {
                        self.push_frame(&e.kind.to_string(), e.dt);
                    }
                }
            }
        }
    }

    /// Applies the client's choice and returns the frames it produced.
    pub fn submit(&mut self, choice: Choice) -> Result<Vec<Frame>, SessionError> {
        if self.core.is_done() {
            return Err(SessionError::Done);
        }
        let start = self.frames.len();
        let refuse = |s: &Self| SessionError::Infeasible { choice, feasible: s.feasible_human() };
        match choice {
            Choice::Continue if self.checkpoint => {
                self.checkpoint = false;
                self.run(true)?;
            }
            Choice::ChangeOfMind if self.checkpoint => {
                self.checkpoint = false;
                let e = self.core.force_change_of_mind()?;
                self.log.push(Transition::Change);
                self.push_frame(&e.kind.to_string(), e.dt);
                self.run(false)?;
            }
            Choice::Action { .. } | Choice::Idle if self.core.pending() == Pending::Human => {
                let a = match choice {
                    Choice::Action { action_id } => ActionId(action_id),
                    _ => ActionId::IDLE,
                };
                if !a.is_idle() && !self.core.human_options().contains(&a) {
                    return Err(refuse(self));
                }
                self.core.apply_human(a, &mut RngChance::new(&mut self.rng))?;
                self.log.push(Transition::Human(a));
                self.push_frame("human_choice", 0);
                self.run(false)?;
            }
            _ => return Err(refuse(self)),
        }
        Ok(self.frames[start..].to_vec())
    }
}

/// Rebuilds the simulator state from a transition log.
pub fn replay(htm: Arc<Htm>, cfg: &ScenarioConfig, seed: u64, log: &[Transition]) -> Result<SimCore, DemdpError> {
    let mut cfg = cfg.clone();
    cfg.p_change = 0.0;
    let mut core = SimCore::new(htm, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in log {
        match *t {
            Transition::Human(a) => core.apply_human(a, &mut RngChance::new(&mut rng))?,
            Transition::Robot(a) => core.apply_robot(a, &mut RngChance::new(&mut rng))?,
            Transition::Advance => {
                core.advance(&mut RngChance::new(&mut rng))?;
            }
            Transition::Change => {
                core.force_change_of_mind()?;
            }
        }
    }
    Ok(core)
}
