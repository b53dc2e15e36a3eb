//! Event-driven simulator core: full (observable and hidden) state and the transition rules.
//!
//! The core never chooses anything itself. It stops whenever the human or the robot has to
//! decide, and draws all randomness through a [`Chance`] source, so the same code drives
//! Monte-Carlo episodes, graph enumeration and interactive sessions.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::htm::Htm;
use crate::scenario::ScenarioConfig;
use crate::state::{ActionId, Agent, HumanAction, TaskState, WorldState};

use super::lifespan::{effective_cv, effective_p_fail, truncated_exponential, EventKind};
use super::DemdpError;

/// Source of every random quantity in the dynamics.
pub trait Chance {
    /// Realised duration of an action with the given nominal length.
    fn duration(&mut self, nominal: u32, cv: f64) -> u32;
    fn fails(&mut self, p_fail: f64) -> bool;
    /// Offset of a change of mind within `1..=max`, or `None` if the human keeps the action.
    fn change_offset(&mut self, p_change: f64, rate: f64, max: u32) -> Option<u32>;
    /// Detection latency for a human action that just started.
    fn detection_delay(&mut self, _human: ActionId, default: u32) -> u32 {
        default
    }
}

/// Nominal durations, no failures, no changes of mind.
#[derive(Debug, Default, Clone, Copy)]
pub struct NominalChance;

impl Chance for NominalChance {
    fn duration(&mut self, nominal: u32, _cv: f64) -> u32 {
        nominal.max(1)
    }

    fn fails(&mut self, p_fail: f64) -> bool {
        p_fail >= 1.0
    }

    fn change_offset(&mut self, _p: f64, _rate: f64, _max: u32) -> Option<u32> {
        None
    }
}

/// Samples from the scenario's distributions. Degenerate draws (zero variance, zero
/// probability) consume no randomness.
pub struct RngChance<'a, R: Rng + ?Sized> {
    pub rng: &'a mut R,
}

impl<'a, R: Rng + ?Sized> RngChance<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        RngChance { rng }
    }
}

pub(crate) fn sample_duration<R: Rng + ?Sized>(rng: &mut R, nominal: u32, cv: f64) -> u32 {
    let sigma = cv * nominal as f64;
    if sigma <= 0.0 {
        return nominal.max(1);
    }
    let normal = rand_distr::Normal::new(nominal as f64, sigma).expect("positive sigma");
    let x: f64 = rng.sample(normal);
    x.round().max(1.0) as u32
}

impl<R: Rng + ?Sized> Chance for RngChance<'_, R> {
    fn duration(&mut self, nominal: u32, cv: f64) -> u32 {
        sample_duration(self.rng, nominal, cv)
    }

    fn fails(&mut self, p_fail: f64) -> bool {
        if p_fail <= 0.0 {
            false
        } else if p_fail >= 1.0 {
            true
        } else {
            self.rng.random_bool(p_fail)
        }
    }

    fn change_offset(&mut self, p_change: f64, rate: f64, max: u32) -> Option<u32> {
        if p_change <= 0.0 || max == 0 {
            return None;
        }
        if p_change < 1.0 && !self.rng.random_bool(p_change) {
            return None;
        }
        let pmf = truncated_exponential(rate, max)?;
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (k, p) in pmf.iter() {
            acc += p;
            if u < acc {
                return Some(k);
            }
        }
        Some(pmf.max())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum HumanPhase {
    Idle,
    Working { action: ActionId, end: u64 },
    /// Chose a joint action and waits for the robot to join.
    Waiting { action: ActionId },
    /// Executing a joint action; its timing lives in the robot phase.
    Joint { action: ActionId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum RobotPhase {
    Idle,
    Working { action: ActionId, end: u64 },
}

/// One applied event. Events sharing an instant are applied in the order D, R, H and all
/// but the first carry `dt = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub kind: EventKind,
    pub dt: u64,
    pub time: u64,
    /// Action that ended (H, R), was detected (D) or was abandoned (C).
    pub action: Option<ActionId>,
    /// Outcome for H and R.
    pub success: Option<bool>,
}

/// Who has to act before the simulation can advance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pending {
    Human,
    Robot,
    Advance,
    Done,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeCounters {
    pub events: u32,
    pub changes: u32,
    pub failures: u32,
}

#[derive(Debug, Clone)]
pub struct SimCore {
    htm: Arc<Htm>,
    cfg: ScenarioConfig,
    now: u64,
    task: TaskState,
    human: HumanPhase,
    human_start: u64,
    detected: bool,
    detect_at: u64,
    robot: RobotPhase,
    robot_start: u64,
    change_at: Option<u64>,
    need_human: bool,
    need_robot: bool,
    abandoned: Option<ActionId>,
    done: bool,
    counters: EpisodeCounters,
}

impl SimCore {
    /// Fresh episode at time zero, waiting for the human's first choice.
    pub fn new(htm: Arc<Htm>, cfg: ScenarioConfig) -> Self {
        let n = htm.n();
        SimCore {
            htm,
            cfg,
            now: 0,
            task: TaskState::new(n),
            human: HumanPhase::Idle,
            human_start: 0,
            detected: false,
            detect_at: 0,
            robot: RobotPhase::Idle,
            robot_start: 0,
            change_at: None,
            need_human: true,
            need_robot: true,
            abandoned: None,
            done: false,
            counters: EpisodeCounters::default(),
        }
    }

    pub fn htm(&self) -> &Htm {
        &self.htm
    }

    pub fn htm_arc(&self) -> &Arc<Htm> {
        &self.htm
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn task(&self) -> &TaskState {
        &self.task
    }

    pub fn counters(&self) -> EpisodeCounters {
        self.counters
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn pending(&self) -> Pending {
        if self.done {
            Pending::Done
        } else if self.need_human {
            Pending::Human
        } else if self.need_robot {
            Pending::Robot
        } else {
            Pending::Advance
        }
    }

    /// Absolute time of the scheduled change of mind, if any.
    pub fn pending_change(&self) -> Option<u64> {
        self.change_at
    }

    /// Absolute end time of the human's individual action in progress.
    pub fn human_end(&self) -> Option<u64> {
        match self.human {
            HumanPhase::Working { end, .. } => Some(end),
            _ => None,
        }
    }

    /// True if the human has picked a joint action and waits for the robot.
    pub fn human_waiting(&self) -> bool {
        matches!(self.human, HumanPhase::Waiting { .. })
    }

    /// True while the human executes an individual action that has been detected.
    pub fn human_can_change_mind(&self) -> bool {
        matches!(self.human, HumanPhase::Working { .. }) && self.detected && !self.need_human
    }

    /// The human's true current action (idle while idle), regardless of detection.
    pub fn true_human_action(&self) -> ActionId {
        match self.human {
            HumanPhase::Idle => ActionId::IDLE,
            HumanPhase::Working { action, .. } | HumanPhase::Waiting { action } | HumanPhase::Joint { action } => action,
        }
    }

    pub fn world_state(&self) -> WorldState {
        let human_action = if !self.detected {
            HumanAction::Unknown
        } else if self.human == HumanPhase::Idle {
            HumanAction::Idle
        } else {
            HumanAction::Action(self.true_human_action())
        };
        let since = |start: u64| (self.now - start) as u32;
        let (robot_action, t_r) = match self.robot {
            RobotPhase::Idle => (ActionId::IDLE, 0),
            RobotPhase::Working { action, .. } => (action, since(self.robot_start)),
        };
        let t_h = match self.human {
            _ if !self.detected => since(self.human_start),
            HumanPhase::Working { .. } => since(self.human_start),
            HumanPhase::Joint { .. } => t_r,
            HumanPhase::Idle | HumanPhase::Waiting { .. } => 0,
        };
        WorldState { task: self.task.clone(), human_action, t_h, t_r, detected: self.detected, robot_action }
    }

    /// State the human decides on: the robot's commitment is visible, the abandoned action is not offered again.
    pub fn human_options(&self) -> Vec<ActionId> {
        let s = self.world_state();
        let all: Vec<ActionId> =
            self.htm.feasible_actions(&s, Agent::Human).into_iter().filter(|a| !a.is_idle()).collect();
        match self.abandoned {
            Some(x) if all.iter().any(|&a| a != x) => all.into_iter().filter(|&a| a != x).collect(),
            _ => all,
        }
    }

    pub fn robot_options(&self) -> Vec<ActionId> {
        self.htm.feasible_actions(&self.world_state(), Agent::Robot)
    }

    pub fn apply_human(&mut self, choice: ActionId, chance: &mut impl Chance) -> Result<(), DemdpError> {
        if !self.need_human {
            return Err(DemdpError::NotAwaiting(Agent::Human));
        }
        let options = self.human_options();
        if !choice.is_idle() && !options.contains(&choice) {
            return Err(DemdpError::Infeasible { agent: Agent::Human, choice, feasible: options });
        }
        self.need_human = false;
        self.abandoned = None;
        if choice.is_idle() {
            // Continuing to idle after a detected idle keeps the detection.
            if !(self.human == HumanPhase::Idle && self.detected) {
                self.human = HumanPhase::Idle;
                self.begin_detection(ActionId::IDLE, chance);
            }
            self.change_at = None;
            return Ok(());
        }
        self.begin_detection(choice, chance);
        if self.htm.is_joint(choice) {
            self.human = HumanPhase::Waiting { action: choice };
            self.change_at = None;
        } else {
            let spec = self.htm.spec(choice);
            let end = self.now + chance.duration(spec.duration_h, effective_cv(&self.htm, &self.cfg, choice)) as u64;
            self.human = HumanPhase::Working { action: choice, end };
            // Pre-sampled change of mind, anchored at detection.
            let window = end.saturating_sub(self.detect_at).saturating_sub(1) as u32;
            self.change_at = chance
                .change_offset(self.cfg.p_change, self.cfg.change_rate, window)
                .map(|o| self.detect_at + o as u64);
        }
        Ok(())
    }

    fn begin_detection(&mut self, action: ActionId, chance: &mut impl Chance) {
        self.human_start = self.now;
        self.detected = false;
        self.detect_at = self.now + chance.detection_delay(action, self.cfg.detect_delay).max(1) as u64;
    }

    pub fn apply_robot(&mut self, choice: ActionId, chance: &mut impl Chance) -> Result<(), DemdpError> {
        if self.need_human || !self.need_robot {
            return Err(DemdpError::NotAwaiting(Agent::Robot));
        }
        let options = self.robot_options();
        if !options.contains(&choice) {
            return Err(DemdpError::Infeasible { agent: Agent::Robot, choice, feasible: options });
        }
        self.need_robot = false;
        self.robot_start = self.now;
        if choice.is_idle() {
            self.robot = RobotPhase::Idle;
            return Ok(());
        }
        let spec = self.htm.spec(choice);
        let end = self.now + chance.duration(spec.duration_r, effective_cv(&self.htm, &self.cfg, choice)) as u64;
        self.robot = RobotPhase::Working { action: choice, end };
        if self.htm.is_joint(choice) {
            debug_assert_eq!(self.human, HumanPhase::Waiting { action: choice });
            self.human = HumanPhase::Joint { action: choice };
            self.human_start = self.now;
        }
        Ok(())
    }

    /// Interrupts the human's detected individual action right now (interactive sessions).
    pub fn force_change_of_mind(&mut self) -> Result<EventRecord, DemdpError> {
        if !self.human_can_change_mind() {
            return Err(DemdpError::ChangeNotAllowed);
        }
        self.counters.events += 1;
        Ok(self.fire_change(0))
    }

    fn next_event_time(&self) -> Option<u64> {
        if !self.detected {
            return Some(self.detect_at.max(self.now));
        }
        let robot = match self.robot {
            RobotPhase::Working { end, .. } => Some(end),
            RobotPhase::Idle => None,
        };
        let human = match self.human {
            HumanPhase::Working { end, .. } => Some(end),
            _ => None,
        };
        [robot, human, self.change_at].into_iter().flatten().min().map(|t| t.max(self.now))
    }

    /// Applies every event due at the next event instant.
    pub fn advance(&mut self, chance: &mut impl Chance) -> Result<Vec<EventRecord>, DemdpError> {
        match self.pending() {
            Pending::Advance => {}
            Pending::Done => return Err(DemdpError::EpisodeDone),
            Pending::Human => return Err(DemdpError::NotAwaiting(Agent::Human)),
            Pending::Robot => return Err(DemdpError::NotAwaiting(Agent::Robot)),
        }
        let t = self.next_event_time().ok_or(DemdpError::NoFeasibleEvent)?;
        let mut dt = t - self.now;
        self.now = t;
        let mut out = Vec::new();

        if !self.detected && self.detect_at <= t {
            self.detected = true;
            if self.robot == RobotPhase::Idle {
                self.need_robot = true;
            }
            let action = Some(self.true_human_action()).filter(|a| !a.is_idle());
            out.push(EventRecord { kind: EventKind::D, dt, time: t, action, success: None });
            dt = 0;
        }
        if self.detected {
            if matches!(self.robot, RobotPhase::Working { end, .. } if end <= t) {
                out.push(self.fire_robot_end(dt, chance));
                dt = 0;
            }
            if matches!(self.human, HumanPhase::Working { end, .. } if end <= t) {
                out.push(self.fire_human_end(dt, chance));
                dt = 0;
            }
            if self.change_at == Some(t) {
                out.push(self.fire_change(dt));
            }
        }
        debug_assert!(!out.is_empty(), "an event fires at every advance");
        self.counters.events += out.len() as u32;
        if self.task.is_complete() {
            self.done = true;
            self.need_human = false;
            self.need_robot = false;
        }
        Ok(out)
    }

    fn record_outcome(&mut self, action: ActionId, success: bool) {
        let base = self.htm.base_of(action);
        if success {
            self.task.set(base, 1);
        } else {
            self.task.set(base, -1);
            self.counters.failures += 1;
        }
    }

    fn fire_robot_end(&mut self, dt: u64, chance: &mut impl Chance) -> EventRecord {
        let RobotPhase::Working { action, .. } = self.robot else { unreachable!() };
        let success = !chance.fails(effective_p_fail(&self.htm, &self.cfg, action));
        self.record_outcome(action, success);
        self.robot = RobotPhase::Idle;
        self.robot_start = self.now;
        self.need_robot = true;
        match self.human {
            HumanPhase::Joint { .. } => self.release_human(),
            HumanPhase::Idle => self.need_human = true,
            HumanPhase::Working { end, .. } => {
                // The pending change of mind is preempted; draw afresh for the rest of the action.
                let window = end.saturating_sub(self.now).saturating_sub(1) as u32;
                self.change_at = chance
                    .change_offset(self.cfg.p_change, self.cfg.change_rate, window)
                    .map(|o| self.now + o as u64);
            }
            HumanPhase::Waiting { .. } => {}
        }
        EventRecord { kind: EventKind::R, dt, time: self.now, action: Some(action), success: Some(success) }
    }

    fn fire_human_end(&mut self, dt: u64, chance: &mut impl Chance) -> EventRecord {
        let HumanPhase::Working { action, .. } = self.human else { unreachable!() };
        let success = !chance.fails(effective_p_fail(&self.htm, &self.cfg, action));
        self.record_outcome(action, success);
        self.release_human();
        EventRecord { kind: EventKind::H, dt, time: self.now, action: Some(action), success: Some(success) }
    }

    fn fire_change(&mut self, dt: u64) -> EventRecord {
        let abandoned = self.true_human_action();
        self.release_human();
        self.abandoned = Some(abandoned);
        self.robot = RobotPhase::Idle;
        self.robot_start = self.now;
        self.need_robot = true;
        self.counters.changes += 1;
        EventRecord { kind: EventKind::C, dt, time: self.now, action: Some(abandoned), success: None }
    }

    fn release_human(&mut self) {
        self.human = HumanPhase::Idle;
        self.human_start = self.now;
        self.detected = false;
        self.change_at = None;
        self.need_human = true;
    }

    /// Canonical key over the full state, used by the decision graph. Remaining times replace
    /// elapsed times so that equivalent states share a key.
    pub fn key(&self) -> SimKey {
        let rem = |t: u64| t.saturating_sub(self.now) as u32;
        let (human_kind, human_action, human_rem) = match self.human {
            HumanPhase::Idle => (b'i', ActionId::IDLE, 0),
            HumanPhase::Working { action, end } => (b'w', action, rem(end)),
            HumanPhase::Waiting { action } => (b'j', action, 0),
            HumanPhase::Joint { action } => (b'J', action, 0),
        };
        let (robot_action, robot_rem) = match self.robot {
            RobotPhase::Idle => (ActionId::IDLE, 0),
            RobotPhase::Working { action, end } => (action, rem(end)),
        };
        SimKey {
            task: self.task.clone(),
            human_kind,
            human_action,
            human_rem,
            detected: self.detected,
            detect_rem: if self.detected { 0 } else { rem(self.detect_at) },
            robot_action,
            robot_rem,
            change_rem: self.change_at.map(rem),
            need_human: self.need_human,
            need_robot: self.need_robot,
            abandoned: self.abandoned,
        }
    }
}

/// Canonical full-state key. Injective on everything that influences future dynamics.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SimKey {
    pub task: TaskState,
    human_kind: u8,
    human_action: ActionId,
    human_rem: u32,
    detected: bool,
    detect_rem: u32,
    robot_action: ActionId,
    robot_rem: u32,
    change_rem: Option<u32>,
    need_human: bool,
    need_robot: bool,
    abandoned: Option<ActionId>,
}

impl fmt::Display for SimKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in self.task.values() {
            f.write_str(match v {
                1 => "+",
                -1 => "-",
                _ => "0",
            })?;
        }
        write!(
            f,
            "|h={}{}:{}|d={}:{}|r={}:{}|c={}|n={}{}|x={}",
            self.human_kind as char,
            self.human_action.0,
            self.human_rem,
            u8::from(self.detected),
            self.detect_rem,
            self.robot_action.0,
            self.robot_rem,
            self.change_rem.map_or("-".to_string(), |c| c.to_string()),
            u8::from(self.need_human),
            u8::from(self.need_robot),
            self.abandoned.map_or("-".to_string(), |a| a.0.to_string()),
        )
    }
}

impl std::str::FromStr for SimKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed state key `{s}`");
        let parts: Vec<&str> = s.split('|').collect();
        let [task, h, d, r, c, n, x] = parts.as_slice() else { return Err(bad()) };
        let task = TaskState::from_values(
            task.chars()
                .map(|ch| match ch {
                    '+' => Ok(1),
                    '-' => Ok(-1),
                    '0' => Ok(0),
                    _ => Err(bad()),
                })
                .collect::<Result<_, _>>()?,
        )
        .ok_or_else(bad)?;
        let field = |p: &str, prefix: &str| p.strip_prefix(prefix).map(str::to_owned).ok_or_else(bad);
        let pair = |p: String| -> Result<(String, String), String> {
            let (a, b) = p.split_once(':').ok_or_else(bad)?;
            Ok((a.to_owned(), b.to_owned()))
        };
        let num = |v: &str| v.parse::<u32>().map_err(|_| bad());
        let opt = |v: &str| if v == "-" { Ok(None) } else { num(v).map(Some) };

        let (hk, hrem) = pair(field(h, "h=")?)?;
        let mut hk_chars = hk.chars();
        let human_kind = hk_chars.next().ok_or_else(bad)? as u8;
        let human_action = ActionId(num(hk_chars.as_str())? as u16);
        let (det, drem) = pair(field(d, "d=")?)?;
        let (ra, rrem) = pair(field(r, "r=")?)?;
        let needs = field(n, "n=")?;
        let needs: Vec<char> = needs.chars().collect();
        if needs.len() != 2 {
            return Err(bad());
        }
        Ok(SimKey {
            task,
            human_kind,
            human_action,
            human_rem: num(&hrem)?,
            detected: det == "1",
            detect_rem: num(&drem)?,
            robot_action: ActionId(num(&ra)? as u16),
            robot_rem: num(&rrem)?,
            change_rem: opt(&field(c, "c=")?)?,
            need_human: needs[0] == '1',
            need_robot: needs[1] == '1',
            abandoned: opt(&field(x, "x=")?)?.map(|a| ActionId(a as u16)),
        })
    }
}
