//! Event lifespans, feasible events and one-step event probabilities.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::htm::Htm;
use crate::scenario::ScenarioConfig;
use crate::state::{ActionId, HumanAction, WorldState};

use super::DemdpError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    /// Human action ends.
    H,
    /// Robot action ends.
    R,
    /// Human action detected.
    D,
    /// Human change of mind.
    C,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::H => "H",
            EventKind::R => "R",
            EventKind::D => "D",
            EventKind::C => "C",
        };
        f.write_str(s)
    }
}

/// Discrete distribution over nonnegative integer step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf(BTreeMap<u32, f64>);

impl Pmf {
    pub fn point(value: u32) -> Self {
        Pmf(BTreeMap::from([(value, 1.0)]))
    }

    /// Normalises nonnegative weights; `None` when the total mass is zero.
    pub fn from_weights(weights: impl IntoIterator<Item = (u32, f64)>) -> Option<Self> {
        let mut map = BTreeMap::new();
        for (k, w) in weights {
            if w > 0.0 {
                *map.entry(k).or_insert(0.0) += w;
            }
        }
        let total: f64 = map.values().sum();
        if total <= 0.0 {
            return None;
        }
        map.values_mut().for_each(|w| *w /= total);
        Some(Pmf(map))
    }

    pub fn prob(&self, value: u32) -> f64 {
        self.0.get(&value).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.0.iter().map(|(&k, &p)| (k, p))
    }

    pub fn min(&self) -> u32 {
        *self.0.keys().next().expect("pmf is nonempty")
    }

    pub fn max(&self) -> u32 {
        *self.0.keys().next_back().expect("pmf is nonempty")
    }

    pub fn mean(&self) -> f64 {
        self.iter().map(|(k, p)| k as f64 * p).sum()
    }

    /// `P(X < t)`.
    pub fn cdf_below(&self, t: u32) -> f64 {
        self.0.range(..t).map(|(_, p)| p).sum()
    }
}

/// Duration model: normal around the nominal value with standard deviation `cv * nominal`,
/// rounded to the nearest step and clamped to at least one step.
pub fn duration_pmf(nominal: u32, cv: f64) -> Pmf {
    let sigma = cv * nominal as f64;
    if sigma <= 0.0 {
        return Pmf::point(nominal.max(1));
    }
    let mu = nominal as f64;
    let normal = Normal::new(mu, sigma).expect("positive sigma");
    let lo = (mu - 8.0 * sigma).floor().max(1.0) as u32;
    let hi = (mu + 8.0 * sigma).ceil().max(1.0) as u32;
    Pmf::from_weights((lo..=hi).map(|k| {
        let upper = normal.cdf(k as f64 + 0.5);
        let lower = if k == 1 { 0.0 } else { normal.cdf(k as f64 - 0.5) };
        (k, upper - lower)
    }))
    .expect("normal mass near the mean")
}

/// Exponential weights `exp(-rate * k)` on `1..=max`, renormalised. `None` for an empty support.
pub fn truncated_exponential(rate: f64, max: u32) -> Option<Pmf> {
    if max == 0 {
        return None;
    }
    Pmf::from_weights((1..=max).map(|k| (k, (-rate * k as f64).exp())))
}

/// `P(A < B)` for independent `A` and `B`.
pub fn prob_strictly_before(a: &Pmf, b: &Pmf) -> f64 {
    b.iter().map(|(v, pb)| pb * a.cdf_below(v)).sum()
}

/// Per-action coefficient of variation, falling back to the scenario default.
pub fn effective_cv(htm: &Htm, cfg: &ScenarioConfig, id: ActionId) -> f64 {
    htm.spec(id).duration_cv.unwrap_or(cfg.duration_cv)
}

/// Effective failure probability, honouring the scenario-wide override.
pub fn effective_p_fail(htm: &Htm, cfg: &ScenarioConfig, id: ActionId) -> f64 {
    cfg.p_fail.unwrap_or(htm.spec(id).p_fail)
}

/// The DE-MDP's stochastic model evaluated on observable states.
#[derive(Debug, Clone, Copy)]
pub struct EventModel<'a> {
    pub htm: &'a Htm,
    pub cfg: &'a ScenarioConfig,
}

impl<'a> EventModel<'a> {
    pub fn new(htm: &'a Htm, cfg: &'a ScenarioConfig) -> Self {
        EventModel { htm, cfg }
    }

    /// The action the human is executing on their own (not idle, not waiting for or in a joint action).
    fn human_individual(&self, s: &WorldState) -> Option<ActionId> {
        match s.human_action {
            HumanAction::Action(a) if !self.htm.is_joint(a) => Some(a),
            _ => None,
        }
    }

    /// Robot action in force: the ongoing one, otherwise the choice `a`.
    fn robot_in_force(&self, s: &WorldState, a: ActionId) -> ActionId {
        if s.robot_action.is_idle() {
            a
        } else {
            s.robot_action
        }
    }

    fn remaining(&self, nominal: u32, cv: f64, elapsed: u32) -> Pmf {
        let full = duration_pmf(nominal, cv);
        Pmf::from_weights(full.iter().filter(|&(k, _)| k >= elapsed).map(|(k, p)| (k - elapsed, p)))
            // Overdue: the action ends as soon as it can be observed.
            .unwrap_or_else(|| Pmf::point(0))
    }

    fn human_pmf(&self, s: &WorldState) -> Option<Pmf> {
        self.human_individual(s).map(|h| {
            let spec = self.htm.spec(h);
            self.remaining(spec.duration_h, effective_cv(self.htm, self.cfg, h), s.t_h)
        })
    }

    fn robot_pmf(&self, s: &WorldState, a: ActionId) -> Option<Pmf> {
        let r = self.robot_in_force(s, a);
        (!r.is_idle()).then(|| {
            let spec = self.htm.spec(r);
            let elapsed = if s.robot_action.is_idle() { 0 } else { s.t_r };
            self.remaining(spec.duration_r, effective_cv(self.htm, self.cfg, r), elapsed)
        })
    }

    /// Change-of-mind lifespan: truncated exponential on `1..h-1` for each possible remaining
    /// human time `h`, mixed over the human lifespan.
    fn change_pmf(&self, human: &Pmf) -> Option<Pmf> {
        let mut weights = BTreeMap::new();
        for (h, ph) in human.iter() {
            if let Some(c) = truncated_exponential(self.cfg.change_rate, h.saturating_sub(1)) {
                for (k, pc) in c.iter() {
                    *weights.entry(k).or_insert(0.0) += ph * pc;
                }
            }
        }
        Pmf::from_weights(weights)
    }

    /// `Γ(s)` given the robot action `a` chosen (or in progress).
    pub fn feasible_events(&self, s: &WorldState, a: ActionId) -> Vec<EventKind> {
        if !s.detected {
            return vec![EventKind::D];
        }
        let mut out = Vec::new();
        let human = self.human_pmf(s);
        if human.is_some() {
            out.push(EventKind::H);
        }
        if !self.robot_in_force(s, a).is_idle() {
            out.push(EventKind::R);
        }
        if self.cfg.p_change > 0.0 && human.as_ref().and_then(|h| self.change_pmf(h)).is_some() {
            out.push(EventKind::C);
        }
        out
    }

    /// Lifespan `ℓ(s, a, e)`.
    pub fn lifespan_pmf(&self, s: &WorldState, a: ActionId, e: EventKind) -> Result<Pmf, DemdpError> {
        if !self.feasible_events(s, a).contains(&e) {
            return Err(DemdpError::InfeasibleEvent(e));
        }
        let pmf = match e {
            EventKind::D => Pmf::point(self.cfg.detect_delay.saturating_sub(s.t_h).max(1)),
            EventKind::H => self.human_pmf(s).expect("H feasible"),
            EventKind::R => self.robot_pmf(s, a).expect("R feasible"),
            EventKind::C => self.change_pmf(&self.human_pmf(s).expect("C feasible")).expect("C feasible"),
        };
        Ok(pmf)
    }

    /// Probability of each feasible event being the next one, by exact enumeration of the
    /// independent lifespans. Ties between `H` and `R` resolve to `R`; a change of mind
    /// must strictly precede the robot's completion.
    pub fn event_probabilities(&self, s: &WorldState, a: ActionId) -> Result<BTreeMap<EventKind, f64>, DemdpError> {
        if !s.detected {
            return Ok(BTreeMap::from([(EventKind::D, 1.0)]));
        }
        let human = self.human_pmf(s);
        let robot = self.robot_pmf(s, a);
        if human.is_none() && robot.is_none() {
            return Err(DemdpError::NoFeasibleEvent);
        }
        let never = Pmf::point(u32::MAX);
        let hp = human.as_ref().unwrap_or(&never);
        let rp = robot.as_ref().unwrap_or(&never);
        let p_change = if human.is_some() { self.cfg.p_change } else { 0.0 };

        let mut out = BTreeMap::new();
        for (h, ph) in hp.iter() {
            let change = if p_change > 0.0 && h != u32::MAX {
                truncated_exponential(self.cfg.change_rate, h.saturating_sub(1))
            } else {
                None
            };
            for (r, pr) in rp.iter() {
                let w = ph * pr;
                let first = if r <= h { EventKind::R } else { EventKind::H };
                let p_c = match &change {
                    Some(c) => p_change * c.cdf_below(r),
                    _ => 0.0,
                };
                if p_c > 0.0 {
                    *out.entry(EventKind::C).or_insert(0.0) += w * p_c;
                }
                *out.entry(first).or_insert(0.0) += w * (1.0 - p_c);
            }
        }
        if p_change > 0.0 {
            out.entry(EventKind::C).or_insert(0.0);
        }
        Ok(out)
    }
}
