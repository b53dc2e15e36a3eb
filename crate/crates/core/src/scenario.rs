use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation parameters shared by every episode of a scenario.
///
/// All times are integer multiples of the base step; the wall-clock length of a step is
/// metadata only and never enters the dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Probability that the human changes their mind during an action.
    pub p_change: f64,
    /// Steps between the start of a human action and its detection.
    pub detect_delay: u32,
    /// Rate of the truncated exponential governing the time of a change of mind.
    pub change_rate: f64,
    pub gamma: f64,
    /// Default coefficient of variation for action durations.
    pub duration_cv: f64,
    pub seed: u64,
    /// When set, overrides every action's failure probability.
    pub p_fail: Option<f64>,
    /// Seconds per base step, for reports.
    pub base_step_seconds: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            p_change: 0.0,
            detect_delay: 3,
            change_rate: 0.5,
            gamma: 1.0,
            duration_cv: 0.1,
            seed: 0,
            p_fail: None,
            base_step_seconds: None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("scenario syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl ScenarioConfig {
    /// Nominal durations, no failures, no changes of mind.
    pub fn deterministic() -> Self {
        ScenarioConfig { duration_cv: 0.0, ..Default::default() }
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| ScenarioError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(0.0..=1.0).contains(&self.p_change) {
            return bad(format!("p_change {} outside [0, 1]", self.p_change));
        }
        if self.detect_delay < 1 {
            return bad("detect_delay must be at least 1".into());
        }
        if !(self.change_rate > 0.0 && self.change_rate.is_finite()) {
            return bad(format!("change_rate {} must be positive", self.change_rate));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(self.duration_cv >= 0.0 && self.duration_cv.is_finite()) {
            return bad(format!("duration_cv {} must be nonnegative", self.duration_cv));
        }
        if let Some(p) = self.p_fail {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("p_fail {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}
