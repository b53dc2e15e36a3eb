//! Discrete-event MDP over the collaborative assembly: lifespans, event probabilities,
//! the simulator core and an episodic environment.

mod env;
mod lifespan;
mod sim;

use thiserror::Error;

use crate::state::{ActionId, Agent};

pub use env::{
    choose_human_action, episode_seed, DetectionModel, Env, HumanModel, LowestIdHuman, StepOutcome, TraceRecord, UniformHuman,
};
pub use lifespan::{
    duration_pmf, effective_cv, effective_p_fail, prob_strictly_before, truncated_exponential, EventKind, EventModel,
    Pmf,
};
pub use sim::{Chance, EpisodeCounters, EventRecord, NominalChance, Pending, RngChance, SimCore, SimKey};

#[derive(Debug, Error, PartialEq)]
pub enum DemdpError {
    #[error("event {0} is not feasible in this state")]
    InfeasibleEvent(EventKind),
    #[error("no event can fire: neither agent has an action in progress")]
    NoFeasibleEvent,
    #[error("{choice} is not feasible for the {agent:?}; feasible: {feasible:?}")]
    Infeasible { agent: Agent, choice: ActionId, feasible: Vec<ActionId> },
    #[error("not waiting for a {0:?} decision")]
    NotAwaiting(Agent),
    #[error("episode already finished")]
    EpisodeDone,
    #[error("change of mind requires a detected individual human action in progress")]
    ChangeNotAllowed,
    #[error("robot has no feasible action")]
    Deadlock,
}
