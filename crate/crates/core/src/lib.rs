//! Planning and simulation for two-agent (human and robot) collaborative assembly.
//!
//! The task is a hierarchical task model ([`htm`]) executed under a discrete-event MDP
//! ([`demdp`]). Robot policies come from exhaustive decision-graph dynamic programming
//! ([`graph`]), masked tabular Q-learning ([`rl`]) or simple baselines; [`intent`] infers
//! the human's goal from hand motion and [`bench`] runs Monte-Carlo comparisons.

pub mod bench;
pub mod demdp;
pub mod graph;
pub mod htm;
pub mod intent;
pub mod policy;
pub mod rl;
pub mod scenario;
pub mod state;

pub use demdp::{Env, EventKind, EventModel, SimCore, StepOutcome};
pub use htm::{chair, parse_htm, ActionSpec, Capability, Htm, HtmError, NodeKind, TaskTree};
pub use scenario::ScenarioConfig;
pub use state::{ActionId, Agent, HumanAction, TaskState, WorldState};
