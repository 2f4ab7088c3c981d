//! Grid-world search and rescue.
//!
//! A team of ground (UGV) and aerial (UAV) vehicles starts at the muster site.
//! Victims scattered over the other sites lose health every step; a ground
//! vehicle can carry one victim at a time back to the muster (+1), and a victim
//! whose health runs out is lost (-1). Agents act through macro-actions and see
//! only a five-field summary of what they sensed or heard over short-range links.

pub mod macros;
pub mod observe;
pub mod runner;
pub mod scenario;
pub mod world;

pub use macros::{initiable, run_macro_decision, MacroAction, MacroExec};
pub use observe::{build_observation, observe_and_communicate, Knowledge, ObservationVector, SiteKnowledge};
pub use runner::{
    rollout_evaluate, rollout_with, run_episode, DecisionContext, EpisodeOutcome, FscTeam, OmniscientGreedy,
    RolloutSummary, TeamPolicy,
};
pub use scenario::{AgentKind, Cell, Rect, ScenarioConfig};
pub use world::{simulate_primitive_step, PrimitiveAction, VictimStatus, WorldState};
