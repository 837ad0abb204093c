//! Per-intersection MDP agents on top of the simulator.

mod observation;
mod rollout;

pub use observation::{observe, AgentObservation, ObservationLayout, FEATURES_PER_LANE};
pub use rollout::{rollout, AgentPolicy, AgentView, Rollout, StepRecord, Trajectory};
