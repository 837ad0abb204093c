//! Deterministic queue-based microsimulator of signalized intersections.

mod engine;
mod network;
mod scenario;

pub use engine::{
    average_delay, pressure, stream_seed, IntersectionState, LaneObservation, NetworkState,
    SimMetrics, Simulator, StepOutcome,
};
pub use network::{
    EntryLane, Intersection, IntersectionId, Lane, LaneId, Link, Movement, Phase, RoadNetwork,
    Route, Turn,
};
pub use scenario::{
    build_scenario, rate_presets, ScenarioParams, GRID_2X2, SCENARIOS, SINGLE_2LANE, SINGLE_3LANE,
};
