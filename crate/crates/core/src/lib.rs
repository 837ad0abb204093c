//! Decision-transformer traffic signal control.
//!
//! The crate covers the whole offline-to-online pipeline: a queue-based
//! intersection simulator ([`sim`]), the per-intersection MDP ([`mdp`]),
//! rule-based behavior policies ([`behavior`]), offline datasets ([`data`]),
//! a small causal transformer with hypercomplex adapters ([`nn`]), and the
//! teacher / distillation / fine-tuning / evaluation loops ([`dtlight`]).
//!
//! ```no_run
//! use dtlight_core::{build_scenario, collect_datasets, ObservationLayout, TrainConfig};
//!
//! let cfg = TrainConfig::desk();
//! let net = build_scenario(&cfg.scenario)?;
//! let layout = ObservationLayout::for_network(&net, cfg.data.neighbor_scale)?;
//! let data = collect_datasets(&cfg.behavior, &net, &layout, 2, 0)?;
//! assert_eq!(data.len(), net.intersections.len());
//! # Ok::<(), dtlight_core::Error>(())
//! ```

pub mod behavior;
pub mod config;
pub mod data;
pub mod dtlight;
pub mod error;
pub mod mdp;
pub mod nn;
pub mod provenance;
pub mod report;
pub mod sim;

pub use behavior::{collect_datasets, BehaviorKind, BehaviorSpec};
pub use config::TrainConfig;
pub use data::{Dataset, SubTrajectory};
pub use dtlight::{EpisodeOutcome, KdWeights, RtgSchedule};
pub use error::{Error, Result};
pub use mdp::{AgentObservation, ObservationLayout};
pub use nn::{AdapterConfig, Checkpoint, ModelConfig, PolicyModel};
pub use provenance::Provenance;
pub use report::EvalReport;
pub use sim::{build_scenario, RoadNetwork, ScenarioParams, Simulator};
