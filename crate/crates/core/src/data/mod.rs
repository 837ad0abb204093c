//! Offline trajectory datasets, return-to-go and sub-trajectory sampling.

mod dataset;
mod sampling;

pub use dataset::{Dataset, DatasetFile, DatasetHeader, StepTriple, SCHEMA_VERSION};
pub use sampling::{compute_rtg, max_offline_return, sample_batch, top_c_trajectories, SubTrajectory};
