//! The offline dataset file format (one JSON document per agent).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sampling::compute_rtg;
use crate::error::{Error, Result};
use crate::mdp::{StepRecord, Trajectory};
use crate::provenance::{read_json, write_json_atomic, Provenance};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub scenario: String,
    pub agent_id: usize,
    pub behavior: String,
    pub seed: u64,
    pub obs_dim: usize,
    pub num_actions: usize,
    pub control_step_s: u32,
}

/// `[obs, action, reward]` triple as stored on disk.
pub type StepTriple = (Vec<f32>, usize, f64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub episodes: Vec<Vec<StepTriple>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl DatasetFile {
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        let bad = |msg: String| Err(Error::Dataset(msg));
        if h.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema version {}", h.schema_version));
        }
        let Some(first) = self.episodes.first() else {
            return bad("dataset has no episodes".into());
        };
        let len = first.len();
        if len == 0 {
            return bad("empty episode".into());
        }
        for (e, ep) in self.episodes.iter().enumerate() {
            if ep.len() != len {
                return bad(format!("episode {e} has {} steps, expected {len}", ep.len()));
            }
            for (t, (obs, action, reward)) in ep.iter().enumerate() {
                if obs.len() != h.obs_dim {
                    return bad(format!("episode {e} step {t}: obs length {}", obs.len()));
                }
                if *action >= h.num_actions {
                    return bad(format!("episode {e} step {t}: action {action} out of range"));
                }
                if !reward.is_finite() {
                    return bad(format!("episode {e} step {t}: non-finite reward"));
                }
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file: DatasetFile = read_json(path)?;
        file.validate()?;
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_json_atomic(path, self)
    }
}

/// In-memory dataset with per-episode return-to-go.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Trajectory>,
    pub rtg: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, episodes: Vec<Trajectory>) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Dataset("dataset has no episodes".into()));
        }
        let rtg = episodes.iter().map(|e| compute_rtg(&e.rewards())).collect();
        Ok(Self {
            header,
            episodes,
            rtg,
        })
    }

    pub fn from_file(file: DatasetFile) -> Result<Self> {
        file.validate()?;
        let agent = file.header.agent_id;
        let seed = file.header.seed;
        let episodes = file
            .episodes
            .into_iter()
            .enumerate()
            .map(|(e, steps)| {
                let records = steps
                    .into_iter()
                    .map(|(obs, action, reward)| StepRecord {
                        obs,
                        action,
                        reward,
                    })
                    .collect();
                Trajectory::new(agent, seed.wrapping_add(e as u64), records)
            })
            .collect();
        Self::new(file.header, episodes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(DatasetFile::read(path)?)
    }

    pub fn to_file(&self, provenance: Option<Provenance>) -> DatasetFile {
        DatasetFile {
            header: self.header.clone(),
            episodes: self
                .episodes
                .iter()
                .map(|ep| {
                    ep.records
                        .iter()
                        .map(|r| (r.obs.clone(), r.action, r.reward))
                        .collect()
                })
                .collect(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.header.obs_dim
    }

    pub fn num_actions(&self) -> usize {
        self.header.num_actions
    }

    /// Splits off the last `holdout` episodes (at least one episode stays in training).
    pub fn split(&self, holdout: usize) -> Result<(Dataset, Dataset)> {
        if holdout == 0 || holdout >= self.len() {
            return Err(Error::Dataset(format!(
                "cannot hold out {holdout} of {} episodes",
                self.len()
            )));
        }
        let cut = self.len() - holdout;
        let train = Dataset::new(self.header.clone(), self.episodes[..cut].to_vec())?;
        let held = Dataset::new(self.header.clone(), self.episodes[cut..].to_vec())?;
        Ok((train, held))
    }
}
