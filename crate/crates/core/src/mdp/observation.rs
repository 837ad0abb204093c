use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{IntersectionId, NetworkState, RoadNetwork};

/// Features per incoming lane: queue length, approaching vehicles, accumulated wait.
pub const FEATURES_PER_LANE: usize = 3;

/// Padding layout shared by every agent of a scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationLayout {
    pub max_lanes: usize,
    pub max_neighbors: usize,
    /// Neighborhood discount δ in [0, 1].
    pub delta: f32,
}

impl ObservationLayout {
    pub fn for_network(net: &RoadNetwork, delta: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::InvalidParameter(format!(
                "neighbor discount must lie in [0, 1], got {delta}"
            )));
        }
        Ok(Self {
            max_lanes: net.max_incoming_lanes(),
            max_neighbors: net.max_neighbors(),
            delta,
        })
    }

    pub fn local_dim(&self) -> usize {
        self.max_lanes * FEATURES_PER_LANE
    }

    pub fn obs_dim(&self) -> usize {
        self.local_dim() * (1 + self.max_neighbors)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentObservation {
    pub local: Vec<f32>,
    pub neighbor_block: Vec<f32>,
}

impl AgentObservation {
    pub fn flatten(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.local.len() + self.neighbor_block.len());
        v.extend_from_slice(&self.local);
        v.extend_from_slice(&self.neighbor_block);
        v
    }
}

fn local_features(
    net: &RoadNetwork,
    state: &NetworkState,
    id: IntersectionId,
    layout: &ObservationLayout,
) -> Vec<f32> {
    let mut v = vec![0.0; layout.local_dim()];
    for (k, &lane) in net.intersections[id].incoming_lanes.iter().enumerate() {
        let o = state.lane(lane);
        v[k * FEATURES_PER_LANE] = o.queue_len as f32;
        v[k * FEATURES_PER_LANE + 1] = o.approaching as f32;
        v[k * FEATURES_PER_LANE + 2] = o.acc_wait_s as f32;
    }
    v
}

/// Local lane features plus δ-discounted neighbor features, zero-padded.
pub fn observe(
    net: &RoadNetwork,
    state: &NetworkState,
    id: IntersectionId,
    layout: &ObservationLayout,
) -> Result<AgentObservation> {
    let inter = net.intersection(id)?;
    let local = local_features(net, state, id, layout);
    let mut neighbor_block = vec![0.0; layout.local_dim() * layout.max_neighbors];
    for (slot, &n) in inter.neighbors.iter().enumerate() {
        let nv = local_features(net, state, n, layout);
        let dst = &mut neighbor_block[slot * layout.local_dim()..(slot + 1) * layout.local_dim()];
        for (d, s) in dst.iter_mut().zip(nv) {
            *d = layout.delta * s;
        }
    }
    Ok(AgentObservation {
        local,
        neighbor_block,
    })
}
