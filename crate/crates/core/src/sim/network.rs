//! Static road-network topology: lanes, links, phases and intersections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type LaneId = usize;
pub type IntersectionId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Left,
    Through,
    Right,
}

/// Where a vehicle goes after joining a lane's queue, with its relative weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub to: LaneId,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    pub name: String,
    /// Intersection this lane feeds; `None` for boundary exit lanes.
    pub intersection: Option<IntersectionId>,
    /// Movement choice for vehicles queueing on this lane. Empty for exit lanes.
    pub routes: Vec<Route>,
}

impl Lane {
    pub fn is_exit(&self) -> bool {
        self.intersection.is_none()
    }
}

/// A permitted traversal from an incoming lane to an outgoing lane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Movement {
    pub from: LaneId,
    pub to: LaneId,
    pub turn: Turn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub id: usize,
    pub name: String,
    pub movements: Vec<Movement>,
    /// Vehicles per control step per movement.
    pub saturation_flow: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: IntersectionId,
    pub incoming_lanes: Vec<LaneId>,
    pub outgoing_lanes: Vec<LaneId>,
    pub phases: Vec<Phase>,
    /// Right turns: served every step regardless of the active phase.
    pub always_green: Vec<Movement>,
    pub always_green_saturation: u32,
    pub neighbors: Vec<IntersectionId>,
}

impl Intersection {
    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }
}

/// Connection from an incoming lane, through the junction, to the lane it feeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub source: LaneId,
    pub destination: LaneId,
    pub travel_time_s: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryLane {
    pub lane: LaneId,
    /// Vehicles per second.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub scenario: String,
    pub lanes: Vec<Lane>,
    pub intersections: Vec<Intersection>,
    pub links: Vec<Link>,
    pub entry_lanes: Vec<EntryLane>,
    /// Travel time from the network boundary to an entry lane's queue.
    pub entry_travel_s: u32,
    pub horizon_s: u32,
    pub control_step_s: u32,
}

impl RoadNetwork {
    pub fn num_steps(&self) -> usize {
        (self.horizon_s / self.control_step_s) as usize
    }

    pub fn intersection(&self, id: IntersectionId) -> Result<&Intersection> {
        self.intersections
            .get(id)
            .ok_or(Error::UnknownIntersection(id))
    }

    pub fn max_incoming_lanes(&self) -> usize {
        self.intersections
            .iter()
            .map(|i| i.incoming_lanes.len())
            .max()
            .unwrap_or(0)
    }

    pub fn max_neighbors(&self) -> usize {
        self.intersections
            .iter()
            .map(|i| i.neighbors.len())
            .max()
            .unwrap_or(0)
    }

    pub fn link_travel_steps(&self, source: LaneId, destination: LaneId) -> u32 {
        self.links
            .iter()
            .find(|l| l.source == source && l.destination == destination)
            .map(|l| l.travel_time_s.div_ceil(self.control_step_s).max(1))
            .unwrap_or(1)
    }

    /// Checks every structural invariant of the topology.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidNetwork(msg));
        if self.control_step_s == 0 || self.horizon_s == 0 {
            return bad("horizon and control step must be positive".into());
        }
        if self.horizon_s % self.control_step_s != 0 {
            return bad(format!(
                "horizon {} s is not a multiple of control step {} s",
                self.horizon_s, self.control_step_s
            ));
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.id != i {
                return bad(format!("lane at index {i} has id {}", lane.id));
            }
            if let Some(owner) = lane.intersection {
                if owner >= self.intersections.len() {
                    return bad(format!("lane {i} references missing intersection {owner}"));
                }
                if lane.routes.is_empty() {
                    return bad(format!("incoming lane {i} has no routes"));
                }
            }
            for r in &lane.routes {
                if r.to >= self.lanes.len() || !(r.weight > 0.0) {
                    return bad(format!("lane {i} has an invalid route to {}", r.to));
                }
            }
        }
        for link in &self.links {
            if link.source >= self.lanes.len() || link.destination >= self.lanes.len() {
                return bad(format!(
                    "link {} -> {} references a missing lane",
                    link.source, link.destination
                ));
            }
        }
        for entry in &self.entry_lanes {
            match self.lanes.get(entry.lane) {
                Some(l) if !l.is_exit() => {}
                _ => return bad(format!("entry lane {} is not an incoming lane", entry.lane)),
            }
            if !(entry.rate > 0.0) {
                return bad(format!("entry lane {} has non-positive rate", entry.lane));
            }
        }
        for (idx, inter) in self.intersections.iter().enumerate() {
            if inter.id != idx {
                return bad(format!("intersection at index {idx} has id {}", inter.id));
            }
            if inter.phases.len() < 2 {
                return bad(format!("intersection {idx} has fewer than 2 phases"));
            }
            if inter
                .incoming_lanes
                .iter()
                .any(|l| inter.outgoing_lanes.contains(l))
            {
                return bad(format!("intersection {idx} has a lane that is both entry and exit"));
            }
            for &l in &inter.incoming_lanes {
                if self.lanes.get(l).and_then(|l| l.intersection) != Some(idx) {
                    return bad(format!("lane {l} is not owned by intersection {idx}"));
                }
            }
            let movement_ok = |m: &Movement| {
                inter.incoming_lanes.contains(&m.from) && inter.outgoing_lanes.contains(&m.to)
            };
            for (p, phase) in inter.phases.iter().enumerate() {
                if phase.id != p {
                    return bad(format!("intersection {idx} phase index {p} has id {}", phase.id));
                }
                if phase.movements.is_empty() || phase.saturation_flow < 1 {
                    return bad(format!(
                        "intersection {idx} phase {p} needs movements and saturation >= 1"
                    ));
                }
                if !phase.movements.iter().all(movement_ok) {
                    return bad(format!(
                        "intersection {idx} phase {p} references foreign lanes"
                    ));
                }
            }
            if !inter.always_green.iter().all(movement_ok) {
                return bad(format!("intersection {idx} always-green movement references foreign lanes"));
            }
            for &n in &inter.neighbors {
                let Some(other) = self.intersections.get(n) else {
                    return bad(format!("intersection {idx} has missing neighbor {n}"));
                };
                if !other.neighbors.contains(&idx) {
                    return bad(format!("neighbor relation {idx} -> {n} is not symmetric"));
                }
            }
        }
        Ok(())
    }
}
