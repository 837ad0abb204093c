//! Point-queue simulation of signalized intersections.

use std::collections::VecDeque;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{Intersection, IntersectionId, LaneId, RoadNetwork};
use crate::error::{Error, Result};

/// Derives an independent stream seed for one (scenario, seed, lane, purpose) tuple.
pub fn stream_seed(scenario: &str, seed: u64, lane: usize, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(scenario.as_bytes());
    h.update(seed.to_le_bytes());
    h.update((lane as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LaneObservation {
    pub queue_len: u32,
    pub approaching: u32,
    pub acc_wait_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionState {
    pub id: IntersectionId,
    /// One entry per incoming lane, in the intersection's lane order.
    pub lanes: Vec<LaneObservation>,
    pub active_phase: usize,
    pub sim_time_s: u32,
}

/// Network-wide per-lane snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub sim_time_s: u32,
    pub queue: Vec<u32>,
    pub approaching: Vec<u32>,
    pub acc_wait_s: Vec<f64>,
    pub active_phase: Vec<usize>,
}

impl NetworkState {
    pub fn lane(&self, lane: LaneId) -> LaneObservation {
        LaneObservation {
            queue_len: self.queue[lane],
            approaching: self.approaching[lane],
            acc_wait_s: self.acc_wait_s[lane],
        }
    }

    pub fn intersection_state(&self, inter: &Intersection) -> IntersectionState {
        IntersectionState {
            id: inter.id,
            lanes: inter.incoming_lanes.iter().map(|&l| self.lane(l)).collect(),
            active_phase: self.active_phase[inter.id],
            sim_time_s: self.sim_time_s,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub vehicles_entered: u64,
    pub vehicles_exited: u64,
    pub vehicles_in_network: u64,
    pub total_delay_s: f64,
    pub completed_trips: u64,
}

impl SimMetrics {
    pub fn is_conserved(&self) -> bool {
        self.vehicles_entered == self.vehicles_exited + self.vehicles_in_network
    }

    fn delta_since(&self, before: &SimMetrics) -> SimMetrics {
        SimMetrics {
            vehicles_entered: self.vehicles_entered - before.vehicles_entered,
            vehicles_exited: self.vehicles_exited - before.vehicles_exited,
            vehicles_in_network: self.vehicles_in_network,
            total_delay_s: self.total_delay_s - before.total_delay_s,
            completed_trips: self.completed_trips - before.completed_trips,
        }
    }
}

/// Total delay over every vehicle that entered; in-network vehicles count
/// with the delay accrued so far. Empty episodes have zero delay.
pub fn average_delay(metrics: &SimMetrics) -> f64 {
    if metrics.vehicles_entered == 0 {
        0.0
    } else {
        metrics.total_delay_s / metrics.vehicles_entered as f64
    }
}

/// Σ entering-lane queues − Σ exiting-lane queues.
pub fn pressure(inter: &Intersection, state: &NetworkState) -> i64 {
    let entering: i64 = inter
        .incoming_lanes
        .iter()
        .map(|&l| state.queue[l] as i64)
        .sum();
    let exiting: i64 = inter
        .outgoing_lanes
        .iter()
        .map(|&l| state.queue[l] as i64)
        .sum();
    entering - exiting
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub states: Vec<IntersectionState>,
    /// Pressure of each intersection after the step; agents receive its negation.
    pub pressures: Vec<i64>,
    pub delta: SimMetrics,
}

#[derive(Clone, Debug)]
struct ActiveMovement {
    from: LaneId,
    route: usize,
    to: LaneId,
    exits: bool,
    travel_steps: u32,
    saturation: u32,
}

#[derive(Clone, Debug, Default)]
struct LaneQueues {
    /// One FIFO per route of the lane; each entry is that vehicle's wait on this lane.
    by_route: Vec<VecDeque<u32>>,
    /// Remaining travel steps of vehicles heading for this lane.
    transit: Vec<u32>,
    wait_sum: u64,
}

impl LaneQueues {
    fn len(&self) -> usize {
        self.by_route.iter().map(VecDeque::len).sum()
    }
}

/// Simulator instance for one episode. Not shared across threads.
#[derive(Clone, Debug)]
pub struct Simulator {
    net: RoadNetwork,
    lanes: Vec<LaneQueues>,
    phase_movements: Vec<Vec<Vec<ActiveMovement>>>,
    always_green: Vec<Vec<ActiveMovement>>,
    route_dists: Vec<Option<WeightedIndex<f64>>>,
    arrival_rngs: Vec<(LaneId, Poisson<f64>, ChaCha8Rng)>,
    route_rngs: Vec<ChaCha8Rng>,
    entry_travel_steps: u32,
    active: Vec<usize>,
    time_s: u32,
    metrics: SimMetrics,
}

impl Simulator {
    pub fn new(net: &RoadNetwork, seed: u64) -> Result<Self> {
        net.validate()?;
        let lanes = net
            .lanes
            .iter()
            .map(|l| LaneQueues {
                by_route: vec![VecDeque::new(); l.routes.len()],
                transit: Vec::new(),
                wait_sum: 0,
            })
            .collect();
        let resolve = |m: &super::network::Movement, saturation: u32| -> Result<ActiveMovement> {
            let route = net.lanes[m.from]
                .routes
                .iter()
                .position(|r| r.to == m.to)
                .ok_or_else(|| {
                    Error::InvalidNetwork(format!(
                        "movement {} -> {} has no matching lane route",
                        m.from, m.to
                    ))
                })?;
            Ok(ActiveMovement {
                from: m.from,
                route,
                to: m.to,
                exits: net.lanes[m.to].is_exit(),
                travel_steps: net.link_travel_steps(m.from, m.to),
                saturation,
            })
        };
        let mut phase_movements = Vec::with_capacity(net.intersections.len());
        let mut always_green = Vec::with_capacity(net.intersections.len());
        for inter in &net.intersections {
            phase_movements.push(
                inter
                    .phases
                    .iter()
                    .map(|p| {
                        p.movements
                            .iter()
                            .map(|m| resolve(m, p.saturation_flow))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
            always_green.push(
                inter
                    .always_green
                    .iter()
                    .map(|m| resolve(m, inter.always_green_saturation))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let route_dists = net
            .lanes
            .iter()
            .map(|l| {
                if l.routes.is_empty() {
                    Ok(None)
                } else {
                    WeightedIndex::new(l.routes.iter().map(|r| r.weight))
                        .map(Some)
                        .map_err(|e| Error::InvalidNetwork(format!("lane {}: {e}", l.id)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let step = net.control_step_s as f64;
        let arrival_rngs = net
            .entry_lanes
            .iter()
            .map(|e| {
                let dist = Poisson::new(e.rate * step)
                    .map_err(|err| Error::InvalidParameter(format!("lane {}: {err}", e.lane)))?;
                let rng =
                    ChaCha8Rng::seed_from_u64(stream_seed(&net.scenario, seed, e.lane, "arrivals"));
                Ok((e.lane, dist, rng))
            })
            .collect::<Result<Vec<_>>>()?;
        let route_rngs = net
            .lanes
            .iter()
            .map(|l| ChaCha8Rng::seed_from_u64(stream_seed(&net.scenario, seed, l.id, "routes")))
            .collect();
        Ok(Self {
            entry_travel_steps: net.entry_travel_s.div_ceil(net.control_step_s).max(1),
            active: vec![0; net.intersections.len()],
            net: net.clone(),
            lanes,
            phase_movements,
            always_green,
            route_dists,
            arrival_rngs,
            route_rngs,
            time_s: 0,
            metrics: SimMetrics::default(),
        })
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.net
    }

    pub fn metrics(&self) -> SimMetrics {
        self.metrics
    }

    pub fn time_s(&self) -> u32 {
        self.time_s
    }

    pub fn is_done(&self) -> bool {
        self.time_s >= self.net.horizon_s
    }

    /// Places `count` vehicles directly in the queue of `lane` bound for `to`,
    /// counting them as having entered the network.
    pub fn insert_queued(&mut self, lane: LaneId, to: LaneId, count: u32) -> Result<()> {
        let route = self
            .net
            .lanes
            .get(lane)
            .and_then(|l| l.routes.iter().position(|r| r.to == to))
            .ok_or_else(|| Error::InvalidParameter(format!("lane {lane} has no route to {to}")))?;
        for _ in 0..count {
            self.lanes[lane].by_route[route].push_back(0);
        }
        self.metrics.vehicles_entered += count as u64;
        self.metrics.vehicles_in_network += count as u64;
        Ok(())
    }

    pub fn state(&self) -> NetworkState {
        NetworkState {
            sim_time_s: self.time_s,
            queue: self.lanes.iter().map(|l| l.len() as u32).collect(),
            approaching: self.lanes.iter().map(|l| l.transit.len() as u32).collect(),
            acc_wait_s: self.lanes.iter().map(|l| l.wait_sum as f64).collect(),
            active_phase: self.active.clone(),
        }
    }

    /// Advances one control step with the given phase per intersection.
    pub fn step(&mut self, chosen_phases: &[usize]) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::PastHorizon(self.net.horizon_s));
        }
        if chosen_phases.len() != self.net.intersections.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} phases, got {}",
                self.net.intersections.len(),
                chosen_phases.len()
            )));
        }
        for (inter, &phase) in self.net.intersections.iter().zip(chosen_phases) {
            if phase >= inter.num_phases() {
                return Err(Error::InvalidPhase {
                    intersection: inter.id,
                    phase,
                    num_phases: inter.num_phases(),
                });
            }
        }
        let before = self.metrics;
        self.active.copy_from_slice(chosen_phases);
        let step_s = self.net.control_step_s;

        // Arrivals enter the boundary links of their entry lanes.
        for (lane, dist, rng) in &mut self.arrival_rngs {
            let n = dist.sample(rng) as u64;
            self.metrics.vehicles_entered += n;
            self.metrics.vehicles_in_network += n;
            let queues = &mut self.lanes[*lane];
            queues
                .transit
                .extend(std::iter::repeat_n(self.entry_travel_steps, n as usize));
        }

        // Service on green movements, intersections in id order.
        for i in 0..self.net.intersections.len() {
            let phase = self.active[i];
            let movements = self.phase_movements[i][phase]
                .iter()
                .chain(self.always_green[i].iter());
            for m in movements {
                let queue = &mut self.lanes[m.from];
                let k = queue.by_route[m.route].len().min(m.saturation as usize);
                let mut released = 0u64;
                for _ in 0..k {
                    released += queue.by_route[m.route].pop_front().expect("k <= len") as u64;
                }
                queue.wait_sum -= released;
                if m.exits {
                    self.metrics.vehicles_exited += k as u64;
                    self.metrics.completed_trips += k as u64;
                    self.metrics.vehicles_in_network -= k as u64;
                } else {
                    self.lanes[m.to]
                        .transit
                        .extend(std::iter::repeat_n(m.travel_steps, k));
                }
            }
        }

        // Vehicles whose travel time elapsed join their lane's queue.
        for (lane_id, queues) in self.lanes.iter_mut().enumerate() {
            let mut joined = 0usize;
            queues.transit.retain_mut(|remaining| {
                *remaining = remaining.saturating_sub(1);
                if *remaining == 0 {
                    joined += 1;
                    false
                } else {
                    true
                }
            });
            if joined > 0 {
                let dist = self.route_dists[lane_id]
                    .as_ref()
                    .expect("only routed lanes receive vehicles");
                let rng = &mut self.route_rngs[lane_id];
                for _ in 0..joined {
                    queues.by_route[dist.sample(rng)].push_back(0);
                }
            }
        }

        // Every stopped vehicle waits out the step.
        let mut queued_total = 0u64;
        for queues in &mut self.lanes {
            let n = queues.len() as u64;
            for q in &mut queues.by_route {
                q.iter_mut().for_each(|w| *w += step_s);
            }
            queues.wait_sum += n * step_s as u64;
            queued_total += n;
        }
        self.metrics.total_delay_s += (queued_total * step_s as u64) as f64;
        self.time_s += step_s;

        let state = self.state();
        let states = self
            .net
            .intersections
            .iter()
            .map(|inter| state.intersection_state(inter))
            .collect();
        let pressures = self
            .net
            .intersections
            .iter()
            .map(|inter| pressure(inter, &state))
            .collect();
        Ok(StepOutcome {
            states,
            pressures,
            delta: self.metrics.delta_since(&before),
        })
    }
}
