//! Built-in desk-scale scenarios.

use serde::{Deserialize, Serialize};

use super::network::{
    EntryLane, Intersection, Lane, LaneId, Link, Movement, Phase, RoadNetwork, Route, Turn,
};
use crate::error::{Error, Result};

pub const SINGLE_2LANE: &str = "single-2lane";
pub const SINGLE_3LANE: &str = "single-3lane";
pub const GRID_2X2: &str = "grid-2x2";

pub const SCENARIOS: [&str; 3] = [SINGLE_2LANE, SINGLE_3LANE, GRID_2X2];

/// Arrival-rate presets in vehicles/second per entry direction.
pub fn rate_presets(name: &str) -> Result<[f64; 3]> {
    match name {
        SINGLE_2LANE => Ok([0.2, 0.4, 0.8]),
        SINGLE_3LANE => Ok([0.25, 0.5, 1.0]),
        GRID_2X2 => Ok([0.1, 0.2, 0.4]),
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    pub name: String,
    /// Index into [`rate_presets`]; ignored when `arrival_rate` is set.
    pub rate_preset: usize,
    pub arrival_rate: Option<f64>,
    pub horizon_s: u32,
    pub control_step_s: u32,
    pub saturation_flow: u32,
    pub link_travel_s: u32,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            name: SINGLE_3LANE.to_string(),
            rate_preset: 1,
            arrival_rate: None,
            horizon_s: 3600,
            control_step_s: 10,
            saturation_flow: 8,
            link_travel_s: 20,
        }
    }
}

impl ScenarioParams {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            ..Self::default()
        }
    }

    pub fn resolved_rate(&self) -> Result<f64> {
        match self.arrival_rate {
            Some(r) => Ok(r),
            None => {
                let presets = rate_presets(&self.name)?;
                presets.get(self.rate_preset).copied().ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "rate preset {} out of range for {}",
                        self.rate_preset, self.name
                    ))
                })
            }
        }
    }
}

pub fn build_scenario(params: &ScenarioParams) -> Result<RoadNetwork> {
    let rate = params.resolved_rate()?;
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "arrival rate must be positive, got {rate}"
        )));
    }
    let net = match params.name.as_str() {
        SINGLE_2LANE => single(params, rate, LaneLayout::TwoLane),
        SINGLE_3LANE => single(params, rate, LaneLayout::ThreeLane),
        GRID_2X2 => grid(params, rate),
        other => return Err(Error::UnknownScenario(other.to_string())),
    };
    net.validate()?;
    Ok(net)
}

const DIRS: [&str; 4] = ["N", "E", "S", "W"];

/// Exit direction for a vehicle entering from approach `a` (N=0, E=1, S=2, W=3).
fn exit_dir(a: usize, turn: Turn) -> usize {
    match turn {
        Turn::Through => (a + 2) % 4,
        Turn::Left => (a + 1) % 4,
        Turn::Right => (a + 3) % 4,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum LaneLayout {
    TwoLane,
    ThreeLane,
}

/// Lane templates: (suffix, entry share of the approach rate, route weights by turn).
fn lane_templates(layout: LaneLayout) -> Vec<(&'static str, f64, Vec<(Turn, f64)>)> {
    // Approach demand: 20% left, 60% through, 20% right.
    match layout {
        LaneLayout::TwoLane => vec![
            ("L", 0.2, vec![(Turn::Left, 1.0)]),
            ("TR", 0.8, vec![(Turn::Through, 0.75), (Turn::Right, 0.25)]),
        ],
        LaneLayout::ThreeLane => vec![
            ("L", 0.2, vec![(Turn::Left, 1.0)]),
            ("T", 0.3, vec![(Turn::Through, 1.0)]),
            ("TR", 0.5, vec![(Turn::Through, 0.6), (Turn::Right, 0.4)]),
        ],
    }
}

struct Builder {
    lanes: Vec<Lane>,
    links: Vec<Link>,
}

impl Builder {
    fn lane(&mut self, name: String, intersection: Option<usize>) -> LaneId {
        let id = self.lanes.len();
        self.lanes.push(Lane {
            id,
            name,
            intersection,
            routes: Vec::new(),
        });
        id
    }
}

#[derive(Clone, Copy, PartialEq)]
enum PhasePlan {
    /// NS / EW, each serving through and left traffic.
    Two,
    Four,
    Eight,
}

/// Phase definitions as (name, [(approach, turn)]) groups.
fn phase_groups(plan: PhasePlan) -> Vec<(&'static str, Vec<(usize, Turn)>)> {
    if plan == PhasePlan::Two {
        return vec![
            ("NS", vec![(0, Turn::Through), (0, Turn::Left), (2, Turn::Through), (2, Turn::Left)]),
            ("EW", vec![(1, Turn::Through), (1, Turn::Left), (3, Turn::Through), (3, Turn::Left)]),
        ];
    }
    let mut groups = vec![
        ("NS-through", vec![(0, Turn::Through), (2, Turn::Through)]),
        ("EW-through", vec![(1, Turn::Through), (3, Turn::Through)]),
        ("NS-left", vec![(0, Turn::Left), (2, Turn::Left)]),
        ("EW-left", vec![(1, Turn::Left), (3, Turn::Left)]),
    ];
    if plan == PhasePlan::Eight {
        for (a, name) in [(0, "N-all"), (2, "S-all"), (1, "E-all"), (3, "W-all")] {
            groups.push((name, vec![(a, Turn::Through), (a, Turn::Left)]));
        }
    }
    groups
}

/// Builds the phases and always-green movements of one intersection from the
/// movements available on its lanes.
fn phases_for(
    lanes: &[Lane],
    approach_lanes: &[Vec<LaneId>; 4],
    plan: PhasePlan,
    saturation: u32,
    turn_of: &dyn Fn(LaneId, LaneId) -> Turn,
) -> (Vec<Phase>, Vec<Movement>) {
    let movements_of = |a: usize, turn: Turn| -> Vec<Movement> {
        approach_lanes[a]
            .iter()
            .flat_map(|&l| {
                lanes[l]
                    .routes
                    .iter()
                    .filter(move |r| turn_of(l, r.to) == turn)
                    .map(move |r| Movement {
                        from: l,
                        to: r.to,
                        turn,
                    })
            })
            .collect()
    };
    let phases = phase_groups(plan)
        .into_iter()
        .enumerate()
        .map(|(id, (name, group))| Phase {
            id,
            name: name.to_string(),
            movements: group
                .into_iter()
                .flat_map(|(a, t)| movements_of(a, t))
                .collect(),
            saturation_flow: saturation,
        })
        .collect();
    let always_green = (0..4).flat_map(|a| movements_of(a, Turn::Right)).collect();
    (phases, always_green)
}

fn single(params: &ScenarioParams, rate: f64, layout: LaneLayout) -> RoadNetwork {
    let mut b = Builder {
        lanes: Vec::new(),
        links: Vec::new(),
    };
    let templates = lane_templates(layout);
    let mut approach_lanes: [Vec<LaneId>; 4] = Default::default();
    for (a, dir) in DIRS.iter().enumerate() {
        for (suffix, _, _) in &templates {
            let id = b.lane(format!("{dir}-in-{suffix}"), Some(0));
            approach_lanes[a].push(id);
        }
    }
    let exits: Vec<LaneId> = DIRS
        .iter()
        .map(|d| b.lane(format!("{d}-exit"), None))
        .collect();

    let mut entry_lanes = Vec::new();
    let mut turns = Vec::new();
    for a in 0..4 {
        for (lane, (_, share, routes)) in approach_lanes[a].clone().into_iter().zip(&templates) {
            for &(turn, weight) in routes {
                let to = exits[exit_dir(a, turn)];
                b.lanes[lane].routes.push(Route { to, weight });
                b.links.push(Link {
                    source: lane,
                    destination: to,
                    travel_time_s: params.link_travel_s,
                });
                turns.push(((lane, to), turn));
            }
            entry_lanes.push(EntryLane {
                lane,
                rate: rate * share,
            });
        }
    }
    let turn_of = |from: LaneId, to: LaneId| {
        turns
            .iter()
            .find(|(k, _)| *k == (from, to))
            .map(|(_, t)| *t)
            .expect("route registered")
    };
    let (phases, always_green) = phases_for(
        &b.lanes,
        &approach_lanes,
        if layout == LaneLayout::ThreeLane {
            PhasePlan::Eight
        } else {
            PhasePlan::Four
        },
        params.saturation_flow,
        &turn_of,
    );
    let incoming_lanes = approach_lanes.iter().flatten().copied().collect();
    RoadNetwork {
        scenario: params.name.clone(),
        intersections: vec![Intersection {
            id: 0,
            incoming_lanes,
            outgoing_lanes: exits,
            phases,
            always_green,
            always_green_saturation: params.saturation_flow,
            neighbors: Vec::new(),
        }],
        lanes: b.lanes,
        links: b.links,
        entry_lanes,
        entry_travel_s: params.link_travel_s,
        horizon_s: params.horizon_s,
        control_step_s: params.control_step_s,
    }
}

/// 2x2 grid of single-lane approaches with two-phase signals; vehicles turn
/// with probability 0.25 at every junction (split evenly between left and right).
fn grid(params: &ScenarioParams, rate: f64) -> RoadNetwork {
    const ROUTE_WEIGHTS: [(Turn, f64); 3] =
        [(Turn::Left, 0.125), (Turn::Through, 0.75), (Turn::Right, 0.125)];
    let mut b = Builder {
        lanes: Vec::new(),
        links: Vec::new(),
    };
    let pos = |id: usize| (id / 2, id % 2);
    // Neighbor of intersection `id` in direction `d`, if any.
    let neighbor_in = |id: usize, d: usize| -> Option<usize> {
        let (r, c) = pos(id);
        let (r, c) = (r as isize, c as isize);
        let (nr, nc) = match d {
            0 => (r - 1, c),
            1 => (r, c + 1),
            2 => (r + 1, c),
            _ => (r, c - 1),
        };
        ((0..2).contains(&nr) && (0..2).contains(&nc)).then(|| (nr * 2 + nc) as usize)
    };

    // in_lane[i][a]: incoming lane of intersection i on approach a.
    let mut in_lane = [[0usize; 4]; 4];
    for (i, row) in in_lane.iter_mut().enumerate() {
        for (a, slot) in row.iter_mut().enumerate() {
            *slot = b.lane(format!("I{i}-{}-in", DIRS[a]), Some(i));
        }
    }
    // out_lane[i][d]: lane a vehicle leaving i toward direction d joins.
    let mut out_lane = [[0usize; 4]; 4];
    for i in 0..4 {
        for d in 0..4 {
            out_lane[i][d] = match neighbor_in(i, d) {
                // Leaving toward d enters the neighbor from the opposite side.
                Some(j) => in_lane[j][(d + 2) % 4],
                None => b.lane(format!("I{i}-{}-exit", DIRS[d]), None),
            };
        }
    }

    let mut entry_lanes = Vec::new();
    let mut intersections = Vec::new();
    for i in 0..4 {
        let mut turns = Vec::new();
        for a in 0..4 {
            let lane = in_lane[i][a];
            for (turn, weight) in ROUTE_WEIGHTS {
                let to = out_lane[i][exit_dir(a, turn)];
                b.lanes[lane].routes.push(Route { to, weight });
                b.links.push(Link {
                    source: lane,
                    destination: to,
                    travel_time_s: params.link_travel_s,
                });
                turns.push(((lane, to), turn));
            }
            if neighbor_in(i, a).is_none() {
                entry_lanes.push(EntryLane { lane, rate });
            }
        }
        let turn_of = |from: LaneId, to: LaneId| {
            turns
                .iter()
                .find(|(k, _)| *k == (from, to))
                .map(|(_, t)| *t)
                .expect("route registered")
        };
        let approach_lanes: [Vec<LaneId>; 4] = std::array::from_fn(|a| vec![in_lane[i][a]]);
        let (phases, always_green) =
            phases_for(&b.lanes, &approach_lanes, PhasePlan::Two, params.saturation_flow, &turn_of);
        let mut outgoing_lanes: Vec<LaneId> = out_lane[i].to_vec();
        outgoing_lanes.sort_unstable();
        intersections.push(Intersection {
            id: i,
            incoming_lanes: in_lane[i].to_vec(),
            outgoing_lanes,
            phases,
            always_green,
            always_green_saturation: params.saturation_flow,
            neighbors: (0..4).filter_map(|d| neighbor_in(i, d)).collect::<Vec<_>>(),
        });
    }
    for inter in &mut intersections {
        inter.neighbors.sort_unstable();
    }
    RoadNetwork {
        scenario: params.name.clone(),
        lanes: b.lanes,
        intersections,
        links: b.links,
        entry_lanes,
        entry_travel_s: params.link_travel_s,
        horizon_s: params.horizon_s,
        control_step_s: params.control_step_s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_3lane_mid_preset() {
        let net = build_scenario(&ScenarioParams::named(SINGLE_3LANE)).unwrap();
        assert_eq!(net.intersections.len(), 1);
        assert_eq!(net.intersections[0].incoming_lanes.len(), 12);
        assert_eq!(net.intersections[0].num_phases(), 8);
        assert_eq!(net.horizon_s, 3600);
        assert_eq!(net.control_step_s, 10);
        // 0.5 veh/s per direction, split across the approach's lanes.
        let per_direction: f64 = net.entry_lanes.iter().map(|e| e.rate).sum::<f64>() / 4.0;
        assert!((per_direction - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_2lane_low_preset() {
        let params = ScenarioParams {
            rate_preset: 0,
            ..ScenarioParams::named(SINGLE_2LANE)
        };
        let net = build_scenario(&params).unwrap();
        let total: f64 = net.entry_lanes.iter().map(|e| e.rate).sum();
        assert!((total - 4.0 * 0.2).abs() < 1e-12);
        assert_eq!(net.intersections[0].num_phases(), 4);
    }

    #[test]
    fn grid_has_two_neighbors_each() {
        for preset in 0..3 {
            let params = ScenarioParams {
                rate_preset: preset,
                ..ScenarioParams::named(GRID_2X2)
            };
            let net = build_scenario(&params).unwrap();
            assert_eq!(net.intersections.len(), 4);
            for inter in &net.intersections {
                assert_eq!(inter.neighbors.len(), 2);
            }
            assert_eq!(net.entry_lanes.len(), 8);
        }
    }

    #[test]
    fn rejects_unknown_and_nonpositive() {
        assert!(matches!(
            build_scenario(&ScenarioParams::named("cologne")),
            Err(Error::UnknownScenario(_))
        ));
        let params = ScenarioParams {
            arrival_rate: Some(0.0),
            ..ScenarioParams::default()
        };
        assert!(matches!(
            build_scenario(&params),
            Err(Error::InvalidParameter(_))
        ));
        let params = ScenarioParams {
            rate_preset: 3,
            ..ScenarioParams::default()
        };
        assert!(build_scenario(&params).is_err());
    }

    #[test]
    fn right_turns_are_always_green() {
        let net = build_scenario(&ScenarioParams::named(SINGLE_2LANE)).unwrap();
        let inter = &net.intersections[0];
        assert_eq!(inter.always_green.len(), 4);
        for phase in &inter.phases {
            assert!(phase.movements.iter().all(|m| m.turn != Turn::Right));
        }
    }
}
