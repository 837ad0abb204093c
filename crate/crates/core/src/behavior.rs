//! Non-learned controllers: fixed-time, max-pressure and ε-greedy max-pressure.
//! They serve as baselines and as offline dataset generators.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetHeader, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::mdp::{rollout, AgentPolicy, AgentView, ObservationLayout, Trajectory};
use crate::provenance::Provenance;
use crate::sim::{stream_seed, Intersection, NetworkState, RoadNetwork};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    FixedTime,
    MaxPressure,
    Emp,
}

impl BehaviorKind {
    pub fn name(self) -> &'static str {
        match self {
            BehaviorKind::FixedTime => "fixed_time",
            BehaviorKind::MaxPressure => "max_pressure",
            BehaviorKind::Emp => "emp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorSpec {
    pub kind: BehaviorKind,
    /// Exploration rate of `emp`.
    pub epsilon: f64,
    /// Green time of every phase in the default fixed-time cycle.
    pub phase_duration_s: u32,
    /// Explicit `(phase, duration_s)` cycle; defaults to all phases in order.
    pub cycle: Option<Vec<(usize, u32)>>,
}

impl Default for BehaviorSpec {
    fn default() -> Self {
        Self {
            kind: BehaviorKind::Emp,
            epsilon: 0.1,
            phase_duration_s: 30,
            cycle: None,
        }
    }
}

impl BehaviorSpec {
    pub fn of_kind(kind: BehaviorKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self, control_step_s: u32) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        let durations = self
            .cycle
            .iter()
            .flatten()
            .map(|&(_, d)| d)
            .chain(std::iter::once(self.phase_duration_s));
        for d in durations {
            if d == 0 || d % control_step_s != 0 {
                return Err(Error::InvalidParameter(format!(
                    "cycle duration {d} s is not a positive multiple of {control_step_s} s"
                )));
            }
        }
        Ok(())
    }

    /// `(phase, steps)` cycle for an intersection with `num_phases` phases.
    pub fn cycle_steps(&self, num_phases: usize, control_step_s: u32) -> Vec<(usize, usize)> {
        match &self.cycle {
            Some(c) => c
                .iter()
                .map(|&(p, d)| (p, (d / control_step_s) as usize))
                .collect(),
            None => (0..num_phases)
                .map(|p| (p, (self.phase_duration_s / control_step_s) as usize))
                .collect(),
        }
    }
}

/// Phase active at step `t` of a repeating `(phase, steps)` cycle.
pub fn fixed_time_action(t: usize, cycle: &[(usize, usize)]) -> usize {
    let period: usize = cycle.iter().map(|&(_, d)| d).sum();
    if period == 0 {
        return 0;
    }
    let mut r = t % period;
    for &(phase, d) in cycle {
        if r < d {
            return phase;
        }
        r -= d;
    }
    unreachable!("remainder is below the cycle period")
}

/// Σ over a phase's movements of queue(in) − queue(out).
pub fn phase_pressure(inter: &Intersection, phase: usize, state: &NetworkState) -> i64 {
    inter.phases[phase]
        .movements
        .iter()
        .map(|m| state.queue[m.from] as i64 - state.queue[m.to] as i64)
        .sum()
}

/// Phase with maximum movement pressure; ties go to the lowest phase id.
pub fn max_pressure_action(inter: &Intersection, state: &NetworkState) -> usize {
    let mut best = 0;
    let mut best_p = i64::MIN;
    for p in 0..inter.num_phases() {
        let v = phase_pressure(inter, p, state);
        if v > best_p {
            best = p;
            best_p = v;
        }
    }
    best
}

pub fn emp_action<R: Rng + ?Sized>(
    inter: &Intersection,
    state: &NetworkState,
    epsilon: f64,
    rng: &mut R,
) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..inter.num_phases())
    } else {
        max_pressure_action(inter, state)
    }
}

/// A behavior controller for one intersection.
#[derive(Clone, Debug)]
pub struct BehaviorPolicy {
    spec: BehaviorSpec,
    agent_id: usize,
    scenario: String,
    control_step_s: u32,
    cycle: Vec<(usize, usize)>,
    rng: ChaCha8Rng,
}

impl BehaviorPolicy {
    pub fn new(spec: &BehaviorSpec, net: &RoadNetwork, agent_id: usize) -> Result<Self> {
        spec.validate(net.control_step_s)?;
        let inter = net.intersection(agent_id)?;
        let cycle = spec.cycle_steps(inter.num_phases(), net.control_step_s);
        if cycle.iter().any(|&(p, _)| p >= inter.num_phases()) {
            return Err(Error::InvalidParameter(format!(
                "fixed-time cycle references a phase beyond {}",
                inter.num_phases()
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            agent_id,
            scenario: net.scenario.clone(),
            control_step_s: net.control_step_s,
            cycle,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn for_network(spec: &BehaviorSpec, net: &RoadNetwork) -> Result<Vec<Self>> {
        (0..net.intersections.len())
            .map(|i| Self::new(spec, net, i))
            .collect()
    }

    pub fn control_step_s(&self) -> u32 {
        self.control_step_s
    }
}

impl AgentPolicy for BehaviorPolicy {
    fn begin_episode(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(stream_seed(
            &self.scenario,
            seed,
            self.agent_id,
            "behavior",
        ));
    }

    fn act(&mut self, view: &AgentView<'_>) -> Result<usize> {
        Ok(match self.spec.kind {
            BehaviorKind::FixedTime => fixed_time_action(view.step, &self.cycle),
            BehaviorKind::MaxPressure => max_pressure_action(view.intersection, view.state),
            BehaviorKind::Emp => {
                emp_action(view.intersection, view.state, self.spec.epsilon, &mut self.rng)
            }
        })
    }
}

/// Runs `episodes` seeded rollouts (episode `e` uses seed `seed + e`) and
/// returns one dataset per agent.
pub fn collect_datasets(
    spec: &BehaviorSpec,
    net: &RoadNetwork,
    layout: &ObservationLayout,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if episodes == 0 {
        return Err(Error::InvalidParameter("episodes must be >= 1".into()));
    }
    let mut policies = BehaviorPolicy::for_network(spec, net)?;
    let n = net.intersections.len();
    let mut per_agent: Vec<Vec<Trajectory>> = vec![Vec::with_capacity(episodes); n];
    for e in 0..episodes {
        let out = rollout(&mut policies, net, layout, seed.wrapping_add(e as u64))?;
        for (agent, traj) in out.trajectories.into_iter().enumerate() {
            per_agent[agent].push(traj);
        }
    }
    per_agent
        .into_iter()
        .enumerate()
        .map(|(agent, trajectories)| {
            let header = DatasetHeader {
                schema_version: SCHEMA_VERSION,
                scenario: net.scenario.clone(),
                agent_id: agent,
                behavior: spec.kind.name().to_string(),
                seed,
                obs_dim: layout.obs_dim(),
                num_actions: net.intersections[agent].num_phases(),
                control_step_s: net.control_step_s,
            };
            Dataset::new(header, trajectories)
        })
        .collect()
}

pub fn dataset_path(dir: &Path, agent: usize) -> PathBuf {
    dir.join(format!("agent-{agent}.json"))
}

/// Writes one dataset file per agent into `dir`. On failure every file
/// written by this call is removed again.
pub fn write_datasets(
    datasets: &[Dataset],
    dir: &Path,
    provenance: Option<&Provenance>,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for ds in datasets {
        let path = dataset_path(dir, ds.header.agent_id);
        if let Err(e) = ds.to_file(provenance.cloned()).write(&path) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path);
    }
    Ok(written)
}

pub fn generate_dataset(
    spec: &BehaviorSpec,
    net: &RoadNetwork,
    layout: &ObservationLayout,
    episodes: usize,
    seed: u64,
    dir: &Path,
    provenance: Option<&Provenance>,
) -> Result<Vec<PathBuf>> {
    let datasets = collect_datasets(spec, net, layout, episodes, seed)?;
    write_datasets(&datasets, dir, provenance)
}
