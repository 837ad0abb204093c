use serde::{Deserialize, Serialize};

use super::observation::{observe, ObservationLayout};
use crate::error::{Error, Result};
use crate::sim::{average_delay, Intersection, NetworkState, RoadNetwork, SimMetrics, Simulator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Flattened [`AgentObservation`](super::AgentObservation), raw (unscaled) features.
    pub obs: Vec<f32>,
    pub action: usize,
    /// Negated pressure after the step.
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub agent_id: usize,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub episode_return: f64,
}

impl Trajectory {
    pub fn new(agent_id: usize, seed: u64, records: Vec<StepRecord>) -> Self {
        let episode_return = records.iter().map(|r| r.reward).sum();
        Self {
            agent_id,
            seed,
            records,
            episode_return,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.reward).collect()
    }
}

/// Everything a controller may look at when choosing a phase.
pub struct AgentView<'a> {
    pub step: usize,
    pub intersection: &'a Intersection,
    pub state: &'a NetworkState,
    pub obs: &'a [f32],
}

/// One controller per intersection.
pub trait AgentPolicy {
    /// Called before the first step of every episode.
    fn begin_episode(&mut self, _seed: u64) {}

    fn act(&mut self, view: &AgentView<'_>) -> Result<usize>;

    /// Feedback after all agents stepped.
    fn observe(&mut self, _action: usize, _reward: f64) {}
}

impl<P: AgentPolicy + ?Sized> AgentPolicy for Box<P> {
    fn begin_episode(&mut self, seed: u64) {
        (**self).begin_episode(seed)
    }

    fn act(&mut self, view: &AgentView<'_>) -> Result<usize> {
        (**self).act(view)
    }

    fn observe(&mut self, action: usize, reward: f64) {
        (**self).observe(action, reward)
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub trajectories: Vec<Trajectory>,
    pub metrics: SimMetrics,
    pub average_delay: f64,
}

/// Runs one full episode with every agent acting on its own observation.
pub fn rollout<P: AgentPolicy>(
    policies: &mut [P],
    net: &RoadNetwork,
    layout: &ObservationLayout,
    seed: u64,
) -> Result<Rollout> {
    let n = net.intersections.len();
    if policies.len() != n {
        return Err(Error::InvalidParameter(format!(
            "need one policy per intersection ({n}), got {}",
            policies.len()
        )));
    }
    let mut sim = Simulator::new(net, seed)?;
    let steps = net.num_steps();
    let mut records: Vec<Vec<StepRecord>> = vec![Vec::with_capacity(steps); n];
    for p in policies.iter_mut() {
        p.begin_episode(seed);
    }
    let mut state = sim.state();
    let mut actions = vec![0usize; n];
    for step in 0..steps {
        let mut observations = Vec::with_capacity(n);
        for (i, policy) in policies.iter_mut().enumerate() {
            let obs = observe(net, &state, i, layout)?.flatten();
            let inter = &net.intersections[i];
            let a = policy.act(&AgentView {
                step,
                intersection: inter,
                state: &state,
                obs: &obs,
            })?;
            if a >= inter.num_phases() {
                return Err(Error::InvalidPhase {
                    intersection: i,
                    phase: a,
                    num_phases: inter.num_phases(),
                });
            }
            actions[i] = a;
            observations.push(obs);
        }
        let out = sim.step(&actions)?;
        if !sim.metrics().is_conserved() {
            return Err(Error::InvalidNetwork(format!(
                "vehicle conservation violated at step {step}"
            )));
        }
        for (i, (policy, obs)) in policies.iter_mut().zip(observations).enumerate() {
            let reward = -(out.pressures[i] as f64);
            policy.observe(actions[i], reward);
            records[i].push(StepRecord {
                obs,
                action: actions[i],
                reward,
            });
        }
        state = sim.state();
    }
    let metrics = sim.metrics();
    Ok(Rollout {
        trajectories: records
            .into_iter()
            .enumerate()
            .map(|(i, r)| Trajectory::new(i, seed, r))
            .collect(),
        average_delay: average_delay(&metrics),
        metrics,
    })
}
