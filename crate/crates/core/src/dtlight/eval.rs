use serde::{Deserialize, Serialize};

use super::policy::{ActionMode, DtAgent};
use crate::behavior::{BehaviorPolicy, BehaviorSpec};
use crate::error::{Error, Result};
use crate::mdp::{rollout, AgentPolicy, ObservationLayout};
use crate::nn::PolicyModel;
use crate::sim::RoadNetwork;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub average_delay: f64,
    /// Sum of all agents' returns.
    pub episode_return: f64,
    pub agent_returns: Vec<f64>,
}

/// One episode per seed with the same controllers.
pub fn evaluate_policies<P: AgentPolicy>(
    policies: &mut [P],
    net: &RoadNetwork,
    layout: &ObservationLayout,
    seeds: &[u64],
) -> Result<Vec<EpisodeOutcome>> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("evaluation needs at least one seed".into()));
    }
    seeds
        .iter()
        .map(|&seed| {
            let out = rollout(policies, net, layout, seed)?;
            let agent_returns: Vec<f64> = out.trajectories.iter().map(|t| t.episode_return).collect();
            Ok(EpisodeOutcome {
                seed,
                average_delay: out.average_delay,
                episode_return: agent_returns.iter().sum(),
                agent_returns,
            })
        })
        .collect()
}

pub fn evaluate_behavior(
    spec: &BehaviorSpec,
    net: &RoadNetwork,
    layout: &ObservationLayout,
    seeds: &[u64],
) -> Result<Vec<EpisodeOutcome>> {
    let mut policies = BehaviorPolicy::for_network(spec, net)?;
    evaluate_policies(&mut policies, net, layout, seeds)
}

/// Greedy decision-transformer evaluation, one model and initial RTG per intersection.
pub fn evaluate_dt(
    models: &[PolicyModel<f32>],
    rtg_init: &[f64],
    context_len: usize,
    net: &RoadNetwork,
    layout: &ObservationLayout,
    seeds: &[u64],
) -> Result<Vec<EpisodeOutcome>> {
    if models.len() != net.intersections.len() || rtg_init.len() != models.len() {
        return Err(Error::InvalidParameter(format!(
            "need one model and RTG target per intersection ({})",
            net.intersections.len()
        )));
    }
    for (i, m) in models.iter().enumerate() {
        if m.config.obs_dim != layout.obs_dim() || m.config.num_actions != net.intersections[i].num_phases() {
            return Err(Error::Incompatible(format!(
                "model {i} expects obs_dim {} / {} actions, network has {} / {}",
                m.config.obs_dim,
                m.config.num_actions,
                layout.obs_dim(),
                net.intersections[i].num_phases()
            )));
        }
    }
    let mut agents = models
        .iter()
        .enumerate()
        .map(|(i, m)| DtAgent::new(m, &net.scenario, i, context_len, ActionMode::Greedy, rtg_init[i]))
        .collect::<Result<Vec<_>>>()?;
    evaluate_policies(&mut agents, net, layout, seeds)
}
