use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mdp::Trajectory;

/// Suffix sums: `rtg[t] = Σ_{t' >= t} rewards[t']`.
pub fn compute_rtg(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

/// A K-step training window, left-padded at episode starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubTrajectory {
    /// `K * obs_dim` raw features; padded rows are zero.
    pub states: Vec<f32>,
    pub actions: Vec<usize>,
    /// Raw (unscaled) returns-to-go.
    pub rtg: Vec<f32>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<bool>,
    pub episode: usize,
    /// Index of the last step of the window inside the source episode.
    pub end: usize,
}

impl SubTrajectory {
    pub fn k(&self) -> usize {
        self.mask.len()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Window over `episode[..=end]`, at most `k` steps long.
    pub fn window(dataset: &Dataset, episode: usize, end: usize, k: usize) -> Self {
        let ep = &dataset.episodes[episode];
        let rtg = &dataset.rtg[episode];
        let obs_dim = dataset.obs_dim();
        let start = (end + 1).saturating_sub(k);
        let pad = k - (end + 1 - start);
        let mut sub = SubTrajectory {
            states: vec![0.0; k * obs_dim],
            actions: vec![0; k],
            rtg: vec![0.0; k],
            timesteps: vec![0; k],
            mask: vec![false; k],
            episode,
            end,
        };
        for (slot, t) in (pad..k).zip(start..=end) {
            sub.states[slot * obs_dim..(slot + 1) * obs_dim].copy_from_slice(&ep.records[t].obs);
            sub.actions[slot] = ep.records[t].action;
            sub.rtg[slot] = rtg[t] as f32;
            sub.timesteps[slot] = t;
            sub.mask[slot] = true;
        }
        sub
    }
}

/// Draws `batch_size` windows: episodes with probability proportional to their
/// length, then a uniform end index.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<SubTrajectory>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot sample from an empty dataset".into()));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("context length must be >= 1".into()));
    }
    let mut cumulative = Vec::with_capacity(dataset.len());
    let mut total = 0usize;
    for ep in &dataset.episodes {
        total += ep.len();
        cumulative.push(total);
    }
    if total == 0 {
        return Err(Error::Dataset("dataset has no steps".into()));
    }
    Ok((0..batch_size)
        .map(|_| {
            let u = rng.random_range(0..total);
            let episode = cumulative.partition_point(|&c| c <= u);
            let offset = if episode == 0 { 0 } else { cumulative[episode - 1] };
            SubTrajectory::window(dataset, episode, u - offset, k)
        })
        .collect())
}

/// The `c` highest-return episodes, ties broken by lower episode index.
pub fn top_c_trajectories(dataset: &Dataset, c: usize) -> Result<Vec<Trajectory>> {
    if c > dataset.len() {
        return Err(Error::Dataset(format!(
            "requested top {c} of only {} episodes",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| {
        dataset.episodes[b]
            .episode_return
            .total_cmp(&dataset.episodes[a].episode_return)
            .then(a.cmp(&b))
    });
    Ok(order[..c]
        .iter()
        .map(|&i| dataset.episodes[i].clone())
        .collect())
}

pub fn max_offline_return(dataset: &Dataset) -> Result<f64> {
    dataset
        .episodes
        .iter()
        .map(|e| e.episode_return)
        .max_by(f64::total_cmp)
        .ok_or_else(|| Error::Dataset("empty dataset has no maximum return".into()))
}
