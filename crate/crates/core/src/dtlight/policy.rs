use std::collections::VecDeque;

use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{AgentPolicy, AgentView};
use crate::nn::{Batch, PolicyModel};
use crate::sim::stream_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// Lowest-index argmax for `Greedy`, a categorical draw from the softmax for `Sample`.
pub fn choose_action<R: Rng + ?Sized>(logits: ArrayView1<f32>, mode: ActionMode, rng: &mut R) -> usize {
    match mode {
        ActionMode::Greedy => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        }
        ActionMode::Sample => {
            let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
            let w: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, &wi) in w.iter().enumerate() {
                if u < wi {
                    return i;
                }
                u -= wi;
            }
            w.len() - 1
        }
    }
}

/// The most recent `k` steps seen by a controller.
#[derive(Clone, Debug)]
pub struct Context {
    k: usize,
    obs_dim: usize,
    steps: VecDeque<(Vec<f32>, f32, usize, usize)>,
}

impl Context {
    pub fn new(k: usize, obs_dim: usize) -> Self {
        Self {
            k,
            obs_dim,
            steps: VecDeque::with_capacity(k),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn clear(&mut self) {
        self.steps.clear();
    }

    /// Appends a step whose action is not yet known, dropping the oldest beyond `k`.
    pub fn push(&mut self, obs: &[f32], rtg: f64, timestep: usize) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(Error::Shape(format!(
                "observation of length {} for a context of width {}",
                obs.len(),
                self.obs_dim
            )));
        }
        if self.steps.len() == self.k {
            self.steps.pop_front();
        }
        self.steps.push_back((obs.to_vec(), rtg as f32, 0, timestep));
        Ok(())
    }

    pub fn set_last_action(&mut self, action: usize) {
        if let Some(last) = self.steps.back_mut() {
            last.2 = action;
        }
    }

    /// Left-padded single-window batch.
    pub fn batch(&self) -> Result<Batch> {
        if self.steps.is_empty() {
            return Err(Error::InvalidParameter("cannot act on an empty context".into()));
        }
        let k = self.k;
        let pad = k - self.steps.len();
        let mut b = Batch {
            size: 1,
            k,
            obs_dim: self.obs_dim,
            states: vec![0.0; k * self.obs_dim],
            rtg: vec![0.0; k],
            actions: vec![0; k],
            timesteps: vec![0; k],
            mask: vec![false; k],
        };
        for (slot, (obs, rtg, action, t)) in (pad..k).zip(&self.steps) {
            b.states[slot * self.obs_dim..(slot + 1) * self.obs_dim].copy_from_slice(obs);
            b.rtg[slot] = *rtg;
            b.actions[slot] = *action;
            b.timesteps[slot] = *t;
            b.mask[slot] = true;
        }
        Ok(b)
    }
}

/// Action for the newest step of `ctx`.
pub fn select_action<R: Rng + ?Sized>(
    model: &PolicyModel<f32>,
    ctx: &Context,
    mode: ActionMode,
    rng: &mut R,
) -> Result<usize> {
    let batch = ctx.batch()?;
    let logits = model.logits(&batch)?;
    Ok(choose_action(logits.row(batch.k - 1), mode, rng))
}

/// Initial return-to-go targets as fractions of the best offline return.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtgSchedule {
    pub gamma_eval: f64,
    pub gamma_online: f64,
    pub base: f64,
}

impl RtgSchedule {
    pub fn new(base: f64) -> Self {
        Self {
            gamma_eval: 0.2,
            gamma_online: 0.3,
            base,
        }
    }

    pub fn eval_init(&self) -> f64 {
        self.gamma_eval * self.base
    }

    pub fn online_init(&self) -> f64 {
        self.gamma_online * self.base
    }
}

/// Decision-transformer controller for one intersection with a running return-to-go.
#[derive(Clone, Debug)]
pub struct DtAgent<'m> {
    model: &'m PolicyModel<f32>,
    agent_id: usize,
    scenario: String,
    mode: ActionMode,
    rtg_init: f64,
    running_rtg: f64,
    ctx: Context,
    rng: ChaCha8Rng,
}

impl<'m> DtAgent<'m> {
    pub fn new(
        model: &'m PolicyModel<f32>,
        scenario: &str,
        agent_id: usize,
        context_len: usize,
        mode: ActionMode,
        rtg_init: f64,
    ) -> Result<Self> {
        if context_len == 0 {
            return Err(Error::InvalidParameter("context length must be >= 1".into()));
        }
        if !rtg_init.is_finite() {
            return Err(Error::InvalidParameter(format!("initial return-to-go {rtg_init}")));
        }
        Ok(Self {
            model,
            agent_id,
            scenario: scenario.to_string(),
            mode,
            rtg_init,
            running_rtg: rtg_init,
            ctx: Context::new(context_len, model.config.obs_dim),
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn running_rtg(&self) -> f64 {
        self.running_rtg
    }
}

impl AgentPolicy for DtAgent<'_> {
    fn begin_episode(&mut self, seed: u64) {
        self.ctx.clear();
        self.running_rtg = self.rtg_init;
        self.rng = ChaCha8Rng::seed_from_u64(stream_seed(&self.scenario, seed, self.agent_id, "dt-policy"));
    }

    fn act(&mut self, view: &AgentView<'_>) -> Result<usize> {
        self.ctx.push(view.obs, self.running_rtg, view.step)?;
        let a = select_action(self.model, &self.ctx, self.mode, &mut self.rng)?;
        self.ctx.set_last_action(a);
        Ok(a)
    }

    fn observe(&mut self, _action: usize, reward: f64) {
        self.running_rtg -= reward;
    }
}
