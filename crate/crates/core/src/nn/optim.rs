use serde::{Deserialize, Serialize};

use super::store::{Float, Gradients, ParamId, ParameterStore};
use crate::error::{Error, Result};

/// Decoupled-weight-decay Adam with linear warmup and global-norm clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
            grad_clip: 0.25,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid optimizer settings {self:?}")))
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    step: usize,
    moments: Vec<Option<(Vec<F>, Vec<F>)>>,
    skip: Vec<ParamId>,
}

impl<F: Float> AdamW<F> {
    /// Optimizes every trainable tensor except those in `skip`.
    pub fn new(config: AdamWConfig, store: &ParameterStore<F>, skip: &[ParamId]) -> Result<Self> {
        config.validate()?;
        let moments = store
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                (t.trainable && !skip.contains(&i))
                    .then(|| (vec![F::zero(); t.numel()], vec![F::zero(); t.numel()]))
            })
            .collect();
        Ok(Self {
            config,
            step: 0,
            moments,
            skip: skip.to_vec(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParameterStore<F>, grads: &Gradients<F>) -> f64 {
        let c = &self.config;
        let norm = grads.global_norm_excluding(&self.skip).to_f64_lossy();
        let clip = if norm > c.grad_clip { c.grad_clip / norm } else { 1.0 };
        let lr = c.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one, clip_f, eps) = (F::one(), F::of(clip), F::of(c.eps));
        let step_size = F::of(lr / bc1);
        let bc2_sqrt = F::of(bc2.sqrt());
        for (id, slot) in self.moments.iter_mut().enumerate() {
            let (Some((m, v)), Some(g)) = (slot.as_mut(), grads.get(id)) else {
                continue;
            };
            let tensor = store.tensor_mut(id);
            let decay = if tensor.shape.len() >= 2 {
                F::of(1.0 - lr * c.weight_decay)
            } else {
                one
            };
            for (((p, m), v), &g) in tensor.data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                let g = g * clip_f;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p * decay - step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}
