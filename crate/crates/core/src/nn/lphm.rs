//! Low-rank parameterized hypercomplex multiplication (COMPACTER++ projections).
//!
//! A weight of shape `[in, out]` is `W = Σ_i A_i ⊗ (s_i t_iᵀ)` where the `n × n`
//! rule matrices `A_i` are shared by every adapter and `s_i ∈ ℝ^{in/n × r}`,
//! `t_i ∈ ℝ^{r × out/n}` belong to one layer.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::store::Float;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub n_div: usize,
    pub rank: usize,
    pub bottleneck: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            n_div: 4,
            rank: 1,
            bottleneck: 32,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.n_div == 0 || self.rank == 0 || self.bottleneck == 0 {
            return Err(Error::InvalidParameter(
                "adapter n_div, rank and bottleneck must be positive".into(),
            ));
        }
        if d_model % self.n_div != 0 || self.bottleneck % self.n_div != 0 {
            return Err(Error::InvalidParameter(format!(
                "d_model {d_model} and bottleneck {} must be divisible by n_div {}",
                self.bottleneck, self.n_div
            )));
        }
        Ok(())
    }

    pub fn down(&self, d_model: usize) -> LphmShape {
        LphmShape {
            n: self.n_div,
            rank: self.rank,
            in_dim: d_model,
            out_dim: self.bottleneck,
        }
    }

    pub fn up(&self, d_model: usize) -> LphmShape {
        LphmShape {
            n: self.n_div,
            rank: self.rank,
            in_dim: self.bottleneck,
            out_dim: d_model,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LphmShape {
    pub n: usize,
    pub rank: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LphmShape {
    pub fn in_block(&self) -> usize {
        self.in_dim / self.n
    }

    pub fn out_block(&self) -> usize {
        self.out_dim / self.n
    }

    pub fn s_shape(&self) -> [usize; 3] {
        [self.n, self.in_block(), self.rank]
    }

    pub fn t_shape(&self) -> [usize; 3] {
        [self.n, self.rank, self.out_block()]
    }

    pub fn rule_len(&self) -> usize {
        self.n * self.n * self.n
    }
}

/// `B_i = s_i t_iᵀ` for every division.
fn blocks<F: Float>(shape: &LphmShape, s: &[F], t: &[F]) -> Vec<Array2<F>> {
    let (ib, ob, r) = (shape.in_block(), shape.out_block(), shape.rank);
    (0..shape.n)
        .map(|i| {
            let si = ArrayView2::from_shape((ib, r), &s[i * ib * r..(i + 1) * ib * r]).unwrap();
            let ti = ArrayView2::from_shape((r, ob), &t[i * r * ob..(i + 1) * r * ob]).unwrap();
            si.dot(&ti)
        })
        .collect()
}

/// Materializes the dense `[in, out]` weight.
pub fn lphm_weight<F: Float>(shape: &LphmShape, rule: &[F], s: &[F], t: &[F]) -> Array2<F> {
    let n = shape.n;
    let (ib, ob) = (shape.in_block(), shape.out_block());
    let bs = blocks(shape, s, t);
    let mut w = Array2::zeros((shape.in_dim, shape.out_dim));
    for (i, b) in bs.iter().enumerate() {
        for p in 0..n {
            for q in 0..n {
                let a = rule[i * n * n + p * n + q];
                if a == F::zero() {
                    continue;
                }
                let mut blk = w.slice_mut(ndarray::s![p * ib..(p + 1) * ib, q * ob..(q + 1) * ob]);
                blk.scaled_add(a, b);
            }
        }
    }
    w
}

/// Gradients of a scalar with respect to `rule`, `s` and `t`, given `dL/dW`.
pub fn lphm_weight_backward<F: Float>(
    shape: &LphmShape,
    dw: ArrayView2<F>,
    rule: &[F],
    s: &[F],
    t: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let n = shape.n;
    let (ib, ob, r) = (shape.in_block(), shape.out_block(), shape.rank);
    let bs = blocks(shape, s, t);
    let mut d_rule = vec![F::zero(); shape.rule_len()];
    let mut d_s = vec![F::zero(); s.len()];
    let mut d_t = vec![F::zero(); t.len()];
    for (i, b) in bs.iter().enumerate() {
        let mut d_b = Array2::<F>::zeros((ib, ob));
        for p in 0..n {
            for q in 0..n {
                let blk = dw.slice(ndarray::s![p * ib..(p + 1) * ib, q * ob..(q + 1) * ob]);
                d_rule[i * n * n + p * n + q] = (&blk * b).sum();
                d_b.scaled_add(rule[i * n * n + p * n + q], &blk);
            }
        }
        let si = ArrayView2::from_shape((ib, r), &s[i * ib * r..(i + 1) * ib * r]).unwrap();
        let ti = ArrayView2::from_shape((r, ob), &t[i * r * ob..(i + 1) * r * ob]).unwrap();
        let ds = d_b.dot(&ti.t());
        let dt = si.t().dot(&d_b);
        d_s[i * ib * r..(i + 1) * ib * r].copy_from_slice(ds.as_slice().unwrap());
        d_t[i * r * ob..(i + 1) * r * ob].copy_from_slice(dt.as_slice().unwrap());
    }
    (d_rule, d_s, d_t)
}

/// Dense Kronecker product `a ⊗ b`.
pub fn kron<F: Float>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| a[[i / br, j / bc]] * b[[i % br, j % bc]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matches_kronecker_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = LphmShape {
            n: 4,
            rank: 2,
            in_dim: 16,
            out_dim: 8,
        };
        let rule = random(shape.rule_len(), &mut rng);
        let s = random(4 * 4 * 2, &mut rng);
        let t = random(4 * 2 * 2, &mut rng);
        let w = lphm_weight(&shape, &rule, &s, &t);
        let mut oracle = Array2::<f64>::zeros((16, 8));
        for i in 0..4 {
            let a = ArrayView2::from_shape((4, 4), &rule[i * 16..(i + 1) * 16]).unwrap();
            let si = ArrayView2::from_shape((4, 2), &s[i * 8..(i + 1) * 8]).unwrap();
            let ti = ArrayView2::from_shape((2, 2), &t[i * 4..(i + 1) * 4]).unwrap();
            oracle += &kron(a, si.dot(&ti).view());
        }
        let err = (&w - &oracle).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12, "max error {err}");
    }

    #[test]
    fn single_division_is_low_rank_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = LphmShape {
            n: 1,
            rank: 1,
            in_dim: 6,
            out_dim: 3,
        };
        let rule = vec![1.5];
        let s = random(6, &mut rng);
        let t = random(3, &mut rng);
        let w = lphm_weight(&shape, &rule, &s, &t);
        for i in 0..6 {
            for j in 0..3 {
                assert!((w[[i, j]] - 1.5 * s[i] * t[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_backward_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = LphmShape {
            n: 2,
            rank: 1,
            in_dim: 4,
            out_dim: 6,
        };
        let rule = random(8, &mut rng);
        let s = random(4, &mut rng);
        let t = random(6, &mut rng);
        let probe = Array2::from_shape_vec((4, 6), random(24, &mut rng)).unwrap();
        let loss = |r: &[f64], s: &[f64], t: &[f64]| (&lphm_weight(&shape, r, s, t) * &probe).sum();
        let (dr, ds, dt) = lphm_weight_backward(&shape, probe.view(), &rule, &s, &t);
        let h = 1e-6;
        let check = |analytic: &[f64], which: usize| {
            for (k, &a) in analytic.iter().enumerate() {
                let mut v = [rule.clone(), s.clone(), t.clone()];
                v[which][k] += h;
                let up = loss(&v[0], &v[1], &v[2]);
                v[which][k] -= 2.0 * h;
                let down = loss(&v[0], &v[1], &v[2]);
                assert!(((up - down) / (2.0 * h) - a).abs() < 1e-7);
            }
        };
        check(&dr, 0);
        check(&ds, 1);
        check(&dt, 2);
    }

    #[test]
    fn divisibility_is_checked() {
        assert!(AdapterConfig::default().validate(256).is_ok());
        assert!(AdapterConfig::default().validate(30).is_err());
        let odd = AdapterConfig {
            bottleneck: 30,
            ..AdapterConfig::default()
        };
        assert!(odd.validate(256).is_err());
    }
}
