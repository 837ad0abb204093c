//! Decision-transformer and distillation objectives with their logit gradients.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Float;

/// Log-probabilities of one logit row.
fn log_softmax<F: Float>(z: ArrayView1<F>, inv_temp: F) -> Vec<F> {
    let m = z.fold(F::neg_infinity(), |a, &b| a.max(b * inv_temp));
    let lse = z.iter().map(|&v| (v * inv_temp - m).exp()).sum::<F>().ln() + m;
    z.iter().map(|&v| v * inv_temp - lse).collect()
}

fn valid_rows(mask: &[bool], rows: usize) -> Result<usize> {
    if mask.len() != rows {
        return Err(Error::Shape(format!("{} mask entries for {rows} logit rows", mask.len())));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::InvalidParameter("loss over an empty valid mask".into()));
    }
    Ok(n)
}

#[derive(Clone, Debug)]
pub struct DtLoss<F> {
    /// `nll - λ · entropy`.
    pub loss: f64,
    pub nll: f64,
    pub entropy: f64,
    pub valid: usize,
    pub dlogits: Array2<F>,
}

/// Mean negative log-likelihood of the taken actions minus `λ` times the mean
/// policy entropy, over valid rows only.
pub fn dt_loss<F: Float>(
    logits: ArrayView2<F>,
    actions: &[usize],
    mask: &[bool],
    lambda: f64,
) -> Result<DtLoss<F>> {
    let (rows, n_act) = logits.dim();
    let n = valid_rows(mask, rows)?;
    if actions.len() != rows {
        return Err(Error::Shape(format!("{} actions for {rows} logit rows", actions.len())));
    }
    let inv_n = F::of(1.0 / n as f64);
    let lam = F::of(lambda);
    let mut dlogits = Array2::zeros((rows, n_act));
    let (mut nll, mut ent) = (F::zero(), F::zero());
    for r in (0..rows).filter(|&r| mask[r]) {
        let a = actions[r];
        if a >= n_act {
            return Err(Error::InvalidParameter(format!("action {a} outside 0..{n_act}")));
        }
        let logp = log_softmax(logits.row(r), F::one());
        let h = -logp.iter().map(|&lp| lp.exp() * lp).sum::<F>();
        nll -= logp[a];
        ent += h;
        let mut drow = dlogits.row_mut(r);
        for (j, &lp) in logp.iter().enumerate() {
            let p = lp.exp();
            let onehot = if j == a { F::one() } else { F::zero() };
            drow[j] = ((p - onehot) + lam * p * (lp + h)) * inv_n;
        }
    }
    let nll = nll.to_f64_lossy() / n as f64;
    let entropy = ent.to_f64_lossy() / n as f64;
    Ok(DtLoss {
        loss: nll - lambda * entropy,
        nll,
        entropy,
        valid: n,
        dlogits,
    })
}

/// Mean over valid rows of `-Σ_i t_i log s_i` with `t = softmax(z_t / T)`,
/// `s = softmax(z_s / T)`, and its gradient with respect to the student logits.
pub fn soft_cross_entropy<F: Float>(
    student: ArrayView2<F>,
    teacher: ArrayView2<F>,
    mask: &[bool],
    temperature: f64,
) -> Result<(f64, Array2<F>)> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter(format!("distillation temperature {temperature} must be > 0")));
    }
    if student.dim() != teacher.dim() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.dim(),
            teacher.dim()
        )));
    }
    let (rows, n_act) = student.dim();
    let n = valid_rows(mask, rows)?;
    let inv_t = F::of(1.0 / temperature);
    let scale = F::of(1.0 / (temperature * n as f64));
    let mut grad = Array2::zeros((rows, n_act));
    let mut total = F::zero();
    for r in (0..rows).filter(|&r| mask[r]) {
        let ls = log_softmax(student.row(r), inv_t);
        let lt = log_softmax(teacher.row(r), inv_t);
        let mut g = grad.row_mut(r);
        for j in 0..n_act {
            let t = lt[j].exp();
            total -= t * ls[j];
            g[j] = (ls[j].exp() - t) * scale;
        }
    }
    Ok((total.to_f64_lossy() / n as f64, grad))
}

#[derive(Clone, Debug)]
pub struct KdLoss<F> {
    /// `α · soft + β · hard.loss`.
    pub loss: f64,
    pub soft: f64,
    pub hard: DtLoss<F>,
    pub dlogits: Array2<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdWeights {
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for KdWeights {
    fn default() -> Self {
        Self {
            temperature: 8.0,
            alpha: 0.4,
            beta: 1.0,
        }
    }
}

/// Distillation objective; the teacher logits are treated as constants.
pub fn kd_loss<F: Float>(
    student: ArrayView2<F>,
    teacher: ArrayView2<F>,
    actions: &[usize],
    mask: &[bool],
    weights: KdWeights,
    lambda: f64,
) -> Result<KdLoss<F>> {
    let (soft, dsoft) = soft_cross_entropy(student, teacher, mask, weights.temperature)?;
    let hard = dt_loss(student, actions, mask, lambda)?;
    let (a, b) = (F::of(weights.alpha), F::of(weights.beta));
    let dlogits = &dsoft * a + &hard.dlogits * b;
    Ok(KdLoss {
        loss: weights.alpha * soft + weights.beta * hard.loss,
        soft,
        hard,
        dlogits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rows: usize, cols: usize, seed: u64, scale: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
    }

    #[test]
    fn uniform_logits_give_log_n() {
        let z = Array2::<f64>::zeros((3, 4));
        let l = dt_loss(z.view(), &[0, 1, 3], &[true; 3], 0.0).unwrap();
        assert!((l.nll - 4f64.ln()).abs() < 1e-12);
        assert!((l.entropy - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_predictions_approach_zero() {
        let z = array![[60.0f64, 0.0, 0.0], [0.0, 0.0, 60.0]];
        let l = dt_loss(z.view(), &[0, 2], &[true, true], 0.1).unwrap();
        assert!(l.nll < 1e-20 && l.entropy < 1e-20 && l.loss.abs() < 1e-20);
    }

    #[test]
    fn zero_lambda_is_pure_nll() {
        let z = random_logits(5, 4, 1, 3.0);
        let acts = [0, 1, 2, 3, 1];
        let l = dt_loss(z.view(), &acts, &[true; 5], 0.0).unwrap();
        let oracle: f64 = (0..5)
            .map(|r| {
                let row = z.row(r);
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[acts[r]]
            })
            .sum::<f64>()
            / 5.0;
        assert_eq!(l.loss, l.nll);
        assert!((l.nll - oracle).abs() < 1e-12);
    }

    #[test]
    fn masked_rows_are_ignored() {
        let mut z = random_logits(3, 4, 2, 2.0);
        let mask = [false, true, true];
        let a = dt_loss(z.view(), &[0, 1, 2], &mask, 0.3).unwrap();
        z.row_mut(0).fill(99.0);
        let b = dt_loss(z.view(), &[3, 1, 2], &mask, 0.3).unwrap();
        assert_eq!(a.loss, b.loss);
        assert!(b.dlogits.row(0).iter().all(|&g| g == 0.0));
        assert!(dt_loss(z.view(), &[0, 1, 2], &[false; 3], 0.0).is_err());
    }

    #[test]
    fn dt_gradient_matches_differences() {
        let z = random_logits(4, 5, 3, 2.0);
        let acts = [4, 0, 2, 1];
        let mask = [true, false, true, true];
        let lam = 0.37;
        let g = dt_loss(z.view(), &acts, &mask, lam).unwrap().dlogits;
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..5 {
                let mut zp = z.clone();
                zp[[r, c]] += h;
                let mut zm = z.clone();
                zm[[r, c]] -= h;
                let fd = (dt_loss(zp.view(), &acts, &mask, lam).unwrap().loss
                    - dt_loss(zm.view(), &acts, &mask, lam).unwrap().loss)
                    / (2.0 * h);
                let tol = 1e-4 * fd.abs().max(g[[r, c]].abs()) + 1e-10;
                assert!((fd - g[[r, c]]).abs() <= tol, "({r},{c}) {fd} vs {}", g[[r, c]]);
            }
        }
    }

    fn soft_oracle(s: &Array2<f64>, t: &Array2<f64>, temp: f64) -> f64 {
        let softmax = |row: Vec<f64>| {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = row.iter().map(|v| ((v - m) / temp).exp()).collect();
            let sum: f64 = e.iter().sum();
            e.into_iter().map(|v| v / sum).collect::<Vec<_>>()
        };
        let mut total = 0.0;
        for r in 0..s.nrows() {
            let ps = softmax(s.row(r).to_vec());
            let pt = softmax(t.row(r).to_vec());
            total -= pt.iter().zip(&ps).map(|(a, b)| a * b.ln()).sum::<f64>();
        }
        total / s.nrows() as f64
    }

    #[test]
    fn soft_term_matches_independent_oracle() {
        let s = random_logits(6, 8, 4, 5.0);
        let t = random_logits(6, 8, 5, 5.0);
        let (v, _) = soft_cross_entropy(s.view(), t.view(), &[true; 6], 8.0).unwrap();
        assert!((v - soft_oracle(&s, &t, 8.0)).abs() < 1e-6);
    }

    #[test]
    fn self_distillation_is_a_fixed_point() {
        let z = random_logits(3, 4, 6, 3.0);
        let (v, g) = soft_cross_entropy(z.view(), z.view(), &[true; 3], 2.0).unwrap();
        let p = crate::nn::layers::softmax_rows((&z / 2.0).view());
        let entropy: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>() / 3.0;
        assert!((v - entropy).abs() < 1e-12);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn huge_temperature_tends_to_log_n() {
        let s = random_logits(2, 8, 7, 3.0);
        let t = random_logits(2, 8, 8, 3.0);
        let (v, _) = soft_cross_entropy(s.view(), t.view(), &[true; 2], 1e6).unwrap();
        assert!((v - 8f64.ln()).abs() < 1e-5);
        assert!(soft_cross_entropy(s.view(), t.view(), &[true; 2], 0.0).is_err());
    }

    #[test]
    fn kd_is_linear_in_its_weights() {
        let s = random_logits(4, 3, 9, 2.0);
        let t = random_logits(4, 3, 10, 2.0);
        let acts = [0, 1, 2, 0];
        let mask = [true; 4];
        let w = KdWeights { temperature: 8.0, alpha: 0.4, beta: 1.0 };
        let kd = kd_loss(s.view(), t.view(), &acts, &mask, w, 0.1).unwrap();
        let (soft, _) = soft_cross_entropy(s.view(), t.view(), &mask, 8.0).unwrap();
        let hard = dt_loss(s.view(), &acts, &mask, 0.1).unwrap();
        assert_eq!(kd.loss, 0.4 * soft + hard.loss);
        let w0 = KdWeights { alpha: 0.0, beta: 0.7, ..w };
        let kd0 = kd_loss(s.view(), t.view(), &acts, &mask, w0, 0.1).unwrap();
        assert_eq!(kd0.loss, 0.7 * hard.loss);
    }

    #[test]
    fn kd_gradient_matches_differences() {
        let s = random_logits(3, 4, 11, 2.0);
        let t = random_logits(3, 4, 12, 2.0);
        let acts = [1, 3, 0];
        let mask = [true, true, false];
        let w = KdWeights { temperature: 3.0, alpha: 0.4, beta: 1.0 };
        let g = kd_loss(s.view(), t.view(), &acts, &mask, w, 0.2).unwrap().dlogits;
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..4 {
                let f = |d: f64| {
                    let mut z = s.clone();
                    z[[r, c]] += d;
                    kd_loss(z.view(), t.view(), &acts, &mask, w, 0.2).unwrap().loss
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!((fd - g[[r, c]]).abs() <= 1e-4 * fd.abs().max(g[[r, c]].abs()) + 1e-10);
            }
        }
    }
}
