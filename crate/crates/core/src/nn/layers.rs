//! Dense building blocks with hand-written backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::store::Float;

const LN_EPS: f64 = 1e-5;

pub fn linear<F: Float>(x: ArrayView2<F>, w: ArrayView2<F>, b: ArrayView1<F>) -> Array2<F> {
    let mut y = x.dot(&w);
    let b = b.as_slice().expect("contiguous bias");
    let cols = b.len();
    for row in y.as_slice_mut().expect("fresh array").chunks_exact_mut(cols) {
        row.iter_mut().zip(b).for_each(|(v, &bi)| *v += bi);
    }
    y
}

fn add_column_sums<F: Float>(acc: &mut [F], m: &[F]) {
    for row in m.chunks_exact(acc.len()) {
        acc.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
    }
}

/// Accumulates `xᵀ dy` and `Σ dy` into the given buffers and returns `dy wᵀ` when asked.
pub fn linear_backward<F: Float>(
    x: ArrayView2<F>,
    w: ArrayView2<F>,
    dy: ArrayView2<F>,
    gw: Option<ArrayViewMut2<F>>,
    gb: Option<&mut [F]>,
    need_dx: bool,
) -> Option<Array2<F>> {
    if let Some(mut gw) = gw {
        general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut gw);
    }
    if let Some(gb) = gb {
        let dy = dy.as_standard_layout();
        add_column_sums(gb, dy.as_slice().expect("standard layout"));
    }
    need_dx.then(|| dy.dot(&w.t()))
}

#[derive(Clone, Debug)]
pub struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Vec<F>,
}

pub fn layer_norm<F: Float>(
    x: ArrayView2<F>,
    gain: ArrayView1<F>,
    bias: ArrayView1<F>,
) -> (Array2<F>, LnCache<F>) {
    let cols = x.ncols();
    let d = F::of(cols as f64);
    let eps = F::of(LN_EPS);
    let gain = gain.as_slice().expect("contiguous gain");
    let bias = bias.as_slice().expect("contiguous bias");
    let mut xhat = x.as_standard_layout().into_owned();
    let mut y = Array2::zeros(x.raw_dim());
    let mut rstd = Vec::with_capacity(x.nrows());
    let rows = xhat.as_slice_mut().expect("standard layout").chunks_exact_mut(cols);
    let out = y.as_slice_mut().expect("fresh array").chunks_exact_mut(cols);
    for (row, yr) in rows.zip(out) {
        let mean = row.iter().fold(F::zero(), |a, &v| a + v) / d;
        row.iter_mut().for_each(|v| *v -= mean);
        let var = row.iter().fold(F::zero(), |a, &v| a + v * v) / d;
        let r = F::one() / (var + eps).sqrt();
        rstd.push(r);
        for (((v, o), &g), &b) in row.iter_mut().zip(yr).zip(gain).zip(bias) {
            *v = *v * r;
            *o = *v * g + b;
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<F: Float>(
    dy: ArrayView2<F>,
    cache: &LnCache<F>,
    gain: ArrayView1<F>,
    ggain: Option<&mut [F]>,
    gbias: Option<&mut [F]>,
) -> Array2<F> {
    let cols = dy.ncols();
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let xs = cache.xhat.as_slice().expect("standard layout");
    let gain = gain.as_slice().expect("contiguous gain");
    if let Some(gg) = ggain {
        for (dr, xr) in dys.chunks_exact(cols).zip(xs.chunks_exact(cols)) {
            for ((g, &d), &x) in gg.iter_mut().zip(dr).zip(xr) {
                *g += d * x;
            }
        }
    }
    if let Some(gb) = gbias {
        add_column_sums(gb, dys);
    }
    let n = F::of(cols as f64);
    let mut dx = Array2::zeros(dy.raw_dim());
    let out = dx.as_slice_mut().expect("fresh array").chunks_exact_mut(cols);
    for (((o, dr), xr), &r) in out.zip(dys.chunks_exact(cols)).zip(xs.chunks_exact(cols)).zip(&cache.rstd) {
        let (mut sum_d, mut sum_dx) = (F::zero(), F::zero());
        for ((v, &d), (&g, &xh)) in o.iter_mut().zip(dr).zip(gain.iter().zip(xr)) {
            *v = d * g;
            sum_d += *v;
            sum_dx += *v * xh;
        }
        let scale = r / n;
        for (v, &xh) in o.iter_mut().zip(xr) {
            *v = scale * (n * *v - sum_d - xh * sum_dx);
        }
    }
    dx
}

#[derive(Clone, Copy)]
struct GeluConsts<F> {
    c: F,
    k: F,
    k3: F,
    half: F,
    minus_two: F,
}

impl<F: Float> GeluConsts<F> {
    fn new() -> Self {
        let c = F::of((2.0 / std::f64::consts::PI).sqrt());
        let k = F::of(0.044715);
        Self {
            c,
            k,
            k3: F::of(3.0) * k,
            half: F::of(0.5),
            minus_two: F::of(-2.0),
        }
    }

    #[inline(always)]
    fn tanh(&self, x: F) -> F {
        let e = (x.abs() * self.minus_two).exp();
        let t = (F::one() - e) / (F::one() + e);
        if x < F::zero() {
            -t
        } else {
            t
        }
    }

    #[inline(always)]
    fn parts(&self, x: F) -> (F, F) {
        let x2 = x * x;
        let t = self.tanh(self.c * (x + self.k * x2 * x));
        let one = F::one();
        let y = self.half * x * (one + t);
        let dy = self.half * (one + t) + self.half * x * (one - t * t) * self.c * (one + self.k3 * x2);
        (y, dy)
    }
}

#[cfg(test)]
fn gelu_parts<F: Float>(x: F) -> (F, F) {
    GeluConsts::new().parts(x)
}

/// Tanh approximation of GeLU.
pub fn gelu<F: Float>(x: ArrayView2<F>) -> Array2<F> {
    let g = GeluConsts::new();
    x.mapv(|v| g.parts(v).0)
}

/// GeLU output together with its elementwise derivative.
pub fn gelu_with_grad<F: Float>(x: ArrayView2<F>) -> (Array2<F>, Array2<F>) {
    let g = GeluConsts::new();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut y = Vec::with_capacity(xs.len());
    let mut dy = Vec::with_capacity(xs.len());
    for &v in xs {
        let (a, b) = g.parts(v);
        y.push(a);
        dy.push(b);
    }
    let shape = x.raw_dim();
    (
        Array2::from_shape_vec(shape, y).expect("same length"),
        Array2::from_shape_vec(shape, dy).expect("same length"),
    )
}

pub fn gelu_backward<F: Float>(x: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
    let g = GeluConsts::new();
    let mut out = dy.to_owned();
    Zip::from(&mut out).and(&x).for_each(|d, &v| *d *= g.parts(v).1);
    out
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - p)`.
pub fn dropout_mask<F: Float, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut R,
) -> Array2<F> {
    let keep = F::of(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    })
}

/// Normal draws rejected outside two standard deviations.
pub fn truncated_normal<F: Float, R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<F> {
    if std == 0.0 {
        return vec![F::zero(); n];
    }
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break F::of(v);
            }
        })
        .collect()
}

/// Numerically stable row softmax.
pub fn softmax_rows<F: Float>(z: ArrayView2<F>) -> Array2<F> {
    let mut out = z.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}
