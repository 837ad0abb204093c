//! Causal transformer over `(return-to-go, state, action)` token triples.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    dropout_mask, gelu, gelu_backward, gelu_with_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    truncated_normal, LnCache,
};
use super::lphm::{lphm_weight, lphm_weight_backward, AdapterConfig, LphmShape};
use super::store::{Float, Gradients, ParamId, ParameterStore};
use crate::data::SubTrajectory;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;
const LPHM_FACTOR_STD: f64 = 0.3;
pub const INITIAL_TEMPERATURE: f64 = 0.1;
pub const LOG_TEMPERATURE: &str = "policy.log_temperature";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_timesteps: usize,
    pub obs_dim: usize,
    pub num_actions: usize,
    pub dropout: f64,
    pub adapter: Option<AdapterConfig>,
    /// Divisors for the (queue, approaching, waiting time) observation channels.
    pub state_scale: [f32; 3],
    pub rtg_scale: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::student(0, 0)
    }
}

impl ModelConfig {
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, obs_dim: usize, num_actions: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            max_timesteps: 1024,
            obs_dim,
            num_actions,
            dropout: 0.1,
            adapter: None,
            state_scale: [50.0, 50.0, 500.0],
            rtg_scale: 10_000.0,
        }
    }

    pub fn teacher(obs_dim: usize, num_actions: usize) -> Self {
        Self::new(6, 8, 512, obs_dim, num_actions)
    }

    pub fn student(obs_dim: usize, num_actions: usize) -> Self {
        Self::new(2, 2, 256, obs_dim, num_actions)
    }

    pub fn with_adapter(mut self, adapter: AdapterConfig) -> Self {
        self.adapter = Some(adapter);
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head and width counts must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.obs_dim == 0 || self.num_actions == 0 || self.max_timesteps == 0 {
            return bad("obs_dim, num_actions and max_timesteps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.state_scale.iter().any(|&v| !(v > 0.0)) || !(self.rtg_scale > 0.0) {
            return bad("input scales must be positive".into());
        }
        if let Some(a) = &self.adapter {
            a.validate(self.d_model)?;
        }
        Ok(())
    }
}

/// A batch of equal-length windows in the layout the model consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub k: usize,
    pub obs_dim: usize,
    pub states: Vec<f32>,
    pub rtg: Vec<f32>,
    pub actions: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn from_windows(windows: &[SubTrajectory]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let k = first.k();
        if k == 0 {
            return Err(Error::Shape("zero-length window".into()));
        }
        let obs_dim = first.states.len() / k;
        let mut b = Batch {
            size: windows.len(),
            k,
            obs_dim,
            states: Vec::with_capacity(windows.len() * k * obs_dim),
            rtg: Vec::with_capacity(windows.len() * k),
            actions: Vec::with_capacity(windows.len() * k),
            timesteps: Vec::with_capacity(windows.len() * k),
            mask: Vec::with_capacity(windows.len() * k),
        };
        for w in windows {
            if w.k() != k || w.states.len() != k * obs_dim || w.actions.len() != k {
                return Err(Error::Shape("windows in a batch must share K and obs_dim".into()));
            }
            b.states.extend_from_slice(&w.states);
            b.rtg.extend_from_slice(&w.rtg);
            b.actions.extend_from_slice(&w.actions);
            b.timesteps.extend_from_slice(&w.timesteps);
            b.mask.extend_from_slice(&w.mask);
        }
        Ok(b)
    }

    /// Number of step slots (`size * k`).
    pub fn steps(&self) -> usize {
        self.size * self.k
    }
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: ParamId,
    b: ParamId,
    rows: usize,
}

#[derive(Clone, Copy, Debug)]
struct Ln {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Lphm {
    s: ParamId,
    t: ParamId,
    bias: ParamId,
    shape: LphmShape,
}

#[derive(Clone, Copy, Debug)]
struct AdapterIds {
    down: Lphm,
    up: Lphm,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: Ln,
    qkv: Lin,
    proj: Lin,
    ln2: Ln,
    fc: Lin,
    mlp_proj: Lin,
    adapter: Option<AdapterIds>,
}

#[derive(Clone, Debug)]
struct ModelIds {
    timestep: ParamId,
    state: Lin,
    rtg: Lin,
    action: Lin,
    embed_ln: Ln,
    blocks: Vec<BlockIds>,
    final_ln: Ln,
    head: Lin,
    rule: Option<ParamId>,
    log_temperature: ParamId,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> Spec {
    Spec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn linear_specs(out: &mut Vec<Spec>, name: &str, rows: usize, cols: usize) {
    out.push(spec(format!("{name}.weight"), &[rows, cols], Init::Normal(INIT_STD)));
    out.push(spec(format!("{name}.bias"), &[cols], Init::Zeros));
}

fn ln_specs(out: &mut Vec<Spec>, name: &str, d: usize) {
    out.push(spec(format!("{name}.gain"), &[d], Init::Ones));
    out.push(spec(format!("{name}.bias"), &[d], Init::Zeros));
}

fn backbone_specs(c: &ModelConfig) -> Vec<Spec> {
    let d = c.d_model;
    let mut out = vec![spec(
        "embed.timestep.weight",
        &[c.max_timesteps, d],
        Init::Normal(INIT_STD),
    )];
    linear_specs(&mut out, "embed.state", c.obs_dim, d);
    linear_specs(&mut out, "embed.rtg", 1, d);
    linear_specs(&mut out, "embed.action", c.num_actions, d);
    ln_specs(&mut out, "embed.ln", d);
    for i in 0..c.n_layers {
        ln_specs(&mut out, &format!("blocks.{i}.ln1"), d);
        linear_specs(&mut out, &format!("blocks.{i}.attn.qkv"), d, 3 * d);
        linear_specs(&mut out, &format!("blocks.{i}.attn.proj"), d, d);
        ln_specs(&mut out, &format!("blocks.{i}.ln2"), d);
        linear_specs(&mut out, &format!("blocks.{i}.mlp.fc"), d, c.d_ff);
        linear_specs(&mut out, &format!("blocks.{i}.mlp.proj"), c.d_ff, d);
    }
    ln_specs(&mut out, "final.ln", d);
    linear_specs(&mut out, "head", d, c.num_actions);
    out.push(spec(
        LOG_TEMPERATURE,
        &[1],
        Init::Const(INITIAL_TEMPERATURE.ln()),
    ));
    out
}

fn adapter_specs(c: &ModelConfig, a: &AdapterConfig) -> Vec<Spec> {
    let n = a.n_div;
    let mut out = vec![spec(
        "adapter.rule",
        &[n, n, n],
        Init::Normal(1.0 / n as f64),
    )];
    let (down, up) = (a.down(c.d_model), a.up(c.d_model));
    for i in 0..c.n_layers {
        let p = format!("blocks.{i}.adapter");
        out.push(spec(format!("{p}.down.s"), &down.s_shape(), Init::Normal(LPHM_FACTOR_STD)));
        out.push(spec(format!("{p}.down.t"), &down.t_shape(), Init::Normal(LPHM_FACTOR_STD)));
        out.push(spec(format!("{p}.down.bias"), &[down.out_dim], Init::Zeros));
        out.push(spec(format!("{p}.up.s"), &up.s_shape(), Init::Normal(LPHM_FACTOR_STD)));
        out.push(spec(format!("{p}.up.t"), &up.t_shape(), Init::Zeros));
        out.push(spec(format!("{p}.up.bias"), &[up.out_dim], Init::Zeros));
    }
    out
}

fn add_specs<F: Float>(store: &mut ParameterStore<F>, specs: Vec<Spec>, rng: &mut ChaCha8Rng) -> Result<()> {
    for sp in specs {
        let n: usize = sp.shape.iter().product();
        let data = match sp.init {
            Init::Normal(std) => truncated_normal(n, std, rng),
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Const(v) => vec![F::of(v); n],
        };
        store.add(&sp.name, &sp.shape, data)?;
    }
    Ok(())
}

fn expected_shapes(c: &ModelConfig) -> Vec<Spec> {
    let mut specs = backbone_specs(c);
    if let Some(a) = &c.adapter {
        specs.extend(adapter_specs(c, a));
    }
    specs
}

fn resolve<F: Float>(store: &ParameterStore<F>, c: &ModelConfig) -> Result<ModelIds> {
    let specs = expected_shapes(c);
    if specs.len() != store.len() {
        return Err(Error::Incompatible(format!(
            "expected {} tensors for this config, found {}",
            specs.len(),
            store.len()
        )));
    }
    for sp in &specs {
        let t = store
            .by_name(&sp.name)
            .ok_or_else(|| Error::Incompatible(format!("missing tensor `{}`", sp.name)))?;
        if t.shape != sp.shape {
            return Err(Error::Incompatible(format!(
                "tensor `{}` has shape {:?}, config implies {:?}",
                sp.name, t.shape, sp.shape
            )));
        }
    }
    let id = |name: &str| store.id(name).expect("checked above");
    let lin = |name: &str, rows: usize| Lin {
        w: id(&format!("{name}.weight")),
        b: id(&format!("{name}.bias")),
        rows,
    };
    let ln = |name: &str| Ln {
        gain: id(&format!("{name}.gain")),
        bias: id(&format!("{name}.bias")),
    };
    let d = c.d_model;
    let blocks = (0..c.n_layers)
        .map(|i| {
            let adapter = c.adapter.as_ref().map(|a| {
                let p = format!("blocks.{i}.adapter");
                let lphm = |part: &str, shape: LphmShape| Lphm {
                    s: id(&format!("{p}.{part}.s")),
                    t: id(&format!("{p}.{part}.t")),
                    bias: id(&format!("{p}.{part}.bias")),
                    shape,
                };
                AdapterIds {
                    down: lphm("down", a.down(d)),
                    up: lphm("up", a.up(d)),
                }
            });
            BlockIds {
                ln1: ln(&format!("blocks.{i}.ln1")),
                qkv: lin(&format!("blocks.{i}.attn.qkv"), d),
                proj: lin(&format!("blocks.{i}.attn.proj"), d),
                ln2: ln(&format!("blocks.{i}.ln2")),
                fc: lin(&format!("blocks.{i}.mlp.fc"), d),
                mlp_proj: lin(&format!("blocks.{i}.mlp.proj"), c.d_ff),
                adapter,
            }
        })
        .collect();
    Ok(ModelIds {
        timestep: id("embed.timestep.weight"),
        state: lin("embed.state", c.obs_dim),
        rtg: lin("embed.rtg", 1),
        action: lin("embed.action", c.num_actions),
        embed_ln: ln("embed.ln"),
        blocks,
        final_ln: ln("final.ln"),
        head: lin("head", d),
        rule: c.adapter.as_ref().map(|_| id("adapter.rule")),
        log_temperature: id(LOG_TEMPERATURE),
    })
}

struct AdapterCache<F> {
    x: Array2<F>,
    w_down: Array2<F>,
    z: Array2<F>,
    h: Array2<F>,
    w_up: Array2<F>,
}

struct BlockCache<F> {
    ln1: LnCache<F>,
    n1: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    attn: Array2<F>,
    drop1: Option<Array2<F>>,
    ln2: LnCache<F>,
    n2: Array2<F>,
    gelu_grad: Array2<F>,
    g: Array2<F>,
    drop2: Option<Array2<F>>,
    adapter: Option<AdapterCache<F>>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardPass<F> {
    pub logits: Array2<F>,
    /// Final layer-norm output for every token, `[size * 3K, d_model]`.
    pub hidden: Array2<F>,
    size: usize,
    k: usize,
    states: Array2<F>,
    rtg: Array2<F>,
    actions: Vec<usize>,
    timesteps: Vec<usize>,
    embed_ln: LnCache<F>,
    embed_drop: Option<Array2<F>>,
    blocks: Vec<BlockCache<F>>,
    final_ln: LnCache<F>,
}

impl<F: Float> ForwardPass<F> {
    /// Row of `hidden` holding the state token of step slot `t` in window `b`.
    pub fn state_row(&self, b: usize, t: usize) -> usize {
        b * 3 * self.k + 3 * t + 1
    }
}

#[derive(Clone, Debug)]
pub struct PolicyModel<F: Float> {
    pub config: ModelConfig,
    pub store: ParameterStore<F>,
    ids: ModelIds,
}

fn apply_mask<F: Float>(x: &mut Array2<F>, mask: &Option<Array2<F>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

impl<F: Float> PolicyModel<F> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        add_specs(&mut store, backbone_specs(&config), &mut rng)?;
        if let Some(a) = &config.adapter {
            add_specs(&mut store, adapter_specs(&config, a), &mut rng)?;
        }
        let ids = resolve(&store, &config)?;
        Ok(Self { config, store, ids })
    }

    pub fn from_store(config: ModelConfig, store: ParameterStore<F>) -> Result<Self> {
        config.validate()?;
        let ids = resolve(&store, &config)?;
        Ok(Self { config, store, ids })
    }

    /// Adds identity-initialized adapters after every feed-forward layer.
    pub fn inject_adapters(&mut self, adapter: AdapterConfig, seed: u64) -> Result<()> {
        if self.config.adapter.is_some() {
            return Err(Error::InvalidParameter("model already has adapters".into()));
        }
        let mut config = self.config.clone().with_adapter(adapter);
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = config.adapter.clone().expect("just set");
        add_specs(&mut self.store, adapter_specs(&config, &a), &mut rng)?;
        self.ids = resolve(&self.store, &config)?;
        self.config = std::mem::take(&mut config);
        Ok(())
    }

    pub fn count_params(&self, only_trainable: bool) -> usize {
        self.store.count_params(only_trainable)
    }

    pub fn cast<G: Float>(&self) -> PolicyModel<G> {
        PolicyModel {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
        }
    }

    pub fn log_temperature_id(&self) -> ParamId {
        self.ids.log_temperature
    }

    pub fn temperature(&self) -> F {
        self.store.data(self.ids.log_temperature)[0].exp()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        let n = batch.steps();
        if batch.size == 0 || batch.k == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if batch.obs_dim != c.obs_dim || batch.states.len() != n * c.obs_dim {
            return Err(Error::Shape(format!(
                "batch obs_dim {} but model expects {}",
                batch.obs_dim, c.obs_dim
            )));
        }
        if batch.rtg.len() != n || batch.actions.len() != n || batch.timesteps.len() != n || batch.mask.len() != n {
            return Err(Error::Shape("batch field lengths disagree".into()));
        }
        if let Some(&t) = batch.timesteps.iter().find(|&&t| t >= c.max_timesteps) {
            return Err(Error::InvalidParameter(format!(
                "timestep {t} exceeds max_timesteps {}",
                c.max_timesteps
            )));
        }
        if let Some(&a) = batch.actions.iter().find(|&&a| a >= c.num_actions) {
            return Err(Error::InvalidParameter(format!(
                "action {a} outside 0..{}",
                c.num_actions
            )));
        }
        Ok(())
    }

    fn lin_fwd(&self, x: ArrayView2<F>, l: Lin) -> Array2<F> {
        linear(x, self.store.view2(l.w, l.rows), self.store.view1(l.b))
    }

    fn lin_bwd(
        &self,
        x: ArrayView2<F>,
        l: Lin,
        dy: ArrayView2<F>,
        grads: &mut Gradients<F>,
        need_dx: bool,
    ) -> Option<Array2<F>> {
        let (gw, gb) = grads.linear_mut(l.w, l.rows, l.b);
        linear_backward(x, self.store.view2(l.w, l.rows), dy, gw, gb, need_dx)
    }

    fn ln_fwd(&self, x: ArrayView2<F>, l: Ln) -> (Array2<F>, LnCache<F>) {
        layer_norm(x, self.store.view1(l.gain), self.store.view1(l.bias))
    }

    fn ln_bwd(&self, dy: ArrayView2<F>, cache: &LnCache<F>, l: Ln, grads: &mut Gradients<F>) -> Array2<F> {
        let (gg, gb) = grads.linear_mut(l.gain, 1, l.bias);
        let gg = gg.map(|v| v.into_slice().expect("contiguous"));
        layer_norm_backward(dy, cache, self.store.view1(l.gain), gg, gb)
    }

    /// Builds the `3K` token sequence per window: `(ĝ_t, s_t, a_t)` plus a timestep embedding.
    fn embed(&self, batch: &Batch) -> (Array2<F>, Array2<F>, Array2<F>) {
        let c = &self.config;
        let n = batch.steps();
        let states = Array2::from_shape_fn((n, c.obs_dim), |(i, j)| {
            F::of((batch.states[i * c.obs_dim + j] / c.state_scale[j % 3]) as f64)
        });
        let rtg = Array2::from_shape_fn((n, 1), |(i, _)| F::of((batch.rtg[i] / c.rtg_scale) as f64));
        let es = self.lin_fwd(states.view(), self.ids.state);
        let er = self.lin_fwd(rtg.view(), self.ids.rtg);
        let wt = self.store.view2(self.ids.timestep, c.max_timesteps);
        let wa = self.store.view2(self.ids.action.w, c.num_actions);
        let ba = self.store.view1(self.ids.action.b);
        let l = 3 * batch.k;
        let mut tokens = Array2::zeros((batch.size * l, c.d_model));
        for b in 0..batch.size {
            for t in 0..batch.k {
                let step = b * batch.k + t;
                let temb = wt.row(batch.timesteps[step]);
                let base = b * l + 3 * t;
                let mut r = tokens.row_mut(base);
                r.assign(&er.row(step));
                r += &temb;
                let mut r = tokens.row_mut(base + 1);
                r.assign(&es.row(step));
                r += &temb;
                let mut r = tokens.row_mut(base + 2);
                r.assign(&wa.row(batch.actions[step]));
                r += &ba;
                r += &temb;
            }
        }
        (tokens, states, rtg)
    }

    /// Token sequence before the embedding layer norm, for inspection.
    pub fn embed_tokens(&self, batch: &Batch) -> Result<Array2<F>> {
        self.check_batch(batch)?;
        Ok(self.embed(batch).0)
    }

    fn attention(&self, qkv: &Array2<F>, valid: &[bool], size: usize, l: usize) -> (Array2<F>, Vec<Array2<F>>) {
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let stride = 3 * d;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let src = qkv.as_slice().expect("contiguous qkv");
        let mut out = Array2::<F>::zeros((size * l, d));
        let dst = out.as_slice_mut().expect("contiguous output");
        let mut probs = Vec::with_capacity(size * self.config.n_heads);
        for b in 0..size {
            let base = b * l;
            let v = &valid[base..base + l];
            for h in 0..self.config.n_heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                let mut p = Array2::<F>::zeros((l, l));
                for i in 0..l {
                    let qi = &src[(base + i) * stride + qo..][..dh];
                    let prow = p.row_mut(i).into_slice().expect("contiguous row");
                    let mut m = F::neg_infinity();
                    for j in 0..=i {
                        if j == i || v[j] {
                            let kj = &src[(base + j) * stride + ko..][..dh];
                            let sc = dot(qi, kj) * scale;
                            prow[j] = sc;
                            m = m.max(sc);
                        }
                    }
                    let mut tot = F::zero();
                    for j in 0..=i {
                        if j == i || v[j] {
                            let e = (prow[j] - m).exp();
                            prow[j] = e;
                            tot += e;
                        }
                    }
                    let oi = &mut dst[(base + i) * d + qo..][..dh];
                    for j in 0..=i {
                        if prow[j] != F::zero() {
                            prow[j] = prow[j] / tot;
                            let vj = &src[(base + j) * stride + vo..][..dh];
                            axpy(oi, prow[j], vj);
                        }
                    }
                }
                probs.push(p);
            }
        }
        (out, probs)
    }

    fn attention_backward(&self, d_out: ArrayView2<F>, qkv: &Array2<F>, probs: &[Array2<F>], size: usize, l: usize) -> Array2<F> {
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let stride = 3 * d;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let src = qkv.as_slice().expect("contiguous qkv");
        let d_out = d_out.as_standard_layout();
        let go = d_out.as_slice().expect("contiguous gradient");
        let mut dqkv = Array2::<F>::zeros(qkv.raw_dim());
        let dst = dqkv.as_slice_mut().expect("contiguous gradient");
        let mut ds = vec![F::zero(); l];
        for b in 0..size {
            let base = b * l;
            for h in 0..self.config.n_heads {
                let p = &probs[b * self.config.n_heads + h];
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..l {
                    let prow = p.row(i);
                    let doi = &go[(base + i) * d + qo..][..dh];
                    let mut tot = F::zero();
                    for j in 0..=i {
                        let pij = prow[j];
                        if pij == F::zero() {
                            ds[j] = F::zero();
                            continue;
                        }
                        let vj = &src[(base + j) * stride + vo..][..dh];
                        let dp = dot(doi, vj);
                        ds[j] = dp * pij;
                        tot += ds[j];
                        axpy(&mut dst[(base + j) * stride + vo..][..dh], pij, doi);
                    }
                    let qi = &src[(base + i) * stride + qo..][..dh];
                    for j in 0..=i {
                        let pij = prow[j];
                        if pij == F::zero() {
                            continue;
                        }
                        let g = (ds[j] - pij * tot) * scale;
                        let kj = &src[(base + j) * stride + ko..][..dh];
                        axpy(&mut dst[(base + i) * stride + qo..][..dh], g, kj);
                        axpy(&mut dst[(base + j) * stride + ko..][..dh], g, qi);
                    }
                }
            }
        }
        dqkv
    }

    fn lphm_materialize(&self, l: &Lphm) -> Array2<F> {
        let rule = self.store.data(self.ids.rule.expect("adapter rule"));
        lphm_weight(&l.shape, rule, self.store.data(l.s), self.store.data(l.t))
    }

    fn adapter_forward(&self, x: Array2<F>, a: &AdapterIds) -> (Array2<F>, AdapterCache<F>) {
        let w_down = self.lphm_materialize(&a.down);
        let w_up = self.lphm_materialize(&a.up);
        let z = linear(x.view(), w_down.view(), self.store.view1(a.down.bias));
        let h = gelu(z.view());
        let mut y = linear(h.view(), w_up.view(), self.store.view1(a.up.bias));
        y += &x;
        (y, AdapterCache { x, w_down, z, h, w_up })
    }

    fn lphm_grads(&self, l: &Lphm, dw: Array2<F>, grads: &mut Gradients<F>) {
        let rule_id = self.ids.rule.expect("adapter rule");
        if !(grads.has(rule_id) || grads.has(l.s) || grads.has(l.t)) {
            return;
        }
        let (dr, ds, dt) = lphm_weight_backward(
            &l.shape,
            dw.view(),
            self.store.data(rule_id),
            self.store.data(l.s),
            self.store.data(l.t),
        );
        for (id, g) in [(rule_id, dr), (l.s, ds), (l.t, dt)] {
            if let Some(buf) = grads.get_mut(id) {
                buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
            }
        }
    }

    fn adapter_backward(&self, dy: ArrayView2<F>, cache: &AdapterCache<F>, a: &AdapterIds, grads: &mut Gradients<F>) -> Array2<F> {
        let rule_id = self.ids.rule.expect("adapter rule");
        let want = |l: &Lphm| grads.has(rule_id) || grads.has(l.s) || grads.has(l.t);
        let (want_up, want_down) = (want(&a.up), want(&a.down));
        let mut dw_up = want_up.then(|| Array2::zeros(cache.w_up.raw_dim()));
        let dh = linear_backward(
            cache.h.view(),
            cache.w_up.view(),
            dy,
            dw_up.as_mut().map(|m| m.view_mut()),
            grads.get_mut(a.up.bias),
            true,
        )
        .expect("dx requested");
        let dz = gelu_backward(cache.z.view(), dh.view());
        let mut dw_down = want_down.then(|| Array2::zeros(cache.w_down.raw_dim()));
        let mut dx = linear_backward(
            cache.x.view(),
            cache.w_down.view(),
            dz.view(),
            dw_down.as_mut().map(|m| m.view_mut()),
            grads.get_mut(a.down.bias),
            true,
        )
        .expect("dx requested");
        dx += &dy;
        if let Some(dw) = dw_up {
            self.lphm_grads(&a.up, dw, grads);
        }
        if let Some(dw) = dw_down {
            self.lphm_grads(&a.down, dw, grads);
        }
        dx
    }

    /// Full forward pass; dropout is active only when `rng` is given.
    pub fn forward(&self, batch: &Batch, mut rng: Option<&mut dyn RngCore>) -> Result<ForwardPass<F>> {
        self.check_batch(batch)?;
        let c = &self.config;
        let p = if rng.is_some() { c.dropout } else { 0.0 };
        let l = 3 * batch.k;
        let valid: Vec<bool> = batch
            .mask
            .iter()
            .flat_map(|&m| [m, m, m])
            .collect();
        let mut mask_for = |rows: usize, cols: usize| -> Option<Array2<F>> {
            match rng.as_deref_mut() {
                Some(r) if p > 0.0 => Some(dropout_mask(rows, cols, p, r)),
                _ => None,
            }
        };
        let (tokens, states, rtg) = self.embed(batch);
        let (mut x, embed_ln) = self.ln_fwd(tokens.view(), self.ids.embed_ln);
        let embed_drop = mask_for(x.nrows(), x.ncols());
        apply_mask(&mut x, &embed_drop);
        let mut blocks = Vec::with_capacity(c.n_layers);
        for bid in &self.ids.blocks {
            let (n1, ln1) = self.ln_fwd(x.view(), bid.ln1);
            let qkv = self.lin_fwd(n1.view(), bid.qkv);
            let (attn, probs) = self.attention(&qkv, &valid, batch.size, l);
            let mut a = self.lin_fwd(attn.view(), bid.proj);
            let drop1 = mask_for(a.nrows(), a.ncols());
            apply_mask(&mut a, &drop1);
            x += &a;
            let (n2, ln2) = self.ln_fwd(x.view(), bid.ln2);
            let f = self.lin_fwd(n2.view(), bid.fc);
            let (g, gelu_grad) = gelu_with_grad(f.view());
            let mut m = self.lin_fwd(g.view(), bid.mlp_proj);
            let drop2 = mask_for(m.nrows(), m.ncols());
            apply_mask(&mut m, &drop2);
            let (m, adapter) = match &bid.adapter {
                Some(a) => {
                    let (y, cache) = self.adapter_forward(m, a);
                    (y, Some(cache))
                }
                None => (m, None),
            };
            x += &m;
            blocks.push(BlockCache {
                ln1,
                n1,
                qkv,
                probs,
                attn,
                drop1,
                ln2,
                n2,
                gelu_grad,
                g,
                drop2,
                adapter,
            });
        }
        let (hidden, final_ln) = self.ln_fwd(x.view(), self.ids.final_ln);
        let state_rows: Vec<usize> = (0..batch.steps())
            .map(|i| (i / batch.k) * l + 3 * (i % batch.k) + 1)
            .collect();
        let hs = hidden.select(Axis(0), &state_rows);
        let logits = self.lin_fwd(hs.view(), self.ids.head);
        Ok(ForwardPass {
            logits,
            hidden,
            size: batch.size,
            k: batch.k,
            states,
            rtg,
            actions: batch.actions.clone(),
            timesteps: batch.timesteps.clone(),
            embed_ln,
            embed_drop,
            blocks,
            final_ln,
        })
    }

    /// Evaluation-mode logits, `[size * K, num_actions]`.
    pub fn logits(&self, batch: &Batch) -> Result<Array2<F>> {
        Ok(self.forward(batch, None)?.logits)
    }

    /// Accumulates parameter gradients for `dL/dlogits` into `grads`.
    pub fn backward(&self, pass: &ForwardPass<F>, dlogits: ArrayView2<F>, grads: &mut Gradients<F>) -> Result<()> {
        let c = &self.config;
        if dlogits.dim() != pass.logits.dim() {
            return Err(Error::Shape(format!(
                "logit gradient {:?} vs logits {:?}",
                dlogits.dim(),
                pass.logits.dim()
            )));
        }
        let (size, k) = (pass.size, pass.k);
        let l = 3 * k;
        let state_rows: Vec<usize> = (0..size * k).map(|i| (i / k) * l + 3 * (i % k) + 1).collect();
        let hs = pass.hidden.select(Axis(0), &state_rows);
        let dhs = self
            .lin_bwd(hs.view(), self.ids.head, dlogits, grads, true)
            .expect("dx requested");
        let mut dhidden = Array2::<F>::zeros(pass.hidden.raw_dim());
        for (i, &r) in state_rows.iter().enumerate() {
            dhidden.row_mut(r).assign(&dhs.row(i));
        }
        let mut dx = self.ln_bwd(dhidden.view(), &pass.final_ln, self.ids.final_ln, grads);
        for (bid, cache) in self.ids.blocks.iter().zip(&pass.blocks).rev() {
            let mut dm = match (&bid.adapter, &cache.adapter) {
                (Some(a), Some(ac)) => self.adapter_backward(dx.view(), ac, a, grads),
                _ => dx.clone(),
            };
            apply_mask(&mut dm, &cache.drop2);
            let dg = self
                .lin_bwd(cache.g.view(), bid.mlp_proj, dm.view(), grads, true)
                .expect("dx requested");
            let df = dg * &cache.gelu_grad;
            let dn2 = self
                .lin_bwd(cache.n2.view(), bid.fc, df.view(), grads, true)
                .expect("dx requested");
            dx += &self.ln_bwd(dn2.view(), &cache.ln2, bid.ln2, grads);
            let mut da = dx.clone();
            apply_mask(&mut da, &cache.drop1);
            let dattn = self
                .lin_bwd(cache.attn.view(), bid.proj, da.view(), grads, true)
                .expect("dx requested");
            let dqkv = self.attention_backward(dattn.view(), &cache.qkv, &cache.probs, size, l);
            let dn1 = self
                .lin_bwd(cache.n1.view(), bid.qkv, dqkv.view(), grads, true)
                .expect("dx requested");
            dx += &self.ln_bwd(dn1.view(), &cache.ln1, bid.ln1, grads);
        }
        apply_mask(&mut dx, &pass.embed_drop);
        let dtok = self.ln_bwd(dx.view(), &pass.embed_ln, self.ids.embed_ln, grads);

        let d = c.d_model;
        let n = size * k;
        let mut d_state = Array2::<F>::zeros((n, d));
        let mut d_rtg = Array2::<F>::zeros((n, d));
        for i in 0..n {
            let base = (i / k) * l + 3 * (i % k);
            d_rtg.row_mut(i).assign(&dtok.row(base));
            d_state.row_mut(i).assign(&dtok.row(base + 1));
        }
        self.lin_bwd(pass.states.view(), self.ids.state, d_state.view(), grads, false);
        self.lin_bwd(pass.rtg.view(), self.ids.rtg, d_rtg.view(), grads, false);
        {
            let (gw, gb) = grads.linear_mut(self.ids.action.w, c.num_actions, self.ids.action.b);
            if let Some(mut gw) = gw {
                for i in 0..n {
                    let base = (i / k) * l + 3 * (i % k);
                    let mut row = gw.row_mut(pass.actions[i]);
                    row += &dtok.row(base + 2);
                }
            }
            if let Some(gb) = gb {
                for i in 0..n {
                    let base = (i / k) * l + 3 * (i % k);
                    gb.iter_mut().zip(dtok.row(base + 2)).for_each(|(g, &v)| *g += v);
                }
            }
        }
        if let Some(mut gt) = grads.view2_mut(self.ids.timestep, c.max_timesteps) {
            for i in 0..n {
                let base = (i / k) * l + 3 * (i % k);
                let mut row = gt.row_mut(pass.timesteps[i]);
                for j in 0..3 {
                    row += &dtok.row(base + j);
                }
            }
        }
        Ok(())
    }
}

fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn axpy<F: Float>(y: &mut [F], a: F, x: &[F]) {
    y.iter_mut().zip(x).for_each(|(t, &v)| *t += a * v);
}
