use ndarray::ArrayView2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::buffer::ReplayBuffer;
use super::loss::{dt_loss, kd_loss, KdWeights};
use super::policy::{choose_action, ActionMode, DtAgent};
use crate::data::{max_offline_return, sample_batch, top_c_trajectories, Dataset, SubTrajectory};
use crate::error::{Error, Result};
use crate::mdp::{rollout, ObservationLayout};
use crate::nn::{AdamW, AdamWConfig, AdapterConfig, Batch, Float, Gradients, ModelConfig, PolicyModel, TrainableSet};
use crate::sim::RoadNetwork;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DtTrainSettings {
    pub updates: usize,
    pub batch_size: usize,
    pub context_len: usize,
    pub optimizer: AdamWConfig,
    /// Target entropy as a fraction of `ln N`.
    pub target_entropy_fraction: f64,
    pub temperature_lr: f64,
    pub seed: u64,
}

impl Default for DtTrainSettings {
    fn default() -> Self {
        Self {
            updates: 2000,
            batch_size: 256,
            context_len: 20,
            optimizer: AdamWConfig::default(),
            target_entropy_fraction: 0.25,
            temperature_lr: 1e-4,
            seed: 0,
        }
    }
}

impl DtTrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.context_len == 0 {
            return Err(Error::InvalidParameter("batch size and context length must be >= 1".into()));
        }
        if !(self.temperature_lr >= 0.0) || !(0.0..=1.0).contains(&self.target_entropy_fraction) {
            return Err(Error::InvalidParameter("invalid temperature settings".into()));
        }
        self.optimizer.validate()
    }
}

/// Per-update training curves.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub loss: Vec<f64>,
    pub nll: Vec<f64>,
    pub entropy: Vec<f64>,
    pub temperature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub soft: Vec<f64>,
}

impl TrainLog {
    fn extend(&mut self, other: TrainLog) {
        self.loss.extend(other.loss);
        self.nll.extend(other.nll);
        self.entropy.extend(other.entropy);
        self.temperature.extend(other.temperature);
        self.soft.extend(other.soft);
    }
}

/// Mean of the first and last tenth of a series.
pub fn decile_means(series: &[f64]) -> Option<(f64, f64)> {
    let n = series.len() / 10;
    if n == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&series[..n]), mean(&series[series.len() - n..])))
}

/// Loss value and its breakdown for one batch.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub loss: f64,
    pub nll: f64,
    pub entropy: f64,
    pub soft: Option<f64>,
}

/// Forward, loss and backward for one batch; gradients are accumulated into `grads`.
/// With `teacher_logits`, the distillation objective replaces the plain one.
pub fn loss_and_grads<F: Float>(
    model: &PolicyModel<F>,
    batch: &Batch,
    lambda: f64,
    teacher_logits: Option<(ArrayView2<F>, KdWeights)>,
    rng: Option<&mut dyn RngCore>,
    grads: &mut Gradients<F>,
) -> Result<LossReport> {
    let pass = model.forward(batch, rng)?;
    let (report, dlogits) = match teacher_logits {
        Some((t, w)) => {
            let kd = kd_loss(pass.logits.view(), t, &batch.actions, &batch.mask, w, lambda)?;
            (
                LossReport {
                    loss: kd.loss,
                    nll: kd.hard.nll,
                    entropy: kd.hard.entropy,
                    soft: Some(kd.soft),
                },
                kd.dlogits,
            )
        }
        None => {
            let l = dt_loss(pass.logits.view(), &batch.actions, &batch.mask, lambda)?;
            (
                LossReport {
                    loss: l.loss,
                    nll: l.nll,
                    entropy: l.entropy,
                    soft: None,
                },
                l.dlogits,
            )
        }
    };
    model.backward(&pass, dlogits.view(), grads)?;
    Ok(report)
}

/// Adam on `log λ` for the entropy-constraint dual.
#[derive(Clone, Debug)]
struct TemperatureDual {
    lr: f64,
    target: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl TemperatureDual {
    fn new(lr: f64, target: f64) -> Self {
        Self { lr, target, m: 0.0, v: 0.0, t: 0 }
    }

    /// Descends `λ · (target_gap)` in `log λ`: λ shrinks while entropy exceeds the target.
    fn update(&mut self, log_lambda: f64, entropy: f64) -> f64 {
        let g = log_lambda.exp() * (entropy - self.target);
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let mh = self.m / (1.0 - 0.9f64.powi(self.t));
        let vh = self.v / (1.0 - 0.999f64.powi(self.t));
        log_lambda - self.lr * mh / (vh.sqrt() + 1e-8)
    }
}

/// Stateful optimizer loop shared by all three phases.
pub struct Trainer {
    settings: DtTrainSettings,
    optimizer: AdamW<f32>,
    grads: Gradients<f32>,
    dual: Option<TemperatureDual>,
    batch_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    updates_done: usize,
}

impl Trainer {
    pub fn new(model: &PolicyModel<f32>, settings: &DtTrainSettings) -> Result<Self> {
        settings.validate()?;
        let lt = model.log_temperature_id();
        let optimizer = AdamW::new(settings.optimizer.clone(), &model.store, &[lt])?;
        let dual = model.store.tensor(lt).trainable.then(|| {
            let target = settings.target_entropy_fraction * (model.config.num_actions as f64).ln();
            TemperatureDual::new(settings.temperature_lr, target)
        });
        let mut batch_rng = ChaCha8Rng::seed_from_u64(settings.seed);
        batch_rng.set_stream(1);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(settings.seed);
        dropout_rng.set_stream(2);
        Ok(Self {
            settings: settings.clone(),
            optimizer,
            grads: Gradients::for_store(&model.store),
            dual,
            batch_rng,
            dropout_rng,
            updates_done: 0,
        })
    }

    /// Runs `updates` gradient steps on batches drawn from `data`.
    pub fn run(
        &mut self,
        model: &mut PolicyModel<f32>,
        data: &Dataset,
        updates: usize,
        teacher: Option<(&PolicyModel<f32>, KdWeights)>,
    ) -> Result<TrainLog> {
        check_compatible(model, data)?;
        if let Some((t, _)) = teacher {
            if t.config.obs_dim != model.config.obs_dim || t.config.num_actions != model.config.num_actions {
                return Err(Error::Incompatible("teacher and student disagree on obs_dim/num_actions".into()));
            }
        }
        let mut log = TrainLog::default();
        let lt = model.log_temperature_id();
        for _ in 0..updates {
            let windows = sample_batch(data, self.settings.batch_size, self.settings.context_len, &mut self.batch_rng)?;
            let batch = Batch::from_windows(&windows)?;
            let teacher_logits = match teacher {
                Some((t, w)) => Some((t.logits(&batch)?, w)),
                None => None,
            };
            let lambda = model.temperature() as f64;
            self.grads.zero();
            let report = loss_and_grads(
                model,
                &batch,
                lambda,
                teacher_logits.as_ref().map(|(l, w)| (l.view(), *w)),
                Some(&mut self.dropout_rng),
                &mut self.grads,
            )?;
            if !report.loss.is_finite() {
                return Err(Error::Diverged {
                    update: self.updates_done,
                    loss: report.loss,
                });
            }
            self.optimizer.step(&mut model.store, &self.grads);
            if let Some(dual) = self.dual.as_mut() {
                let cur = model.store.data(lt)[0] as f64;
                model.store.tensor_mut(lt).data[0] = dual.update(cur, report.entropy) as f32;
            }
            self.updates_done += 1;
            log.loss.push(report.loss);
            log.nll.push(report.nll);
            log.entropy.push(report.entropy);
            log.temperature.push(model.temperature() as f64);
            if let Some(s) = report.soft {
                log.soft.push(s);
            }
        }
        Ok(log)
    }
}

fn check_compatible(model: &PolicyModel<f32>, data: &Dataset) -> Result<()> {
    let c = &model.config;
    if c.obs_dim != data.obs_dim() || c.num_actions != data.num_actions() {
        return Err(Error::Incompatible(format!(
            "model expects obs_dim {} / {} actions, dataset has {} / {}",
            c.obs_dim,
            c.num_actions,
            data.obs_dim(),
            data.num_actions()
        )));
    }
    let longest = data.episodes.iter().map(|e| e.len()).max().unwrap_or(0);
    if longest > c.max_timesteps {
        return Err(Error::Incompatible(format!(
            "episodes of {longest} steps exceed max_timesteps {}",
            c.max_timesteps
        )));
    }
    Ok(())
}

/// Fills the dataset-dependent fields of a model config.
pub fn sized_for(mut config: ModelConfig, data: &Dataset) -> ModelConfig {
    config.obs_dim = data.obs_dim();
    config.num_actions = data.num_actions();
    config
}

pub fn train_teacher(
    data: &Dataset,
    config: ModelConfig,
    settings: &DtTrainSettings,
    init_seed: u64,
) -> Result<(PolicyModel<f32>, TrainLog)> {
    let mut model = PolicyModel::<f32>::init(sized_for(config, data), init_seed)?;
    let mut trainer = Trainer::new(&model, settings)?;
    let log = trainer.run(&mut model, data, settings.updates, None)?;
    Ok((model, log))
}

/// Fraction of valid steps where teacher and student pick the same greedy action.
pub fn greedy_agreement(
    teacher: &PolicyModel<f32>,
    student: &PolicyModel<f32>,
    windows: &[SubTrajectory],
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut same, mut total) = (0usize, 0usize);
    for chunk in windows.chunks(64) {
        let batch = Batch::from_windows(chunk)?;
        let zt = teacher.logits(&batch)?;
        let zs = student.logits(&batch)?;
        for r in (0..batch.steps()).filter(|&r| batch.mask[r]) {
            let at = choose_action(zt.row(r), ActionMode::Greedy, &mut rng);
            let as_ = choose_action(zs.row(r), ActionMode::Greedy, &mut rng);
            same += usize::from(at == as_);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Dataset("no valid steps to compare".into()));
    }
    Ok(same as f64 / total as f64)
}

/// Deterministic held-out windows for agreement checks.
pub fn holdout_windows(data: &Dataset, count: usize, k: usize, seed: u64) -> Result<Vec<SubTrajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    sample_batch(data, count, k, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillOutcome {
    pub log: TrainLog,
    pub agreement: f64,
}

/// Trains a fresh student against `teacher`, then injects identity adapters.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    teacher: &PolicyModel<f32>,
    data: &Dataset,
    holdout: &[SubTrajectory],
    student_config: ModelConfig,
    adapter: AdapterConfig,
    settings: &DtTrainSettings,
    weights: KdWeights,
    init_seed: u64,
) -> Result<(PolicyModel<f32>, DistillOutcome)> {
    check_compatible(teacher, data)?;
    let mut config = sized_for(student_config, data);
    config.adapter = None;
    let mut student = PolicyModel::<f32>::init(config, init_seed)?;
    let mut trainer = Trainer::new(&student, settings)?;
    let log = trainer.run(&mut student, data, settings.updates, Some((teacher, weights)))?;
    student.inject_adapters(adapter, init_seed.wrapping_add(1))?;
    let agreement = greedy_agreement(teacher, &student, holdout)?;
    Ok((student, DistillOutcome { log, agreement }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSettings {
    pub episodes: usize,
    pub updates_per_episode: usize,
    pub buffer_capacity: usize,
    pub gamma_online: f64,
    pub train: DtTrainSettings,
    /// Seed of the first online episode; episode `w` uses `rollout_seed + w`.
    pub rollout_seed: u64,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            episodes: 10,
            updates_per_episode: 300,
            buffer_capacity: 20,
            gamma_online: 0.3,
            train: DtTrainSettings::default(),
            rollout_seed: 10_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub rtg_init: Vec<f64>,
    /// Average delay of every online episode.
    pub episode_delay: Vec<f64>,
    /// Per-episode, per-agent returns.
    pub episode_returns: Vec<Vec<f64>>,
    /// Per-agent training curves.
    pub train: Vec<TrainLog>,
}

/// Online adapter fine-tuning of one independent student per intersection.
pub fn finetune_online(
    students: &mut [PolicyModel<f32>],
    datasets: &[Dataset],
    net: &RoadNetwork,
    layout: &ObservationLayout,
    settings: &FinetuneSettings,
) -> Result<FinetuneLog> {
    let n = net.intersections.len();
    if students.len() != n || datasets.len() != n {
        return Err(Error::InvalidParameter(format!(
            "need one student and one dataset per intersection ({n})"
        )));
    }
    let mut buffers = Vec::with_capacity(n);
    let mut trainers = Vec::with_capacity(n);
    let mut frozen = Vec::with_capacity(n);
    let mut log = FinetuneLog::default();
    for (i, (model, data)) in students.iter_mut().zip(datasets).enumerate() {
        check_compatible(model, data)?;
        if model.config.obs_dim != layout.obs_dim() {
            return Err(Error::Incompatible(format!(
                "student {i} expects obs_dim {}, network yields {}",
                model.config.obs_dim,
                layout.obs_dim()
            )));
        }
        model.store.set_trainable(TrainableSet::FinetuneSet);
        frozen.push(model.store.frozen_checksum());
        let c = settings.buffer_capacity.min(data.len());
        if c < settings.buffer_capacity {
            log::warn!("agent {i}: only {} offline episodes for a buffer of {}", data.len(), settings.buffer_capacity);
        }
        buffers.push(ReplayBuffer::from_trajectories(settings.buffer_capacity, top_c_trajectories(data, c)?)?);
        log.rtg_init.push(settings.gamma_online * max_offline_return(data)?);
        let mut s = settings.train.clone();
        s.seed = s.seed.wrapping_add(i as u64);
        trainers.push(Trainer::new(model, &s)?);
        log.train.push(TrainLog::default());
    }
    for w in 0..settings.episodes {
        let seed = settings.rollout_seed.wrapping_add(w as u64);
        let out = {
            let mut agents = students
                .iter()
                .enumerate()
                .map(|(i, m)| DtAgent::new(m, &net.scenario, i, settings.train.context_len, ActionMode::Sample, log.rtg_init[i]))
                .collect::<Result<Vec<_>>>()?;
            rollout(&mut agents, net, layout, seed)?
        };
        log.episode_delay.push(out.average_delay);
        log.episode_returns.push(out.trajectories.iter().map(|t| t.episode_return).collect());
        for (i, traj) in out.trajectories.into_iter().enumerate() {
            buffers[i].insert(traj);
            let online = Dataset::new(datasets[i].header.clone(), buffers[i].trajectories().to_vec())?;
            let part = trainers[i].run(&mut students[i], &online, settings.updates_per_episode, None)?;
            log.train[i].extend(part);
        }
    }
    for (i, model) in students.iter().enumerate() {
        if model.store.frozen_checksum() != frozen[i] {
            return Err(Error::InvalidParameter(format!("frozen tensors of student {i} changed")));
        }
    }
    Ok(log)
}
