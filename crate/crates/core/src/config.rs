//! Declarative experiment configuration with `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::behavior::BehaviorSpec;
use crate::dtlight::{DtTrainSettings, FinetuneSettings, KdWeights, RtgSchedule};
use crate::error::{Error, Result};
use crate::nn::{AdamWConfig, AdapterConfig, ModelConfig};
use crate::sim::ScenarioParams;

/// Transformer shape; dataset-dependent sizes are filled in later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Defaults to `4 * d_model`.
    pub d_ff: Option<usize>,
    pub dropout: f64,
    pub max_timesteps: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::student()
    }
}

impl ArchConfig {
    fn from_model(m: ModelConfig) -> Self {
        Self {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_ff: None,
            dropout: m.dropout,
            max_timesteps: m.max_timesteps,
        }
    }

    pub fn teacher() -> Self {
        Self::from_model(ModelConfig::teacher(0, 0))
    }

    pub fn student() -> Self {
        Self::from_model(ModelConfig::student(0, 0))
    }

    pub fn model_config(&self, obs_dim: usize, num_actions: usize) -> ModelConfig {
        let mut m = ModelConfig::new(self.n_layers, self.n_heads, self.d_model, obs_dim, num_actions);
        m.d_ff = self.d_ff.unwrap_or(4 * self.d_model);
        m.dropout = self.dropout;
        m.max_timesteps = self.max_timesteps;
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
    /// Discount applied to neighbor observations.
    pub neighbor_scale: f32,
    pub seed: u64,
    /// Fresh behavior episodes, never trained on, for teacher/student agreement checks.
    pub holdout_episodes: usize,
    pub holdout_seed: u64,
    /// Sub-trajectories drawn from the held-out episodes.
    pub holdout_windows: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            neighbor_scale: 0.75,
            seed: 0,
            holdout_episodes: 5,
            holdout_seed: 1_000_000,
            holdout_windows: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub context_len: usize,
    pub teacher_updates: usize,
    pub student_updates: usize,
    pub optimizer: AdamWConfig,
    pub target_entropy_fraction: f64,
    pub temperature_lr: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        let base = DtTrainSettings::default();
        Self {
            batch_size: base.batch_size,
            context_len: base.context_len,
            teacher_updates: 2000,
            student_updates: 3000,
            optimizer: base.optimizer,
            target_entropy_fraction: base.target_entropy_fraction,
            temperature_lr: base.temperature_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub episodes: usize,
    pub updates_per_episode: usize,
    pub buffer_capacity: usize,
    pub gamma_online: f64,
    pub rollout_seed: u64,
    /// Overrides `train.batch_size` during fine-tuning.
    pub batch_size: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let base = FinetuneSettings::default();
        Self {
            episodes: base.episodes,
            updates_per_episode: base.updates_per_episode,
            buffer_capacity: base.buffer_capacity,
            gamma_online: base.gamma_online,
            rollout_seed: base.rollout_seed,
            batch_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: usize,
    pub first_seed: u64,
    pub gamma_eval: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            first_seed: 1000,
            gamma_eval: RtgSchedule::new(0.0).gamma_eval,
        }
    }
}

impl EvalConfig {
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.first_seed + i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Seed for model initialization and minibatch sampling.
    pub seed: u64,
    /// Store wall-clock phase timings in artifacts (makes them non-reproducible).
    pub record_timing: bool,
    pub scenario: ScenarioParams,
    pub behavior: BehaviorSpec,
    pub data: DataConfig,
    pub teacher: ArchConfig,
    pub student: ArchConfig,
    pub adapter: AdapterConfig,
    pub train: TrainHyper,
    pub distill: KdWeights,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            record_timing: false,
            scenario: ScenarioParams::default(),
            behavior: BehaviorSpec::default(),
            data: DataConfig::default(),
            teacher: ArchConfig::teacher(),
            student: ArchConfig::student(),
            adapter: AdapterConfig::default(),
            train: TrainHyper::default(),
            distill: KdWeights::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small models and short schedules that run the whole pipeline on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.teacher = ArchConfig {
            n_layers: 3,
            n_heads: 4,
            d_model: 64,
            ..ArchConfig::teacher()
        };
        c.student = ArchConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            ..ArchConfig::student()
        };
        c.adapter.bottleneck = 8;
        c.train.batch_size = 32;
        c.train.teacher_updates = 600;
        c.train.student_updates = 500;
        c.train.optimizer.lr = 1e-3;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_value(parse_table(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(Some(path), &[])
    }

    /// Reads an optional TOML file, applies `key.path=value` overrides and validates.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::resolve(None, path, overrides)
    }

    /// Layers a TOML file and then overrides on top of `base` (the defaults when `None`).
    pub fn resolve(base: Option<&TrainConfig>, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match base {
            Some(b) => Value::try_from(b).map_err(|e| Error::Config(e.to_string()))?,
            None => Value::Table(Default::default()),
        };
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            merge(&mut root, parse_table(&text)?);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        Self::from_value(root)
    }

    /// Applies overrides on top of an already resolved config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::resolve(Some(self), None, overrides)
    }

    fn from_value(v: Value) -> Result<Self> {
        let c: Self = v.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.scenario.resolved_rate()?;
        if self.scenario.control_step_s == 0 || self.scenario.horizon_s < self.scenario.control_step_s {
            return bad("horizon must cover at least one control step");
        }
        self.behavior.validate(self.scenario.control_step_s)?;
        if self.data.episodes == 0 {
            return bad("data.episodes must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.data.neighbor_scale) {
            return bad("data.neighbor_scale must lie in [0, 1]");
        }
        if self.data.holdout_windows == 0 || self.data.holdout_episodes == 0 {
            return bad("data.holdout_episodes and data.holdout_windows must be >= 1");
        }
        self.teacher.model_config(1, 1).validate()?;
        let student = self.student.model_config(1, 1);
        student.validate()?;
        self.adapter.validate(student.d_model)?;
        self.teacher_settings().validate()?;
        self.finetune_settings().train.validate()?;
        let kd = &self.distill;
        if !(kd.temperature > 0.0) || !kd.alpha.is_finite() || !kd.beta.is_finite() {
            return bad("distill.temperature must be positive and weights finite");
        }
        if self.finetune.buffer_capacity == 0 {
            return bad("finetune.buffer_capacity must be >= 1");
        }
        if !self.finetune.gamma_online.is_finite() || !self.eval.gamma_eval.is_finite() {
            return bad("RTG scale factors must be finite");
        }
        if self.eval.seeds == 0 {
            return bad("eval.seeds must be >= 1");
        }
        Ok(())
    }

    fn settings(&self, updates: usize, seed: u64) -> DtTrainSettings {
        DtTrainSettings {
            updates,
            batch_size: self.train.batch_size,
            context_len: self.train.context_len,
            optimizer: self.train.optimizer.clone(),
            target_entropy_fraction: self.train.target_entropy_fraction,
            temperature_lr: self.train.temperature_lr,
            seed,
        }
    }

    pub fn teacher_settings(&self) -> DtTrainSettings {
        self.settings(self.train.teacher_updates, self.seed)
    }

    pub fn student_settings(&self) -> DtTrainSettings {
        self.settings(self.train.student_updates, self.seed.wrapping_add(1))
    }

    pub fn finetune_settings(&self) -> FinetuneSettings {
        let mut train = self.settings(self.finetune.updates_per_episode, self.seed.wrapping_add(2));
        if let Some(b) = self.finetune.batch_size {
            train.batch_size = b;
        }
        FinetuneSettings {
            episodes: self.finetune.episodes,
            updates_per_episode: self.finetune.updates_per_episode,
            buffer_capacity: self.finetune.buffer_capacity,
            gamma_online: self.finetune.gamma_online,
            train,
            rollout_seed: self.finetune.rollout_seed,
        }
    }

    pub fn rtg_schedule(&self, base: f64) -> RtgSchedule {
        RtgSchedule {
            gamma_eval: self.eval.gamma_eval,
            gamma_online: self.finetune.gamma_online,
            base,
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_table(text: &str) -> Result<Value> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok(Value::Table(table))
}

/// Parses the right-hand side of an override as a TOML value, or a bare string.
fn parse_scalar(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c=value` inside a TOML document, creating intermediate tables.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not address a table entry")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.train.batch_size, 256);
        assert_eq!(c.train.teacher_updates, 2000);
        assert_eq!(c.train.student_updates, 3000);
        assert_eq!(c.distill, KdWeights { temperature: 8.0, alpha: 0.4, beta: 1.0 });
        assert_eq!(c.eval.gamma_eval, 0.2);
        assert_eq!(c.finetune.gamma_online, 0.3);
        assert_eq!((c.finetune.episodes, c.finetune.updates_per_episode), (10, 300));
        assert_eq!(c.data.episodes, 100);
        assert!(!c.record_timing);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            TrainConfig::from_toml_str("[train]\nbatchsize = 3"),
            Err(Error::Config(_))
        ));
        assert!(TrainConfig::from_toml_str("colour = 1").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::desk();
        let back = TrainConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_parse_types() {
        let c = TrainConfig::load_with_overrides(
            None,
            &[
                "distill.alpha=0".into(),
                "scenario.name=single-2lane".into(),
                "train.optimizer.lr = 3e-4".into(),
                "record_timing=true".into(),
                "student.d_ff=64".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.distill.alpha, 0.0);
        assert_eq!(c.scenario.name, "single-2lane");
        assert_eq!(c.train.optimizer.lr, 3e-4);
        assert!(c.record_timing);
        assert_eq!(c.student.model_config(3, 2).d_ff, 64);
    }

    #[test]
    fn bad_overrides_fail() {
        for o in ["distill.alpha", "distill..alpha=1", "nonsense.key=1", "seed.x=1", "train.batch_size=0"] {
            assert!(TrainConfig::load_with_overrides(None, &[o.to_string()]).is_err(), "{o}");
        }
    }

    #[test]
    fn file_layers_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[distill]\nalpha = 0.1\n[train]\nbatch_size = 8\n").unwrap();
        let c = TrainConfig::resolve(Some(&TrainConfig::desk()), Some(&path), &["distill.beta=2".into()]).unwrap();
        assert_eq!((c.distill.alpha, c.distill.beta, c.distill.temperature), (0.1, 2.0, 8.0));
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.teacher, TrainConfig::desk().teacher);
        let plain = TrainConfig::load(&path).unwrap();
        assert_eq!(plain.teacher, ArchConfig::teacher());
    }

    #[test]
    fn with_overrides_keeps_other_fields() {
        let c = TrainConfig::desk().with_overrides(&["distill.alpha=0.2".into()]).unwrap();
        assert_eq!(c.distill.alpha, 0.2);
        assert_eq!(c.train.batch_size, 32);
    }

    #[test]
    fn settings_carry_hyperparameters() {
        let c = TrainConfig::default();
        let t = c.teacher_settings();
        assert_eq!((t.updates, t.batch_size, t.context_len), (2000, 256, 20));
        assert_eq!(c.student_settings().updates, 3000);
        let f = c.finetune_settings();
        assert_eq!((f.episodes, f.updates_per_episode, f.buffer_capacity), (10, 300, 20));
        assert_ne!(t.seed, c.student_settings().seed);
    }

    #[test]
    fn desk_preset_is_valid() {
        TrainConfig::desk().validate().unwrap();
    }
}
