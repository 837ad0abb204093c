//! The pipeline stages behind each CLI verb. Every stage reads its inputs from
//! and writes its artifacts into one run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use dtlight_core::behavior::{collect_datasets, dataset_path, write_datasets, BehaviorKind, BehaviorSpec};
use dtlight_core::config::TrainConfig;
use dtlight_core::data::{max_offline_return, Dataset};
use dtlight_core::dtlight::{
    distill, evaluate_behavior, evaluate_dt, finetune_online, holdout_windows, train_teacher, EpisodeOutcome,
};
use dtlight_core::mdp::ObservationLayout;
use dtlight_core::nn::{Checkpoint, PolicyModel};
use dtlight_core::provenance::{hash_file, read_json, write_atomic, write_json_atomic, Provenance};
use dtlight_core::report::{delay_table, size_table, EvalReport, Table};
use dtlight_core::sim::{build_scenario, RoadNetwork};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    TrainTeacher,
    Distill,
    Finetune,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::GenData,
        Stage::TrainTeacher,
        Stage::Distill,
        Stage::Finetune,
        Stage::Eval,
    ];

    /// Earliest stage whose output depends on `key`.
    pub fn affected_by(key: &str) -> Stage {
        let head = key.split('.').next().unwrap_or(key);
        match head {
            "scenario" | "behavior" | "data" | "seed" => Stage::GenData,
            "teacher" => Stage::TrainTeacher,
            "train" if key == "train.student_updates" => Stage::Distill,
            "train" => Stage::TrainTeacher,
            "student" | "adapter" | "distill" => Stage::Distill,
            "finetune" => Stage::Finetune,
            _ => Stage::Eval,
        }
    }
}

/// Policies that can be evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    FixedTime,
    MaxPressure,
    Emp,
    Teacher,
    Student,
    Finetuned,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FixedTime,
        Method::MaxPressure,
        Method::Emp,
        Method::Teacher,
        Method::Student,
        Method::Finetuned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FixedTime => "fixed_time",
            Method::MaxPressure => "max_pressure",
            Method::Emp => "emp",
            Method::Teacher => "teacher",
            Method::Student => "student",
            Method::Finetuned => "finetuned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .with_context(|| format!("unknown method `{s}`"))
    }

    fn behavior(self) -> Option<BehaviorKind> {
        match self {
            Method::FixedTime => Some(BehaviorKind::FixedTime),
            Method::MaxPressure => Some(BehaviorKind::MaxPressure),
            Method::Emp => Some(BehaviorKind::Emp),
            _ => None,
        }
    }

    fn checkpoint_dir(self) -> Option<&'static str> {
        match self {
            Method::Teacher => Some("teacher"),
            Method::Student => Some("student"),
            Method::Finetuned => Some("finetuned"),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self, dir: &str, agent: usize) -> PathBuf {
        self.root.join(dir).join(format!("agent-{agent}.json"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn tables(&self) -> PathBuf {
        self.root.join("tables")
    }

    fn report_path(&self, scenario: &str, method: &str) -> PathBuf {
        self.reports().join(scenario).join(format!("{method}.json"))
    }
}

struct World {
    net: RoadNetwork,
    layout: ObservationLayout,
}

fn world(cfg: &TrainConfig) -> Result<World> {
    let net = build_scenario(&cfg.scenario)?;
    let layout = ObservationLayout::for_network(&net, cfg.data.neighbor_scale)?;
    Ok(World { net, layout })
}

fn label(run: &RunDir, path: &Path) -> String {
    path.strip_prefix(&run.root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn timing(cfg: &TrainConfig, phase: &str, start: Instant, upstream: &Value) -> Value {
    let mut t: BTreeMap<String, f64> = upstream
        .get("timing_s")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    if cfg.record_timing {
        t.insert(phase.to_string(), start.elapsed().as_secs_f64());
    }
    json!(t)
}

fn load_datasets(run: &RunDir, agents: usize) -> Result<(Vec<Dataset>, Provenance)> {
    let mut out = Vec::with_capacity(agents);
    let mut prov = Provenance::default();
    for i in 0..agents {
        let path = dataset_path(&run.data(), i);
        if !path.exists() {
            bail!("missing dataset {}; run gen-data first", path.display());
        }
        out.push(Dataset::load(&path)?);
        prov.inputs.insert(label(run, &path), hash_file(&path)?);
    }
    Ok((out, prov))
}

fn load_checkpoints(run: &RunDir, dir: &str, agents: usize, upstream_verb: &str) -> Result<(Vec<Checkpoint>, Provenance)> {
    let mut out = Vec::with_capacity(agents);
    let mut prov = Provenance::default();
    for i in 0..agents {
        let path = run.checkpoint(dir, i);
        if !path.exists() {
            bail!("missing checkpoint {}; run {upstream_verb} first", path.display());
        }
        out.push(Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?);
        prov.inputs.insert(label(run, &path), hash_file(&path)?);
    }
    Ok((out, prov))
}

fn provenance(cfg: &TrainConfig, parts: &[&Provenance]) -> Provenance {
    let mut p = Provenance::new(cfg);
    for part in parts {
        p.inputs.extend(part.inputs.clone());
    }
    p
}

pub fn gen_data(cfg: &TrainConfig, run: &RunDir) -> Result<Vec<PathBuf>> {
    let w = world(cfg)?;
    let datasets = collect_datasets(&cfg.behavior, &w.net, &w.layout, cfg.data.episodes, cfg.data.seed)?;
    let prov = Provenance::new(cfg);
    Ok(write_datasets(&datasets, &run.data(), Some(&prov))?)
}

pub fn train_teachers(cfg: &TrainConfig, run: &RunDir) -> Result<Vec<PathBuf>> {
    let w = world(cfg)?;
    let (datasets, data_prov) = load_datasets(run, w.net.intersections.len())?;
    let mut written = Vec::new();
    for (i, ds) in datasets.iter().enumerate() {
        let start = Instant::now();
        let mut settings = cfg.teacher_settings();
        settings.seed = settings.seed.wrapping_add(i as u64);
        let arch = cfg.teacher.model_config(ds.obs_dim(), ds.num_actions());
        let (model, log) = train_teacher(ds, arch, &settings, cfg.seed.wrapping_add(i as u64))?;
        log::info!("teacher {i}: final loss {:.4}", log.loss.last().copied().unwrap_or(f64::NAN));
        let meta = json!({
            "phase": "teacher",
            "agent": i,
            "train_log": log,
            "timing_s": timing(cfg, "teacher", start, &Value::Null),
        });
        let path = run.checkpoint("teacher", i);
        let ckpt = Checkpoint {
            model,
            meta,
            provenance: Some(provenance(cfg, &[&data_prov])),
        };
        ckpt.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn distill_students(cfg: &TrainConfig, run: &RunDir) -> Result<Vec<PathBuf>> {
    let w = world(cfg)?;
    let agents = w.net.intersections.len();
    let (datasets, data_prov) = load_datasets(run, agents)?;
    let (teachers, teacher_prov) = load_checkpoints(run, "teacher", agents, "train-teacher")?;
    let holdout_data = collect_datasets(
        &cfg.behavior,
        &w.net,
        &w.layout,
        cfg.data.holdout_episodes,
        cfg.data.holdout_seed,
    )?;
    let settings = cfg.student_settings();
    let mut written = Vec::new();
    for (i, (ds, teacher)) in datasets.iter().zip(&teachers).enumerate() {
        let start = Instant::now();
        let holdout = holdout_windows(
            &holdout_data[i],
            cfg.data.holdout_windows,
            settings.context_len,
            cfg.seed,
        )?;
        let mut s = settings.clone();
        s.seed = s.seed.wrapping_add(i as u64);
        let arch = cfg.student.model_config(ds.obs_dim(), ds.num_actions());
        let init_seed = cfg.seed.wrapping_add(1 << 32).wrapping_add(2 * i as u64);
        let (student, outcome) = distill(
            &teacher.model,
            ds,
            &holdout,
            arch,
            cfg.adapter.clone(),
            &s,
            cfg.distill,
            init_seed,
        )?;
        log::info!("student {i}: held-out agreement {:.3}", outcome.agreement);
        let meta = json!({
            "phase": "student",
            "agent": i,
            "agreement": outcome.agreement,
            "train_log": outcome.log,
            "timing_s": timing(cfg, "distill", start, &teacher.meta),
        });
        let path = run.checkpoint("student", i);
        Checkpoint {
            model: student,
            meta,
            provenance: Some(provenance(cfg, &[&data_prov, &teacher_prov])),
        }
        .save(&path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn finetune(cfg: &TrainConfig, run: &RunDir) -> Result<Vec<PathBuf>> {
    let w = world(cfg)?;
    let agents = w.net.intersections.len();
    let (datasets, data_prov) = load_datasets(run, agents)?;
    let (students, student_prov) = load_checkpoints(run, "student", agents, "distill")?;
    let start = Instant::now();
    let metas: Vec<Value> = students.iter().map(|c| c.meta.clone()).collect();
    let mut models: Vec<PolicyModel<f32>> = students.into_iter().map(|c| c.model).collect();
    let log = finetune_online(&mut models, &datasets, &w.net, &w.layout, &cfg.finetune_settings())?;
    let prov = provenance(cfg, &[&data_prov, &student_prov]);
    let mut written = Vec::new();
    for (i, model) in models.into_iter().enumerate() {
        let meta = json!({
            "phase": "finetuned",
            "agent": i,
            "rtg_init": log.rtg_init[i],
            "episode_delay": log.episode_delay,
            "episode_returns": log.episode_returns.iter().map(|r| r[i]).collect::<Vec<_>>(),
            "train_log": log.train[i],
            "timing_s": timing(cfg, "finetune", start, &metas[i]),
        });
        let path = run.checkpoint("finetuned", i);
        Checkpoint {
            model,
            meta,
            provenance: Some(prov.clone()),
        }
        .save(&path)?;
        written.push(path);
    }
    Ok(written)
}

fn available(run: &RunDir, m: Method) -> bool {
    match m.checkpoint_dir() {
        Some(dir) => run.checkpoint(dir, 0).exists(),
        None => true,
    }
}

/// Evaluates the requested methods, or every method with artifacts when `methods` is empty.
pub fn eval(cfg: &TrainConfig, run: &RunDir, methods: &[Method]) -> Result<Vec<EvalReport>> {
    let w = world(cfg)?;
    let agents = w.net.intersections.len();
    let seeds = cfg.eval.seed_list();
    let chosen: Vec<Method> = if methods.is_empty() {
        Method::ALL.into_iter().filter(|&m| available(run, m)).collect()
    } else {
        methods.to_vec()
    };
    let mut reports = Vec::new();
    for m in chosen {
        let (outcomes, extra): (Vec<EpisodeOutcome>, Option<(Vec<Checkpoint>, Provenance)>) = match m.behavior() {
            Some(kind) => {
                let spec = BehaviorSpec {
                    kind,
                    ..cfg.behavior.clone()
                };
                (evaluate_behavior(&spec, &w.net, &w.layout, &seeds)?, None)
            }
            None => {
                let dir = m.checkpoint_dir().expect("learned method");
                let upstream = match m {
                    Method::Teacher => "train-teacher",
                    Method::Student => "distill",
                    _ => "finetune",
                };
                let (ckpts, ckpt_prov) = load_checkpoints(run, dir, agents, upstream)?;
                let (datasets, data_prov) = load_datasets(run, agents)?;
                let rtg = datasets
                    .iter()
                    .map(|d| Ok(cfg.rtg_schedule(max_offline_return(d)?).eval_init()))
                    .collect::<Result<Vec<f64>>>()?;
                let models: Vec<PolicyModel<f32>> = ckpts.iter().map(|c| c.model.clone()).collect();
                let out = evaluate_dt(&models, &rtg, cfg.train.context_len, &w.net, &w.layout, &seeds)?;
                (out, Some((ckpts, provenance(cfg, &[&data_prov, &ckpt_prov]))))
            }
        };
        let mut report = EvalReport::from_outcomes(&cfg.scenario.name, m.name(), &outcomes)?;
        report.provenance = Some(Provenance::new(cfg));
        if let Some((ckpts, prov)) = extra {
            report.params_total = Some(ckpts.iter().map(|c| c.model.count_params(false)).sum());
            report.params_trainable = Some(ckpts.iter().map(|c| c.model.count_params(true)).sum());
            for c in &ckpts {
                if let Some(t) = c.meta.get("timing_s").and_then(Value::as_object) {
                    for (phase, secs) in t {
                        *report.timing_s.entry(phase.clone()).or_default() += secs.as_f64().unwrap_or(0.0);
                    }
                }
            }
            report.provenance = Some(prov);
        }
        write_json_atomic(&run.report_path(&cfg.scenario.name, m.name()), &report)?;
        reports.push(report);
    }
    Ok(reports)
}

pub fn collect_reports(run: &RunDir) -> Result<Vec<EvalReport>> {
    let mut paths = Vec::new();
    let root = run.reports();
    if root.is_dir() {
        for scenario in fs::read_dir(&root).with_context(|| format!("reading {}", root.display()))? {
            let dir = scenario?.path();
            if dir.is_dir() {
                for entry in fs::read_dir(&dir)? {
                    let p = entry?.path();
                    if p.extension().is_some_and(|e| e == "json") {
                        paths.push(p);
                    }
                }
            }
        }
    }
    paths.sort();
    let mut reports: Vec<EvalReport> = paths.iter().map(|p| Ok(read_json(p)?)).collect::<Result<_>>()?;
    let order = |m: &str| Method::ALL.iter().position(|x| x.name() == m).unwrap_or(usize::MAX);
    reports.sort_by(|a, b| (order(&a.method), &a.method, &a.scenario).cmp(&(order(&b.method), &b.method, &b.scenario)));
    Ok(reports)
}

fn write_table(dir: &Path, name: &str, table: &Table) -> Result<()> {
    write_atomic(&dir.join(format!("{name}.csv")), table.to_csv().as_bytes())?;
    write_atomic(&dir.join(format!("{name}.txt")), table.to_text().as_bytes())?;
    Ok(())
}

/// Renders the comparison tables of a run; returns their text form.
pub fn report(run: &RunDir, baseline: &str) -> Result<String> {
    let reports = collect_reports(run)?;
    if reports.is_empty() {
        bail!("no evaluation reports under {}; run eval first", run.reports().display());
    }
    let mut text = String::new();
    let delay = delay_table(&reports, baseline);
    write_table(&run.tables(), "delay", &delay)?;
    text.push_str(&delay.to_text());
    let size = size_table(&reports);
    if !size.is_empty() {
        write_table(&run.tables(), "size", &size)?;
        text.push('\n');
        text.push_str(&size.to_text());
    }
    Ok(text)
}

fn run_stage(stage: Stage, cfg: &TrainConfig, run: &RunDir, methods: &[Method]) -> Result<()> {
    match stage {
        Stage::GenData => gen_data(cfg, run).map(drop),
        Stage::TrainTeacher => train_teachers(cfg, run).map(drop),
        Stage::Distill => distill_students(cfg, run).map(drop),
        Stage::Finetune => finetune(cfg, run).map(drop),
        Stage::Eval => eval(cfg, run, methods).map(drop),
    }
}

fn stage_output(stage: Stage) -> Option<&'static str> {
    match stage {
        Stage::GenData => Some("data"),
        Stage::TrainTeacher => Some("teacher"),
        Stage::Distill => Some("student"),
        Stage::Finetune => Some("finetuned"),
        Stage::Eval => None,
    }
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).with_context(|| format!("creating {}", to.display()))?;
    for entry in fs::read_dir(from).with_context(|| format!("reading {}", from.display()))? {
        let p = entry?.path();
        if p.is_file() {
            fs::copy(&p, to.join(p.file_name().expect("file name")))
                .with_context(|| format!("copying {}", p.display()))?;
        }
    }
    Ok(())
}

/// Re-runs the pipeline from the first stage affected by `key` once per value.
/// Upstream artifacts come from `run` (created there when missing) and are
/// copied into one sub-run per value under `run/sweep/<key>/`.
pub fn sweep(cfg: &TrainConfig, run: &RunDir, key: &str, values: &[String], methods: &[Method]) -> Result<String> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let from = Stage::affected_by(key);
    let methods: Vec<Method> = if methods.is_empty() {
        vec![Method::Student]
    } else {
        methods.to_vec()
    };
    for &stage in Stage::ALL.iter().filter(|&&s| s < from) {
        let dir = stage_output(stage).expect("upstream stages write artifacts");
        if run.root.join(dir).is_dir() {
            log::info!("reusing {}", run.root.join(dir).display());
        } else {
            run_stage(stage, cfg, run, &methods)?;
        }
    }
    let base = run.root.join("sweep").join(key);
    let mut rows = Vec::new();
    for v in values {
        let sub = RunDir::new(base.join(v));
        let vcfg = cfg.with_overrides(&[format!("{key}={v}")])?;
        for &stage in Stage::ALL.iter().filter(|&&s| s < from) {
            let dir = stage_output(stage).expect("upstream stages write artifacts");
            copy_dir(&run.root.join(dir), &sub.root.join(dir))?;
        }
        for &stage in Stage::ALL.iter().filter(|&&s| s >= from) {
            run_stage(stage, &vcfg, &sub, &methods)?;
        }
        let agreement = (0..)
            .map(|i| sub.checkpoint("student", i))
            .take_while(|p| p.exists())
            .map(|p| Ok(Checkpoint::load(&p)?.meta.get("agreement").and_then(Value::as_f64)))
            .collect::<Result<Vec<_>>>()?;
        let agreement: Vec<f64> = agreement.into_iter().flatten().collect();
        for r in collect_reports(&sub)? {
            if !methods.iter().any(|m| m.name() == r.method) {
                continue;
            }
            rows.push(vec![
                v.clone(),
                r.method.clone(),
                r.scenario.clone(),
                r.delay_cell(),
                format!("{:.2}", r.median_delay()),
                if agreement.is_empty() {
                    String::new()
                } else {
                    format!("{:.3}", agreement.iter().sum::<f64>() / agreement.len() as f64)
                },
            ]);
        }
    }
    let table = Table {
        header: vec![
            key.to_string(),
            "method".into(),
            "scenario".into(),
            "delay (s)".into(),
            "median delay (s)".into(),
            "agreement".into(),
        ],
        rows,
    };
    write_table(&base, "summary", &table)?;
    Ok(table.to_text())
}
