//! Evaluation reports and the comparison tables built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dtlight::EpisodeOutcome;
use crate::error::{Error, Result};
use crate::provenance::Provenance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub scenario: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub delays: Vec<f64>,
    pub returns: Vec<f64>,
    pub mean_delay: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std_delay: Option<f64>,
    pub mean_return: f64,
    pub std_return: Option<f64>,
    pub params_total: Option<usize>,
    pub params_trainable: Option<usize>,
    /// Wall-clock seconds per pipeline phase.
    #[serde(default)]
    pub timing_s: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Mean and sample (n - 1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Relative delay reduction of `method` against `behavior`, in percent.
pub fn improvement_pct(behavior: f64, method: f64) -> f64 {
    100.0 * (behavior - method) / behavior
}

impl EvalReport {
    pub fn from_outcomes(scenario: &str, method: &str, outcomes: &[EpisodeOutcome]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::InvalidParameter("report needs at least one episode".into()));
        }
        let delays: Vec<f64> = outcomes.iter().map(|o| o.average_delay).collect();
        let returns: Vec<f64> = outcomes.iter().map(|o| o.episode_return).collect();
        let (mean_delay, std_delay) = mean_std(&delays);
        let (mean_return, std_return) = mean_std(&returns);
        Ok(Self {
            scenario: scenario.to_string(),
            method: method.to_string(),
            seeds: outcomes.iter().map(|o| o.seed).collect(),
            delays,
            returns,
            mean_delay,
            std_delay,
            mean_return,
            std_return,
            params_total: None,
            params_trainable: None,
            timing_s: BTreeMap::new(),
            provenance: None,
        })
    }

    pub fn median_delay(&self) -> f64 {
        median(&self.delays)
    }

    pub fn delay_cell(&self) -> String {
        match self.std_delay {
            Some(s) => format!("{:.2}±{:.2}", self.mean_delay, s),
            None => format!("{:.2}", self.mean_delay),
        }
    }
}

/// A rendered table in both CSV and aligned-text form.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = row.iter().map(|c| csv_escape(c)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let cols = self.header.len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| {
                std::iter::once(&self.header)
                    .chain(&self.rows)
                    .map(|r| r[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        };
        line(&mut out, &self.header);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        let _ = writeln!(out, "{}", rule.join("  "));
        for r in &self.rows {
            line(&mut out, r);
        }
        out
    }
}

fn csv_escape(cell: &str) -> String {
    if cell.contains([',', '"', '\n']) {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

/// Rows are methods and columns scenarios; an improvement column follows each
/// scenario that has a `baseline` row.
pub fn delay_table(reports: &[EvalReport], baseline: &str) -> Table {
    let scenarios: BTreeSet<&str> = reports.iter().map(|r| r.scenario.as_str()).collect();
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let find = |m: &str, s: &str| reports.iter().find(|r| r.method == m && r.scenario == s);
    let mut header = vec!["method".to_string()];
    for s in &scenarios {
        header.push(format!("{s} delay (s)"));
        if find(baseline, s).is_some() {
            header.push(format!("{s} improvement %"));
        }
    }
    let rows = methods
        .iter()
        .map(|&m| {
            let mut row = vec![m.to_string()];
            for s in &scenarios {
                let cell = find(m, s);
                row.push(cell.map(EvalReport::delay_cell).unwrap_or_default());
                if let Some(b) = find(baseline, s) {
                    row.push(
                        cell.map(|r| format!("{:.1}", improvement_pct(b.mean_delay, r.mean_delay)))
                            .unwrap_or_default(),
                    );
                }
            }
            row
        })
        .collect();
    Table { header, rows }
}

/// Parameter counts and phase timings, one row per (method, scenario).
pub fn size_table(reports: &[EvalReport]) -> Table {
    let with_size: Vec<&EvalReport> = reports.iter().filter(|r| r.params_total.is_some()).collect();
    let phases: BTreeSet<&str> = with_size
        .iter()
        .flat_map(|r| r.timing_s.keys().map(String::as_str))
        .collect();
    let mut header: Vec<String> = ["method", "scenario", "params", "trainable", "trainable %"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(phases.iter().map(|p| format!("{p} time (s)")));
    let fmt_count = |n: usize| format!("{:.4}M", n as f64 / 1e6);
    let rows = with_size
        .iter()
        .map(|r| {
            let total = r.params_total.unwrap_or(0);
            let trainable = r.params_trainable.unwrap_or(total);
            let mut row = vec![
                r.method.clone(),
                r.scenario.clone(),
                fmt_count(total),
                fmt_count(trainable),
                format!("{:.2}", 100.0 * trainable as f64 / total.max(1) as f64),
            ];
            row.extend(
                phases
                    .iter()
                    .map(|p| r.timing_s.get(*p).map(|t| format!("{t:.1}")).unwrap_or_default()),
            );
            row
        })
        .collect();
    Table { header, rows }
}
