//! Classification metrics, aggregation over tasks and seeds, and the
//! evaluation protocols.

mod protocol;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use protocol::{
    inductive_split, run_protocol, run_protocol_with, Method, ProtocolConfig, ProtocolData, TunedState, DEFAULT_SEEDS,
};

use crate::corpus::{ClassId, SplitMode};
use crate::error::{Error, Result};

/// z-value of a two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

fn check_lengths(preds: &[ClassId], golds: &[ClassId]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Parameter(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Parameter("no predictions to score".into()));
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[ClassId], golds: &[ClassId]) -> Result<f64> {
    check_lengths(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over `class_ids`; a class with no
/// predictions and no gold instances scores 0.
pub fn macro_f1(preds: &[ClassId], golds: &[ClassId], class_ids: &[ClassId]) -> Result<f64> {
    check_lengths(preds, golds)?;
    if class_ids.is_empty() {
        return Err(Error::Parameter("macro-F1 needs at least one class".into()));
    }
    let total: f64 = class_ids
        .iter()
        .map(|&c| {
            let tp = preds.iter().zip(golds).filter(|&(&p, &g)| p == c && g == c).count() as f64;
            let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
            let actual = golds.iter().filter(|&&g| g == c).count() as f64;
            // 2PR/(P+R) = 2TP / (predicted + actual)
            if predicted + actual == 0.0 {
                0.0
            } else {
                2.0 * tp / (predicted + actual)
            }
        })
        .sum();
    Ok(total / class_ids.len() as f64)
}

/// `2ab / (a + b)`, or 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Mean with a normal-approximation 95% half-width (sample standard
/// deviation); the interval is absent for a single value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("cannot summarise an empty list".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci95 = (n >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            Z_95 * var.sqrt() / (n as f64).sqrt()
        });
        Ok(Self { mean, ci95, n })
    }
}

/// Metrics of one task (or, for the class-split protocols, one split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub seed: u64,
    pub task: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unseen_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub harmonic_mean: Option<f64>,
}

/// Base, unseen and harmonic-mean accuracy, each averaged over splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationSummary {
    pub base: Summary,
    pub unseen: Summary,
    pub harmonic_mean: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: SplitMode,
    pub method: String,
    pub per_task: Vec<TaskMetrics>,
    /// Over task-level values.
    pub accuracy: Summary,
    pub macro_f1: Summary,
    /// Over per-seed means.
    pub accuracy_by_seed: Summary,
    pub macro_f1_by_seed: Summary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generalization: Option<GeneralizationSummary>,
}

fn by_seed(per_task: &[TaskMetrics], f: impl Fn(&TaskMetrics) -> f64) -> Result<Summary> {
    let mut seeds: Vec<u64> = per_task.iter().map(|t| t.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let means: Vec<f64> = seeds
        .iter()
        .map(|&s| {
            let vals: Vec<f64> = per_task.iter().filter(|t| t.seed == s).map(&f).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    Summary::of(&means)
}

/// Means and intervals over tasks and over seeds; when every task carries
/// base/unseen accuracies, their per-split harmonic means are averaged too.
pub fn aggregate_tasks(protocol: SplitMode, method: &str, per_task: Vec<TaskMetrics>) -> Result<EvalReport> {
    if per_task.is_empty() {
        return Err(Error::Parameter("no task results to aggregate".into()));
    }
    let col = |f: fn(&TaskMetrics) -> f64| per_task.iter().map(f).collect::<Vec<_>>();
    let accuracy = Summary::of(&col(|t| t.accuracy))?;
    let macro_f1 = Summary::of(&col(|t| t.macro_f1))?;
    let accuracy_by_seed = by_seed(&per_task, |t| t.accuracy)?;
    let macro_f1_by_seed = by_seed(&per_task, |t| t.macro_f1)?;
    let generalization = if per_task.iter().all(|t| t.base_accuracy.is_some() && t.unseen_accuracy.is_some()) {
        let base: Vec<f64> = per_task.iter().filter_map(|t| t.base_accuracy).collect();
        let unseen: Vec<f64> = per_task.iter().filter_map(|t| t.unseen_accuracy).collect();
        let hm: Vec<f64> = base.iter().zip(&unseen).map(|(&b, &u)| harmonic_mean(b, u)).collect();
        Some(GeneralizationSummary {
            base: Summary::of(&base)?,
            unseen: Summary::of(&unseen)?,
            harmonic_mean: Summary::of(&hm)?,
        })
    } else {
        None
    };
    Ok(EvalReport {
        protocol,
        method: method.to_string(),
        per_task,
        accuracy,
        macro_f1,
        accuracy_by_seed,
        macro_f1_by_seed,
        generalization,
    })
}

fn pct(s: &Summary) -> String {
    match s.ci95 {
        Some(ci) => format!("{:6.2} ± {:5.2}", 100.0 * s.mean, 100.0 * ci),
        None => format!("{:6.2}", 100.0 * s.mean),
    }
}

impl EvalReport {
    /// Human-readable table, percentages with 95% half-widths.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "protocol: {}   method: {}", self.protocol.as_str(), self.method);
        let _ = writeln!(out, "{:>6} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9}", "seed", "task", "acc", "macro-f1", "base", "unseen", "hm");
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        for t in &self.per_task {
            let _ = writeln!(
                out,
                "{:>6} {:>5} {:>9.2} {:>9.2} {:>9} {:>9} {:>9}",
                t.seed,
                t.task,
                100.0 * t.accuracy,
                100.0 * t.macro_f1,
                opt(t.base_accuracy),
                opt(t.unseen_accuracy),
                opt(t.harmonic_mean)
            );
        }
        let _ = writeln!(out, "accuracy  (tasks): {}", pct(&self.accuracy));
        let _ = writeln!(out, "macro-f1  (tasks): {}", pct(&self.macro_f1));
        let _ = writeln!(out, "accuracy  (seeds): {}", pct(&self.accuracy_by_seed));
        let _ = writeln!(out, "macro-f1  (seeds): {}", pct(&self.macro_f1_by_seed));
        if let Some(g) = &self.generalization {
            let _ = writeln!(out, "base:   {}", pct(&g.base));
            let _ = writeln!(out, "unseen: {}", pct(&g.unseen));
            let _ = writeln!(out, "hm:     {}", pct(&g.harmonic_mean));
        }
        out
    }
}
