//! Accuracy, worst-group accuracy, corruption error, and multi-seed summaries.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagio::Bag;
use crate::error::{Error, Result};
use crate::milmodel::{forward, ModelParams};
use crate::numeric::argmax;

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub label: usize,
    pub predicted: usize,
    pub group_id: Option<u32>,
}

impl Prediction {
    /// Argmax over logits, lowest class index on ties.
    pub fn from_logits(logits: &[f64], label: usize, group_id: Option<u32>) -> Self {
        Self {
            label,
            predicted: argmax(logits),
            group_id,
        }
    }

    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

/// Forward every bag; results are in bag order.
pub fn predict(params: &ModelParams, bags: &[Bag]) -> Result<Vec<Prediction>> {
    bags.par_iter()
        .map(|bag| {
            let trace = forward(params, bag.embedding_matrix().view())?;
            Ok(Prediction {
                label: bag.label,
                predicted: trace.predicted(),
                group_id: bag.group_id,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub n: usize,
    pub avg_acc: f64,
    pub per_group_acc: BTreeMap<u32, f64>,
    pub n_per_group: BTreeMap<u32, usize>,
    /// `None` when the split carries no group ids.
    pub worst_group_acc: Option<f64>,
}

pub fn evaluate_predictions(preds: &[Prediction]) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Protocol("cannot evaluate an empty split".into()));
    }
    let grouped = preds.iter().filter(|p| p.group_id.is_some()).count();
    if grouped != 0 && grouped != preds.len() {
        return Err(Error::schema(
            "split",
            "group_id",
            format!("mixed group coverage: {grouped} of {} bags carry a group id", preds.len()),
        ));
    }
    let correct = preds.iter().filter(|p| p.correct()).count();
    let mut hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for p in preds {
        if let Some(g) = p.group_id {
            let e = hits.entry(g).or_default();
            e.0 += p.correct() as usize;
            e.1 += 1;
        }
    }
    let per_group_acc: BTreeMap<u32, f64> =
        hits.iter().map(|(&g, &(c, n))| (g, c as f64 / n as f64)).collect();
    let worst_group_acc = per_group_acc.values().copied().reduce(f64::min);
    Ok(EvalReport {
        n: preds.len(),
        avg_acc: correct as f64 / preds.len() as f64,
        n_per_group: hits.iter().map(|(&g, &(_, n))| (g, n)).collect(),
        per_group_acc,
        worst_group_acc,
    })
}

pub fn evaluate(params: &ModelParams, bags: &[Bag]) -> Result<EvalReport> {
    evaluate_predictions(&predict(params, bags)?)
}

impl EvalReport {
    /// One row per group plus an `all` row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "group,n,accuracy")?;
        writeln!(out, "all,{},{}", self.n, self.avg_acc)?;
        for (g, acc) in &self.per_group_acc {
            writeln!(out, "{g},{},{acc}", self.n_per_group[g])?;
        }
        out.flush()
    }
}

// ---------------------------------------------------------------------------
// corruption error

/// Bags for one (corruption, severity) cell.
#[derive(Debug, Clone)]
pub struct SuiteCell {
    pub corruption: String,
    pub severity: u8,
    pub bags: Vec<Bag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSummary {
    pub corruption: String,
    /// Accuracy at severities 1..5.
    pub accuracy: [f64; 5],
    /// Mean error over the five severities.
    pub ce: f64,
    /// Error summed over severities relative to a baseline model's, when
    /// a baseline was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized_ce: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_acc: Option<f64>,
    pub corruptions: Vec<CorruptionSummary>,
    pub mean_ce: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_normalized_ce: Option<f64>,
}

/// Builds the report from per-cell accuracies. Corruptions keep their
/// first-seen order; every corruption needs exactly severities 1..5.
pub fn corruption_report(cells: &[(String, u8, f64)], clean_acc: Option<f64>) -> Result<CorruptionReport> {
    let mut order: Vec<String> = Vec::new();
    let mut table: BTreeMap<&str, [Option<f64>; 5]> = BTreeMap::new();
    for (name, severity, acc) in cells {
        if !SEVERITIES.contains(severity) {
            return Err(Error::Protocol(format!("{name}: severity {severity} outside 1..5")));
        }
        if !(0.0..=1.0).contains(acc) {
            return Err(Error::Protocol(format!("{name}/{severity}: accuracy {acc} outside [0, 1]")));
        }
        let row = table.entry(name).or_insert_with(|| {
            order.push(name.clone());
            [None; 5]
        });
        let slot = &mut row[*severity as usize - 1];
        if slot.is_some() {
            return Err(Error::Protocol(format!("{name}: duplicate severity {severity}")));
        }
        *slot = Some(*acc);
    }
    if order.is_empty() {
        return Err(Error::Protocol("corruption suite is empty".into()));
    }
    let mut corruptions = Vec::with_capacity(order.len());
    for name in order {
        let row = table[name.as_str()];
        let mut accuracy = [0.0; 5];
        for (k, cell) in row.iter().enumerate() {
            accuracy[k] = cell.ok_or_else(|| {
                Error::Protocol(format!("{name}: missing severity {}", k + 1))
            })?;
        }
        let ce = accuracy.iter().map(|a| 1.0 - a).sum::<f64>() / 5.0;
        corruptions.push(CorruptionSummary {
            corruption: name,
            accuracy,
            ce,
            normalized_ce: None,
        });
    }
    let mean_ce = corruptions.iter().map(|c| c.ce).sum::<f64>() / corruptions.len() as f64;
    Ok(CorruptionReport {
        clean_acc,
        corruptions,
        mean_ce,
        mean_normalized_ce: None,
    })
}

pub fn corruption_eval(params: &ModelParams, clean_bags: &[Bag], suite: &[SuiteCell]) -> Result<CorruptionReport> {
    let clean_acc = if clean_bags.is_empty() {
        None
    } else {
        Some(evaluate_predictions(&predict(params, clean_bags)?)?.avg_acc)
    };
    let mut cells = Vec::with_capacity(suite.len());
    for cell in suite {
        let preds = predict(params, &cell.bags)?;
        let acc = evaluate_predictions(&preds)?.avg_acc;
        cells.push((cell.corruption.clone(), cell.severity, acc));
    }
    corruption_report(&cells, clean_acc)
}

impl CorruptionReport {
    /// Adds baseline-normalized errors: for each corruption, the error
    /// summed over severities divided by the baseline's.
    pub fn normalize_against(&mut self, baseline: &CorruptionReport) -> Result<()> {
        let mut total = 0.0;
        for c in &mut self.corruptions {
            let base = baseline
                .corruptions
                .iter()
                .find(|b| b.corruption == c.corruption)
                .ok_or_else(|| Error::Protocol(format!("baseline lacks corruption {}", c.corruption)))?;
            if base.ce == 0.0 {
                return Err(Error::Protocol(format!(
                    "baseline error for {} is zero; ratio undefined",
                    c.corruption
                )));
            }
            let ratio = c.ce / base.ce;
            c.normalized_ce = Some(ratio);
            total += ratio;
        }
        self.mean_normalized_ce = Some(total / self.corruptions.len() as f64);
        Ok(())
    }

    /// One row per (corruption, severity) cell.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "corruption,severity,accuracy,error")?;
        for c in &self.corruptions {
            for (k, acc) in c.accuracy.iter().enumerate() {
                writeln!(out, "{},{},{acc},{}", c.corruption, k + 1, 1.0 - acc)?;
            }
        }
        out.flush()
    }
}

// ---------------------------------------------------------------------------
// multi-seed aggregation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1); absent for a single run.
    pub std: Option<f64>,
    /// 95% normal-approximation half-width, `1.96 std / sqrt(n)`.
    pub ci95: Option<f64>,
}

pub fn aggregate(metric: &str, values: &[f64]) -> Result<Aggregate> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Protocol(format!("no runs to aggregate for {metric}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let (std, ci95) = if n >= 2 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        (Some(std), Some(1.96 * std / (n as f64).sqrt()))
    } else {
        (None, None)
    };
    Ok(Aggregate {
        metric: metric.to_string(),
        n,
        mean,
        std,
        ci95,
    })
}

/// Mean, std and CI over runs for `avg_acc`, `worst_group_acc` and each
/// per-group accuracy. Group fields are aggregated only when every run
/// reports them.
pub fn seed_aggregate(runs: &[EvalReport]) -> Result<Vec<Aggregate>> {
    if runs.is_empty() {
        return Err(Error::Protocol("no runs to aggregate".into()));
    }
    let mut out = vec![aggregate("avg_acc", &runs.iter().map(|r| r.avg_acc).collect::<Vec<_>>())?];
    let worst: Option<Vec<f64>> = runs.iter().map(|r| r.worst_group_acc).collect();
    if let Some(w) = worst {
        out.push(aggregate("worst_group_acc", &w)?);
    }
    for g in runs[0].per_group_acc.keys() {
        let vals: Option<Vec<f64>> = runs.iter().map(|r| r.per_group_acc.get(g).copied()).collect();
        if let Some(v) = vals {
            out.push(aggregate(&format!("group_{g}_acc"), &v)?);
        }
    }
    Ok(out)
}

/// Severity curves: aggregated accuracy per (corruption, severity) plus the
/// mean CE, over runs sharing the same corruption set.
pub fn seed_aggregate_corruption(runs: &[CorruptionReport]) -> Result<Vec<Aggregate>> {
    if runs.is_empty() {
        return Err(Error::Protocol("no runs to aggregate".into()));
    }
    let mut out = Vec::new();
    for c in &runs[0].corruptions {
        for (k, _) in SEVERITIES.iter().enumerate() {
            let vals = runs
                .iter()
                .map(|r| {
                    r.corruptions
                        .iter()
                        .find(|x| x.corruption == c.corruption)
                        .map(|x| x.accuracy[k])
                        .ok_or_else(|| Error::Protocol(format!("run lacks corruption {}", c.corruption)))
                })
                .collect::<Result<Vec<f64>>>()?;
            out.push(aggregate(&format!("{}/{}", c.corruption, k + 1), &vals)?);
        }
        let ce = runs
            .iter()
            .map(|r| {
                r.corruptions
                    .iter()
                    .find(|x| x.corruption == c.corruption)
                    .map(|x| x.ce)
                    .expect("presence checked above")
            })
            .collect::<Vec<_>>();
        out.push(aggregate(&format!("{}/ce", c.corruption), &ce)?);
    }
    out.push(aggregate("mean_ce", &runs.iter().map(|r| r.mean_ce).collect::<Vec<_>>())?);
    Ok(out)
}

pub fn write_aggregate_csv<W: Write>(rows: &[Aggregate], mut out: W) -> std::io::Result<()> {
    writeln!(out, "metric,n,mean,std,ci95")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.metric, r.n, r.mean, opt(r.std), opt(r.ci95))?;
    }
    out.flush()
}
