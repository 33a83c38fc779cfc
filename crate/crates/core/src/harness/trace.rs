use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::WeightTrace;
use crate::error::{Error, Result};
use crate::synthdata::NoiseMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub entries: usize,
    pub theta_mean: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub theta_var: f64,
    pub gated_fraction: f64,
}

/// Per-epoch statistics of a weight trace. Every epoch visits each training
/// sample once, so an epoch spans as many entries as there are distinct ids.
pub fn summarize_trace(trace: &[WeightTrace]) -> Result<Vec<EpochSummary>> {
    if trace.is_empty() {
        return Err(Error::Empty("weight trace"));
    }
    let per_epoch = trace.iter().map(|t| t.sample_id.as_str()).collect::<HashSet<_>>().len();
    Ok(trace
        .chunks(per_epoch)
        .enumerate()
        .map(|(epoch, rows)| {
            let n = rows.len() as f64;
            let mean = rows.iter().map(|t| t.theta).sum::<f64>() / n;
            EpochSummary {
                epoch,
                entries: rows.len(),
                theta_mean: mean,
                theta_min: rows.iter().map(|t| t.theta).fold(f64::INFINITY, f64::min),
                theta_max: rows.iter().map(|t| t.theta).fold(f64::NEG_INFINITY, f64::max),
                theta_var: rows.iter().map(|t| (t.theta - mean).powi(2)).sum::<f64>() / n,
                gated_fraction: rows.iter().filter(|t| t.gated).count() as f64 / n,
            }
        })
        .collect())
}

#[derive(Debug, Serialize)]
struct ScatterRow<'a> {
    iteration: usize,
    sample_id: &'a str,
    teacher_acc: f64,
    student_acc: f64,
    theta: f64,
    gated: bool,
}

/// Writes `trace_summary.csv` (per-epoch statistics) and `trace_scatter.csv`
/// (teacher accuracy `alpha` against student accuracy `1 − beta`).
pub fn emit_trace_summary(trace: &[WeightTrace], dir: &Path) -> Result<Vec<EpochSummary>> {
    let summary = summarize_trace(trace)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("trace_summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("trace_scatter.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for t in trace {
        w.serialize(ScatterRow {
            iteration: t.iteration,
            sample_id: &t.sample_id,
            teacher_acc: t.alpha_t,
            student_acc: 1.0 - t.beta_s,
            theta: t.theta,
            gated: t.gated,
        })?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Share of gated entries whose sample carries a corrupted depth map, or
/// `None` if nothing was gated.
pub fn gated_noisy_fraction(trace: &[WeightTrace], modes: &HashMap<String, NoiseMode>) -> Option<f64> {
    let gated: Vec<&WeightTrace> = trace.iter().filter(|t| t.gated).collect();
    if gated.is_empty() {
        return None;
    }
    let noisy = gated
        .iter()
        .filter(|t| modes.get(&t.sample_id).is_some_and(|m| !m.is_clean()))
        .count();
    Some(noisy as f64 / gated.len() as f64)
}
