//! CSV reports of active-learning runs. Floats are written in shortest
//! round-trip form so that files re-parse to identical values.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{ALState, Method};
use crate::acquisition::{AggregationMode, PoolScores, TYPE_NAMES};
use crate::error::Result;
use crate::train::StepRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub method: String,
    pub cycle: usize,
    pub labeled_count: usize,
    #[serde(rename = "mAP50")]
    pub map50: f64,
    #[serde(rename = "mAP75")]
    pub map75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub seed: u64,
    pub method: String,
    pub cycle: usize,
    pub rank: usize,
    pub image_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub seed: u64,
    pub method: String,
    pub cycle: usize,
    pub wall_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub cycle: usize,
    pub labeled_count: usize,
    pub n_seeds: usize,
    pub map50_mean: f64,
    pub map50_std: f64,
    pub map75_mean: f64,
    pub map75_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub seed: u64,
    pub image_id: usize,
    pub al_b: Option<f64>,
    pub ep_b: Option<f64>,
    pub al_c: Option<f64>,
    pub ep_c: Option<f64>,
    pub aggregate: Option<f64>,
    pub selected: bool,
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn metric_rows(states: &[ALState]) -> Vec<MetricRow> {
    states
        .iter()
        .flat_map(|s| {
            s.records.iter().map(move |r| MetricRow {
                seed: s.seed,
                method: s.method.to_string(),
                cycle: r.cycle,
                labeled_count: r.labeled_count,
                map50: r.map50,
                map75: r.map75,
            })
        })
        .collect()
}

pub fn selection_rows(states: &[ALState]) -> Vec<SelectionRow> {
    states
        .iter()
        .flat_map(|s| {
            s.records.iter().flat_map(move |r| {
                r.selection.iter().enumerate().map(move |(rank, &id)| SelectionRow {
                    seed: s.seed,
                    method: s.method.to_string(),
                    cycle: r.cycle,
                    rank,
                    image_id: id,
                })
            })
        })
        .collect()
}

pub fn timing_rows(states: &[ALState]) -> Vec<TimingRow> {
    states
        .iter()
        .flat_map(|s| {
            s.records.iter().map(move |r| TimingRow {
                seed: s.seed,
                method: s.method.to_string(),
                cycle: r.cycle,
                wall_sec: r.wall_sec,
            })
        })
        .collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-method, per-cycle mean and std over seeds. Methods keep their order
/// of first appearance.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut out = Vec::new();
    for m in methods {
        let mut cycles: Vec<usize> = rows.iter().filter(|r| r.method == m).map(|r| r.cycle).collect();
        cycles.sort_unstable();
        cycles.dedup();
        for c in cycles {
            let group: Vec<&MetricRow> = rows.iter().filter(|r| r.method == m && r.cycle == c).collect();
            let m50: Vec<f64> = group.iter().map(|r| r.map50).collect();
            let m75: Vec<f64> = group.iter().map(|r| r.map75).collect();
            let (map50_mean, map50_std) = mean_std(&m50);
            let (map75_mean, map75_std) = mean_std(&m75);
            out.push(SummaryRow {
                method: m.to_string(),
                cycle: c,
                labeled_count: group[0].labeled_count,
                n_seeds: group.len(),
                map50_mean,
                map50_std,
                map75_mean,
                map75_std,
            });
        }
    }
    out
}

pub fn score_rows(seed: u64, scores: &PoolScores, mode: AggregationMode, selected: &[usize]) -> Vec<ScoreRow> {
    scores
        .images
        .iter()
        .map(|im| {
            let t = im.per_type;
            ScoreRow {
                seed,
                image_id: im.id,
                al_b: t.map(|v| v[0]),
                ep_b: t.map(|v| v[1]),
                al_c: t.map(|v| v[2]),
                ep_c: t.map(|v| v[3]),
                aggregate: t.map(|v| crate::acquisition::aggregate(&v, mode)),
                selected: selected.contains(&im.id),
            }
        })
        .collect()
}

pub fn write_overlap(path: &Path, matrix: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    let mut header = vec!["type"];
    header.extend(TYPE_NAMES);
    w.write_record(&header)?;
    for (name, row) in TYPE_NAMES.iter().zip(matrix) {
        let mut rec = vec![name.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_overlap(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>().map_err(|e| crate::MdalError::Format {
                    path: path.display().to_string(),
                    detail: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

/// Loss-curve file name for one seed, method and cycle.
pub fn loss_curve_name(seed: u64, method: Method, cycle: usize) -> String {
    format!("loss_{method}_seed{seed}_cycle{cycle}.csv")
}

pub fn write_loss_curve(path: &Path, curve: &[StepRecord]) -> Result<()> {
    crate::train::write_loss_curve(path, curve)
}
