use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    FrozenProbe,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Single,
    Temporal,
}

/// How per-view distributions of one area become a single prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalRule {
    /// Argmax of the mean distribution.
    #[default]
    Mean,
    /// Argmax of the single most confident view.
    MaxConfidence,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Granularity::Single),
            "temporal" => Ok(Granularity::Temporal),
            other => Err(Error::Config(format!(
                "unknown granularity `{other}` (expected single or temporal)"
            ))),
        }
    }
}

impl std::str::FromStr for TemporalRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(TemporalRule::Mean),
            "max-confidence" => Ok(TemporalRule::MaxConfidence),
            other => Err(Error::Config(format!(
                "unknown temporal rule `{other}` (expected mean or max-confidence)"
            ))),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn check_simplex(probs: &Array2<f64>) -> Result<()> {
    for (i, row) in probs.outer_iter().enumerate() {
        let sum: f64 = row.sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!(
                "row {i} is not a probability distribution (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Per-area predictions from per-view class distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalPredictions {
    /// Area index of each output row, in order of first appearance.
    pub areas: Vec<usize>,
    /// Aggregated distribution per area (the selected view's distribution
    /// under [`TemporalRule::MaxConfidence`]).
    pub probabilities: Array2<f64>,
    pub predictions: Vec<usize>,
}

pub fn classify_temporal(
    probs: &Array2<f64>,
    area_index: &[usize],
    rule: TemporalRule,
) -> Result<TemporalPredictions> {
    if probs.nrows() != area_index.len() {
        return Err(Error::shape(format!(
            "{} probability rows but {} area indices",
            probs.nrows(),
            area_index.len()
        )));
    }
    check_simplex(probs)?;
    let mut order: Vec<usize> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &a) in area_index.iter().enumerate() {
        groups
            .entry(a)
            .or_insert_with(|| {
                order.push(a);
                Vec::new()
            })
            .push(row);
    }
    let mut out = Array2::zeros((order.len(), probs.ncols()));
    for (mut dst, a) in out.outer_iter_mut().zip(&order) {
        let rows = &groups[a];
        match rule {
            TemporalRule::Mean => {
                for &r in rows {
                    dst += &probs.row(r);
                }
                dst /= rows.len() as f64;
            }
            TemporalRule::MaxConfidence => {
                let mut best = rows[0];
                for &r in &rows[1..] {
                    if max_of(probs.row(r)) > max_of(probs.row(best)) {
                        best = r;
                    }
                }
                dst.assign(&probs.row(best));
            }
        }
    }
    let predictions = out.outer_iter().map(argmax).collect();
    Ok(TemporalPredictions {
        areas: order,
        probabilities: out,
        predictions,
    })
}

fn max_of(row: ArrayView1<'_, f64>) -> f64 {
    row.fold(f64::NEG_INFINITY, |m, &v| m.max(v))
}

/// Share of rows whose true label ranks among the `k` most probable classes.
/// Equal probabilities are ranked by class index.
pub fn top_k_accuracy(probs: &Array2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    check_lengths(probs.nrows(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::Validation("no samples to score".into()));
    }
    let mut hits = 0usize;
    for (row, &y) in probs.outer_iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::Validation(format!(
                "label {y} outside 0..{}",
                row.len()
            )));
        }
        let py = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &p)| p > py || (p == py && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Classification scores of one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_samples: usize,
    pub top1: f64,
    /// Present only when there are more than 5 classes.
    pub top5: Option<f64>,
    pub macro_f1: f64,
    /// Recall of every class present in the labels.
    pub per_class_accuracy: BTreeMap<usize, f64>,
}

/// Scores from hard predictions (top-5 unavailable).
pub fn metrics_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<Metrics> {
    check_lengths(predictions.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::Validation("no samples to score".into()));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::Validation(format!(
            "class {bad} outside 0..{n_classes}"
        )));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        support[y] += 1;
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let present: BTreeSet<usize> = predictions.iter().chain(labels).copied().collect();
    let macro_f1 = present
        .iter()
        .map(|&c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        .sum::<f64>()
        / present.len() as f64;
    let per_class_accuracy = (0..n_classes)
        .filter(|&c| support[c] > 0)
        .map(|c| (c, tp[c] as f64 / support[c] as f64))
        .collect();
    Ok(Metrics {
        n_samples: labels.len(),
        top1: tp.iter().sum::<usize>() as f64 / labels.len() as f64,
        top5: None,
        macro_f1,
        per_class_accuracy,
    })
}

/// Scores from class distributions; predictions are row argmaxes.
pub fn metrics(probs: &Array2<f64>, labels: &[usize], n_classes: usize) -> Result<Metrics> {
    if probs.ncols() != n_classes {
        return Err(Error::shape(format!(
            "{} probability columns for {n_classes} classes",
            probs.ncols()
        )));
    }
    let predictions: Vec<usize> = probs.outer_iter().map(argmax).collect();
    let mut m = metrics_from_predictions(&predictions, labels, n_classes)?;
    if n_classes > 5 {
        m.top5 = Some(top_k_accuracy(probs, labels, 5)?);
    }
    Ok(m)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a} predictions but {b} labels")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub granularity: Granularity,
    pub n_classes: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-class table with single-image and temporal-aggregated accuracy.
pub fn per_class_csv(single: &EvalReport, temporal: &EvalReport) -> String {
    let classes: BTreeSet<usize> = single
        .metrics
        .per_class_accuracy
        .keys()
        .chain(temporal.metrics.per_class_accuracy.keys())
        .copied()
        .collect();
    let cell = |m: &Metrics, c: usize| {
        m.per_class_accuracy
            .get(&c)
            .map(|v| v.to_string())
            .unwrap_or_default()
    };
    let mut out = String::from("class,single_accuracy,temporal_accuracy\n");
    for c in classes {
        let _ = writeln!(
            out,
            "{c},{},{}",
            cell(&single.metrics, c),
            cell(&temporal.metrics, c)
        );
    }
    out
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}
