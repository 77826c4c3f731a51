use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Real;

/// Samples per forward call during evaluation.
const EVAL_CHUNK: usize = 64;

/// Classification metrics over one labeled split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes with no samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    /// Mean cross-entropy.
    pub loss: f64,
    pub predictions: Vec<usize>,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn cross_entropy_row(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[label]
}

/// Metrics from `[m, C]` logits and true labels.
pub fn metrics_from_logits(logits: ArrayView2<f64>, labels: &[usize]) -> Result<Evaluation> {
    let (m, c) = logits.dim();
    if m != labels.len() || m == 0 {
        return Err(Error::shape(format!(
            "{m} logit rows for {} labels",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Data(format!(
            "label {y} out of range for {c} classes"
        )));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    let mut predictions = Vec::with_capacity(m);
    let mut loss = 0.0;
    for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
        let row = row.to_vec();
        let pred = argmax(&row);
        confusion[y][pred] += 1;
        predictions.push(pred);
        loss += cross_entropy_row(&row, y);
    }
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let n: usize = r.iter().sum();
            (n > 0).then(|| r[i] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / m as f64,
        per_class_accuracy,
        confusion,
        loss: loss / m as f64,
        predictions,
    })
}

/// Logits for every sample of an already normalized dataset.
pub fn predict<T: Real>(model: &Model<T>, ds: &Dataset) -> Result<Array2<f64>> {
    let c = model.config.num_classes;
    let mut out = Array2::zeros((ds.len(), c));
    let mut start = 0;
    while start < ds.len() {
        let end = (start + EVAL_CHUNK).min(ds.len());
        let chunk = ds.values.slice(ndarray::s![start..end, .., ..]);
        let logits = model.predict_logits(chunk)?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&logits);
        start = end;
    }
    Ok(out)
}

/// Accuracy, per-class accuracy, confusion matrix and loss of `model` on an
/// already normalized, labeled dataset.
pub fn evaluate<T: Real>(model: &Model<T>, ds: &Dataset) -> Result<Evaluation> {
    ds.require_labels()?;
    let cfg = &model.config;
    if ds.dims() != cfg.input_dims || ds.series_length() != cfg.series_length {
        return Err(Error::config(format!(
            "model expects {} variables of length {}, dataset has {} of length {}",
            cfg.input_dims,
            cfg.series_length,
            ds.dims(),
            ds.series_length()
        )));
    }
    if ds.num_classes() != cfg.num_classes {
        return Err(Error::config(format!(
            "model has {} classes, dataset declares {}",
            cfg.num_classes,
            ds.num_classes()
        )));
    }
    let logits = predict(model, ds)?;
    metrics_from_logits(logits.view(), &ds.labels)
}
