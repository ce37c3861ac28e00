//! Training losses over a batch of reconstruction errors, and the
//! error-to-class decision rule. Ties always resolve to the lowest index.

use crate::error::{Error, Result};

/// `N × K` reconstruction errors, optionally with a class per row.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchErrors {
    pub errors: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl BatchErrors {
    pub fn new(errors: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let k = errors.first().map_or(0, Vec::len);
        if errors.iter().any(|r| r.len() != k || r.iter().any(|e| !e.is_finite() || *e < 0.0)) {
            return Err(Error::Contract("error rows must be equal-length, finite, and ≥ 0".into()));
        }
        if let Some(l) = &labels {
            if l.len() != errors.len() {
                return Err(Error::Contract("one label per error row required".into()));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= k) {
                return Err(Error::Data(format!("label {bad} outside 0..{k}")));
            }
        }
        Ok(Self { errors, labels })
    }
}

/// Index of the smallest entry; first one on ties.
pub fn classify(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &e) in row.iter().enumerate().skip(1) {
        if e < row[best] {
            best = k;
        }
    }
    best
}

/// Sum over rows of the smallest error, with the winning prototype per row.
pub fn clustering_loss(e: &BatchErrors) -> (f64, Vec<usize>) {
    let assignments: Vec<usize> = e.errors.iter().map(|r| classify(r)).collect();
    let loss = e.errors.iter().zip(&assignments).map(|(r, &k)| r[k]).sum();
    (loss, assignments)
}

/// Softmax over `−β·e`.
pub fn class_probabilities(row: &[f64], beta: f64) -> Vec<f64> {
    let logits: Vec<f64> = row.iter().map(|e| -beta * e).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Cross-entropy of class `y` under `softmax(−β·e)`.
pub fn prediction_loss(row: &[f64], y: usize, beta: f64) -> f64 {
    let logits: Vec<f64> = row.iter().map(|e| -beta * e).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// Gradient of `prediction_loss` with respect to the errors and to β.
pub fn prediction_loss_grad(row: &[f64], y: usize, beta: f64) -> (Vec<f64>, f64) {
    let p = class_probabilities(row, beta);
    let d_errors = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| beta * ((k == y) as u8 as f64 - pk))
        .collect();
    let expected: f64 = p.iter().zip(row).map(|(pk, e)| pk * e).sum();
    (d_errors, row[y] - expected)
}

/// `Σ_n e[n][y_n] + λ·CE(n)`.
pub fn supervised_loss(e: &BatchErrors, beta: f64, lambda_ce: f64) -> Result<f64> {
    let labels = e
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("supervised loss needs labels".into()))?;
    Ok(e.errors
        .iter()
        .zip(labels)
        .map(|(r, &y)| {
            let ce = if lambda_ce == 0.0 { 0.0 } else { prediction_loss(r, y, beta) };
            r[y] + lambda_ce * ce
        })
        .sum())
}
