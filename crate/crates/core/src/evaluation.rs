//! Accuracy metrics, cluster-to-class mapping, and the cross-reconstruction
//! matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::frontend::LogMelSpectrogram;
use crate::model::ProtoModel;
use crate::objectives::classify;
use crate::transforms::EnabledMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Supervised,
    Clustering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub oa: f64,
    pub aa: f64,
    pub mean_l_rec: f64,
    pub samples: usize,
    pub classes: Vec<String>,
    /// `None` for classes with no samples; AA averages the others.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    /// Per true class, samples whose cluster had no class. Together with the
    /// confusion row this sums to the class's sample count.
    pub unmapped: Vec<usize>,
    pub cluster_to_class: Option<Vec<Option<usize>>>,
}

impl EvalReport {
    /// Metrics from per-sample predictions; `None` predictions are errors.
    pub fn from_predictions(labels: &[usize], predictions: &[Option<usize>], classes: Vec<String>, mean_l_rec: f64) -> Result<Self> {
        let n = classes.len();
        if labels.len() != predictions.len() {
            return Err(Error::Contract("one prediction per label required".into()));
        }
        if labels.iter().chain(predictions.iter().flatten()).any(|&c| c >= n) {
            return Err(Error::Data(format!("class index outside 0..{n}")));
        }
        let mut confusion = vec![vec![0usize; n]; n];
        let mut unmapped = vec![0usize; n];
        for (&y, p) in labels.iter().zip(predictions) {
            match p {
                Some(p) => confusion[y][*p] += 1,
                None => unmapped[y] += 1,
            }
        }
        let correct: usize = (0..n).map(|c| confusion[c][c]).sum();
        let oa = if labels.is_empty() {
            0.0
        } else {
            100.0 * correct as f64 / labels.len() as f64
        };
        let per_class_accuracy: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let total = confusion[c].iter().sum::<usize>() + unmapped[c];
                (total > 0).then(|| 100.0 * confusion[c][c] as f64 / total as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
        let aa = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Ok(Self {
            oa,
            aa,
            mean_l_rec,
            samples: labels.len(),
            classes,
            per_class_accuracy,
            confusion,
            unmapped,
            cluster_to_class: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Confusion matrix with a header row of predicted class names.
    pub fn confusion_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.classes.iter().cloned());
        header.push("unmapped".into());
        w.write_record(&header).expect("in-memory write");
        for (c, row) in self.confusion.iter().enumerate() {
            let mut rec = vec![self.classes[c].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(self.unmapped[c].to_string());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 csv")
    }
}

/// Modal class per cluster over training assignments; ties go to the lowest
/// class index, clusters without members map to `None`.
pub fn majority_map(assignments: &[usize], labels: &[usize], clusters: usize, classes: usize) -> Vec<Option<usize>> {
    let mut hist = vec![vec![0usize; classes]; clusters];
    for (&k, &y) in assignments.iter().zip(labels) {
        hist[k][y] += 1;
    }
    hist.iter()
        .map(|h| {
            let mut best: Option<usize> = None;
            for (c, &n) in h.iter().enumerate() {
                if n > 0 && best.is_none_or(|b| n > h[b]) {
                    best = Some(c);
                }
            }
            best
        })
        .collect()
}

/// Full-length reconstruction errors of every sample against every
/// prototype, with all transformations enabled (heads that were never
/// trained are still zero and so act as the identity).
pub fn error_rows(data: &Dataset, model: &ProtoModel, workers: usize) -> Result<Vec<Vec<f64>>> {
    let run = || {
        data.examples
            .par_iter()
            .map(|e| model.forward_full_length(&e.spec, EnabledMask::ALL).map(|(err, _, _)| err))
            .collect::<Result<Vec<_>>>()
    };
    with_workers(workers, run)
}

pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Scores `data`. In clustering mode `mapping` (from `majority_map` on the
/// training split) translates clusters to classes.
pub fn evaluate(data: &Dataset, model: &ProtoModel, mode: EvalMode, mapping: Option<&[Option<usize>]>, workers: usize) -> Result<EvalReport> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Data("evaluation needs a label on every sample".into()))?;
    let rows = error_rows(data, model, workers)?;
    report_from_rows(&rows, &labels, data.classes.clone(), mode, mapping)
}

pub fn report_from_rows(rows: &[Vec<f64>], labels: &[usize], classes: Vec<String>, mode: EvalMode, mapping: Option<&[Option<usize>]>) -> Result<EvalReport> {
    let winners: Vec<usize> = rows.iter().map(|r| classify(r)).collect();
    let predictions: Vec<Option<usize>> = match mode {
        EvalMode::Supervised => winners.iter().map(|&k| Some(k)).collect(),
        EvalMode::Clustering => {
            let map = mapping.ok_or_else(|| Error::Contract("clustering evaluation needs a cluster-to-class map".into()))?;
            winners.iter().map(|&k| map.get(k).copied().flatten()).collect()
        }
    };
    let mean = if rows.is_empty() {
        0.0
    } else {
        rows.iter().zip(&winners).map(|(r, &k)| r[k]).sum::<f64>() / rows.len() as f64
    };
    let mut report = EvalReport::from_predictions(labels, &predictions, classes, mean)?;
    if mode == EvalMode::Clustering {
        report.cluster_to_class = mapping.map(<[_]>::to_vec);
    }
    Ok(report)
}

/// Errors and reconstructions of each sample by each listed prototype.
#[derive(Debug, Clone)]
pub struct CrossReconstruction {
    pub errors: Vec<Vec<f64>>,
    pub reconstructions: Vec<Vec<LogMelSpectrogram>>,
    /// Column of the smallest error in each row.
    pub best: Vec<usize>,
}

impl CrossReconstruction {
    pub fn errors_csv(&self, prototypes: &[usize]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["sample".to_string()];
        header.extend(prototypes.iter().map(|k| format!("prototype_{k}")));
        w.write_record(&header).expect("in-memory write");
        for (i, row) in self.errors.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|e| format!("{e}")));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 csv")
    }
}

pub fn cross_reconstruction_matrix(samples: &[LogMelSpectrogram], prototypes: &[usize], model: &ProtoModel) -> Result<CrossReconstruction> {
    if let Some(&k) = prototypes.iter().find(|&&k| k >= model.k()) {
        return Err(Error::Contract(format!("prototype {k} outside 0..{}", model.k())));
    }
    let mut errors = Vec::with_capacity(samples.len());
    let mut reconstructions = Vec::with_capacity(samples.len());
    for x in samples {
        let (err, recs, _) = model.forward_full_length(x, EnabledMask::ALL)?;
        errors.push(prototypes.iter().map(|&k| err[k]).collect::<Vec<_>>());
        reconstructions.push(
            prototypes
                .iter()
                .map(|&k| {
                    let clamped = recs[k].to_row_major();
                    LogMelSpectrogram::clamped(clamped, x.bins(), x.frames(), x.floor_db())
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let best = errors.iter().map(|r| classify(r)).collect();
    Ok(CrossReconstruction {
        errors,
        reconstructions,
        best,
    })
}
