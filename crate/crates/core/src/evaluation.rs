//! MAE with per-bin breakdowns and plain-text diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{age_bin, Corpus, DatasetError, Sample, Split, BIN_WIDTH, MAX_AGE, NUM_BINS};
use crate::error::ErrorKind;
use crate::io::write_atomic;
use crate::loader::sample_rng;
use crate::model::{AgeModel, ModelError, Mode};
use crate::tensor::Tensor;
use crate::transforms::{TransformError, TransformSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("every sample of split {0} failed inference")]
    AllFailed(Split),
    #[error("report has no predictions")]
    EmptyReport,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EvalError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            EvalError::EmptySplit(_) | EvalError::EmptyReport => ErrorKind::Data,
            EvalError::AllFailed(_) => ErrorKind::Numerical,
            EvalError::Dataset(e) => e.kind(),
            EvalError::Transform(_) => ErrorKind::Data,
            EvalError::Model(e) => e.kind(),
            EvalError::Io { .. } => ErrorKind::Io,
        }
    }
}

/// Failure of a predictor on a batch, optionally pinned to one row.
#[derive(Debug, Clone)]
pub struct PredictError {
    pub index: Option<usize>,
    pub message: String,
}

/// Anything that maps a normalized `[n, 3, s, s]` batch to `n` ages.
pub trait AgePredictor {
    fn input_size(&self) -> usize;
    fn predict_batch(&mut self, batch: &Tensor) -> Result<Vec<f64>, PredictError>;
}

impl AgePredictor for AgeModel {
    fn input_size(&self) -> usize {
        self.spec().input_size
    }

    fn predict_batch(&mut self, batch: &Tensor) -> Result<Vec<f64>, PredictError> {
        if self.mode() != Mode::Eval {
            self.set_mode(Mode::Eval);
        }
        self.forward(batch, None).map_err(|e| PredictError {
            index: match e {
                ModelError::NonFinite { index } => Some(index),
                _ => None,
            },
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub pred: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub n: usize,
    pub mae: f64,
    pub per_bin_mae: BTreeMap<u32, BinStat>,
    pub predictions: Vec<PredictionRow>,
    pub failures: Vec<(String, String)>,
}

impl EvalReport {
    /// Builds the summary from rows in canonical (id) order.
    pub fn from_predictions(split: Split, mut predictions: Vec<PredictionRow>, failures: Vec<(String, String)>) -> Self {
        predictions.sort_by(|a, b| a.id.cmp(&b.id));
        let n = predictions.len();
        let mae = if n == 0 {
            f64::NAN
        } else {
            predictions.iter().map(|r| (r.pred - r.target).abs()).sum::<f64>() / n as f64
        };
        let mut sums: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
        for r in &predictions {
            let e = sums.entry(age_bin(r.target)).or_default();
            e.0 += 1;
            e.1 += (r.pred - r.target).abs();
        }
        let per_bin_mae = sums
            .into_iter()
            .map(|(b, (c, s))| (b, BinStat { count: c, mae: s / c as f64 }))
            .collect();
        EvalReport {
            split,
            n,
            mae,
            per_bin_mae,
            predictions,
            failures,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report json");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        write_atomic(path, self.to_json().as_bytes()).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Scores `split` in id order. Samples that fail to load or predict are
/// listed in `failures` and excluded from `n`.
pub fn evaluate(
    predictor: &mut dyn AgePredictor,
    corpus: &Corpus,
    split: Split,
    transform: &TransformSpec,
    batch_size: usize,
) -> Result<EvalReport, EvalError> {
    let samples = corpus.split(split);
    if samples.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let (rows, failures) = predict_samples(predictor, corpus, &samples, transform, batch_size)?;
    for (id, why) in &failures {
        warn!("excluding {id} from {split} evaluation: {why}");
    }
    if rows.is_empty() {
        return Err(EvalError::AllFailed(split));
    }
    Ok(EvalReport::from_predictions(split, rows, failures))
}

type Rows = (Vec<PredictionRow>, Vec<(String, String)>);

/// Batched prediction with per-sample failure isolation.
pub fn predict_samples(
    predictor: &mut dyn AgePredictor,
    corpus: &Corpus,
    samples: &[&Sample],
    transform: &TransformSpec,
    batch_size: usize,
) -> Result<Rows, EvalError> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut failures = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut ready: Vec<(&Sample, Tensor)> = Vec::with_capacity(chunk.len());
        for s in chunk {
            let item = corpus
                .load_image(s)
                .map_err(|e| e.to_string())
                .and_then(|img| {
                    let mut rng = sample_rng(0, "eval", 0, &s.id);
                    transform.apply(&img, &mut rng).map_err(|e| e.to_string())
                });
            match item {
                Ok(t) => ready.push((s, t)),
                Err(e) => failures.push((s.id.clone(), e)),
            }
        }
        run_isolated(predictor, ready, &mut rows, &mut failures);
    }
    Ok((rows, failures))
}

fn run_isolated(
    predictor: &mut dyn AgePredictor,
    mut ready: Vec<(&Sample, Tensor)>,
    rows: &mut Vec<PredictionRow>,
    failures: &mut Vec<(String, String)>,
) {
    while !ready.is_empty() {
        let items: Vec<Tensor> = ready.iter().map(|(_, t)| t.clone()).collect();
        let batch = Tensor::stack(&items).expect("uniform transform output");
        match predictor.predict_batch(&batch) {
            Ok(preds) => {
                for ((s, _), p) in ready.iter().zip(preds) {
                    rows.push(PredictionRow {
                        id: s.id.clone(),
                        pred: p,
                        target: s.age,
                    });
                }
                return;
            }
            Err(PredictError { index: Some(i), message }) if i < ready.len() => {
                let (s, _) = ready.remove(i);
                failures.push((s.id.clone(), message));
            }
            Err(e) if ready.len() == 1 => {
                failures.push((ready[0].0.id.clone(), e.message));
                return;
            }
            Err(_) => {
                for item in ready {
                    run_isolated(predictor, vec![item], rows, failures);
                }
                return;
            }
        }
    }
}

/// Writes `<stem>_scatter.tsv` (target, pred per row, report order) and
/// `<stem>_histogram.tsv` (prediction counts per 5-year bin).
pub fn emit_diagnostics(report: &EvalReport, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf), EvalError> {
    if report.predictions.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let mut scatter = String::from("target\tpred\n");
    for r in &report.predictions {
        writeln!(scatter, "{}\t{}", r.target, r.pred).unwrap();
    }
    let mut hist = String::from("bin\tlo\thi\tcount\n");
    let counts = prediction_histogram(report);
    for (b, c) in counts.iter().enumerate() {
        let lo = b as f64 * BIN_WIDTH;
        writeln!(hist, "{b}\t{lo}\t{}\t{c}", lo + BIN_WIDTH).unwrap();
    }
    let sp = dir.join(format!("{stem}_scatter.tsv"));
    let hp = dir.join(format!("{stem}_histogram.tsv"));
    for (p, text) in [(&sp, scatter), (&hp, hist)] {
        write_atomic(p, text.as_bytes()).map_err(|source| EvalError::Io {
            path: p.clone(),
            source,
        })?;
    }
    Ok((sp, hp))
}

pub fn prediction_histogram(report: &EvalReport) -> Vec<usize> {
    let mut counts = vec![0usize; NUM_BINS as usize];
    for r in &report.predictions {
        counts[age_bin(r.pred.clamp(0.0, MAX_AGE)) as usize] += 1;
    }
    counts
}
