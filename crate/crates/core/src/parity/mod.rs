//! Export to a portable graph and a flat deployment graph, and a consistency
//! check that feeds both the same preprocessed inputs.

pub mod deploy;
pub mod graph;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Corpus, DatasetError, Split};
use crate::error::ErrorKind;
use crate::evaluation::AgePredictor;
use crate::io::{sha256_hex, write_atomic};
use crate::loader::sample_rng;
use crate::model::{AgeModel, Checkpoint, ModelError, Mode};
use crate::seed::{rng_for, tag};
use crate::tensor::Tensor;
use crate::training::EpochRecord;
use crate::transforms::{TransformError, TransformSpec};

pub use deploy::{convert, DeployGraph, DeployRuntime};
pub use graph::{trace, PortableGraph, PortableRuntime};

pub const PORTABLE_FILE: &str = "model.agraph";
pub const DEPLOYMENT_FILE: &str = "model.adep";
/// Per-sample gaps above this many years are listed in the report.
pub const FLAG_GAP_YEARS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ParityError {
    #[error("unsupported operator in conversion: {0}")]
    UnsupportedOp(String),
    #[error("malformed artifact: {0}")]
    Malformed(String),
    #[error("input shape mismatch: expected {expected}, found {found}")]
    InputShape { expected: String, found: String },
    #[error("backend output shape mismatch: expected {expected} values, found {found}")]
    OutputShape { expected: usize, found: usize },
    #[error("backends disagree on input size: {0} vs {1}")]
    InputSizeMismatch(usize, usize),
    #[error("preprocessed input for {0} changed between backends")]
    PreprocessMismatch(String),
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("backend {backend} failed: {message}")]
    Backend { backend: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ParityError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ParityError::UnsupportedOp(_)
            | ParityError::Malformed(_)
            | ParityError::InputShape { .. }
            | ParityError::OutputShape { .. }
            | ParityError::InputSizeMismatch(..)
            | ParityError::Backend { .. } => ErrorKind::Other,
            ParityError::PreprocessMismatch(_) => ErrorKind::Numerical,
            ParityError::EmptySplit(_) | ParityError::Transform(_) => ErrorKind::Data,
            ParityError::Model(e) => e.kind(),
            ParityError::Dataset(e) => e.kind(),
            ParityError::Io { .. } => ErrorKind::Io,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ParityError + '_ {
    move |source| ParityError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn check_input(x: &Tensor, side: usize) -> Result<(), ParityError> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != side || s[3] != side {
        return Err(ParityError::InputShape {
            expected: format!("[n, 3, {side}, {side}]"),
            found: format!("{s:?}"),
        });
    }
    Ok(())
}

pub(crate) fn check_output(out: &[f64], n: usize) -> Result<(), ParityError> {
    if out.len() != n {
        return Err(ParityError::OutputShape {
            expected: n,
            found: out.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ArtifactStage {
    SourceCheckpoint,
    PortableGraph,
    DeploymentGraph,
}

impl ArtifactStage {
    pub fn name(self) -> &'static str {
        match self {
            ArtifactStage::SourceCheckpoint => "SOURCE_CHECKPOINT",
            ArtifactStage::PortableGraph => "PORTABLE_GRAPH",
            ArtifactStage::DeploymentGraph => "DEPLOYMENT_GRAPH",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedArtifact {
    pub stage: ArtifactStage,
    pub file_ref: PathBuf,
    /// `-1` is the dynamic batch dimension.
    pub input_signature: [i64; 4],
    pub size_bytes: u64,
    pub sha256: String,
}

impl ExportedArtifact {
    fn describe(stage: ArtifactStage, path: &Path, bytes: &[u8], side: usize) -> Self {
        ExportedArtifact {
            stage,
            file_ref: path.to_path_buf(),
            input_signature: [-1, 3, side as i64, side as i64],
            size_bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        }
    }

    pub fn size_mb(&self) -> f64 {
        self.size_bytes as f64 / 1e6
    }
}

/// Writes the portable and deployment graphs for `checkpoint` into
/// `out_dir` and returns the chain, source first.
pub fn export(checkpoint: &Path, out_dir: &Path) -> Result<Vec<ExportedArtifact>, ParityError> {
    let source = std::fs::read(checkpoint).map_err(io_err(checkpoint))?;
    let ckpt = Checkpoint::from_bytes(&source)?;
    let model = AgeModel::from_checkpoint(&ckpt)?;
    let side = model.spec().input_size;
    let portable = trace(&model);
    let deployment = convert(&portable)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut chain = vec![ExportedArtifact::describe(
        ArtifactStage::SourceCheckpoint,
        checkpoint,
        &source,
        side,
    )];
    for (stage, file, bytes) in [
        (ArtifactStage::PortableGraph, PORTABLE_FILE, portable.to_bytes()),
        (ArtifactStage::DeploymentGraph, DEPLOYMENT_FILE, deployment.to_bytes()),
    ] {
        let path = out_dir.join(file);
        write_atomic(&path, &bytes).map_err(io_err(&path))?;
        chain.push(ExportedArtifact::describe(stage, &path, &bytes, side));
    }
    Ok(chain)
}

/// A loaded artifact of any stage.
pub enum Backend {
    Source(Box<AgeModel>),
    Portable(PortableRuntime),
    Deployment(DeployRuntime),
}

impl Backend {
    pub fn load(stage: ArtifactStage, path: &Path) -> Result<Self, ParityError> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(stage, &bytes)
    }

    pub fn from_bytes(stage: ArtifactStage, bytes: &[u8]) -> Result<Self, ParityError> {
        Ok(match stage {
            ArtifactStage::SourceCheckpoint => {
                let mut m = AgeModel::from_checkpoint(&Checkpoint::from_bytes(bytes)?)?;
                m.set_mode(Mode::Eval);
                Backend::Source(Box::new(m))
            }
            ArtifactStage::PortableGraph => Backend::Portable(PortableRuntime::new(&PortableGraph::from_bytes(bytes)?)?),
            ArtifactStage::DeploymentGraph => Backend::Deployment(DeployRuntime::new(DeployGraph::from_bytes(bytes)?)),
        })
    }

    pub fn stage(&self) -> ArtifactStage {
        match self {
            Backend::Source(_) => ArtifactStage::SourceCheckpoint,
            Backend::Portable(_) => ArtifactStage::PortableGraph,
            Backend::Deployment(_) => ArtifactStage::DeploymentGraph,
        }
    }

    /// `[n, 3, s, s] -> n` ages.
    pub fn infer(&mut self, x: &Tensor) -> Result<Vec<f64>, ParityError> {
        let out = match self {
            Backend::Source(m) => {
                check_input(x, m.spec().input_size)?;
                m.forward(x, None)?
            }
            Backend::Portable(r) => r.run(x)?,
            Backend::Deployment(r) => r.run(x)?,
        };
        check_output(&out, x.shape()[0])?;
        Ok(out)
    }
}

impl AgePredictor for Backend {
    fn input_size(&self) -> usize {
        match self {
            Backend::Source(m) => m.spec().input_size,
            Backend::Portable(r) => r.input_size(),
            Backend::Deployment(r) => r.input_side(),
        }
    }

    fn predict_batch(&mut self, batch: &Tensor) -> Result<Vec<f64>, crate::evaluation::PredictError> {
        self.infer(batch).map_err(|e| crate::evaluation::PredictError {
            index: None,
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParitySample {
    pub id: String,
    pub target: f64,
    pub out_a: f64,
    pub out_b: f64,
    pub input_sha256: String,
}

impl ParitySample {
    pub fn gap(&self) -> f64 {
        (self.out_a - self.out_b).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub split: Split,
    pub stage_a: String,
    pub stage_b: String,
    pub n: usize,
    pub mae_stage_a: f64,
    pub mae_stage_b: f64,
    pub delta_conv: f64,
    pub best_train_val_mae: Option<f64>,
    pub delta_val: Option<f64>,
    pub max_abs_output_gap: f64,
    pub mean_abs_output_gap: f64,
    /// Hash over every input tensor in order.
    pub inputs_sha256: String,
    pub flagged: Vec<ParitySample>,
    pub samples: Vec<ParitySample>,
}

impl ConsistencyReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report json");
        s.push('\n');
        s
    }

    /// Row-per-metric summary.
    pub fn to_text(&self) -> String {
        let mut t = String::new();
        let split = self.split.name();
        writeln!(t, "{:<40} {:>12}", "metric", "value").unwrap();
        writeln!(t, "{:<40} {:>12}", "samples", self.n).unwrap();
        writeln!(t, "{:<40} {:>12.4}", format!("MAE {} ({split})", self.stage_a), self.mae_stage_a).unwrap();
        writeln!(t, "{:<40} {:>12.4}", format!("MAE {} ({split})", self.stage_b), self.mae_stage_b).unwrap();
        writeln!(t, "{:<40} {:>12.4}", "delta_conv", self.delta_conv).unwrap();
        if let (Some(best), Some(dv)) = (self.best_train_val_mae, self.delta_val) {
            writeln!(t, "{:<40} {:>12.4}", "best training val MAE", best).unwrap();
            writeln!(t, "{:<40} {:>12.4}", "delta_val", dv).unwrap();
        }
        writeln!(t, "{:<40} {:>12.6}", "max |a - b| (years)", self.max_abs_output_gap).unwrap();
        writeln!(t, "{:<40} {:>12.6}", "mean |a - b| (years)", self.mean_abs_output_gap).unwrap();
        writeln!(t, "{:<40} {:>12}", format!("samples with gap > {FLAG_GAP_YEARS} y"), self.flagged.len()).unwrap();
        t
    }

    pub fn save(&self, path: &Path) -> Result<(), ParityError> {
        write_atomic(path, self.to_json().as_bytes()).map_err(io_err(path))
    }
}

#[derive(Debug, Clone)]
pub struct ParityOptions {
    pub stage_a: String,
    pub stage_b: String,
    /// Score a random subset of this size (kept in id order) instead of the
    /// whole split.
    pub limit: Option<usize>,
    pub subset_seed: u64,
    pub batch_size: usize,
    pub best_train_val_mae: Option<f64>,
}

impl Default for ParityOptions {
    fn default() -> Self {
        ParityOptions {
            stage_a: ArtifactStage::PortableGraph.name().to_string(),
            stage_b: ArtifactStage::DeploymentGraph.name().to_string(),
            limit: None,
            subset_seed: 0,
            batch_size: 16,
            best_train_val_mae: None,
        }
    }
}

/// Lowest validation MAE among the training log's epochs.
pub fn best_val_mae(records: &[EpochRecord]) -> Option<f64> {
    records
        .iter()
        .map(|r| r.val_mae)
        .filter(|v| v.is_finite())
        .min_by(|a, b| a.total_cmp(b))
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochRecord>, ParityError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ParityError::Malformed(format!("{}: {e}", path.display()))))
        .collect()
}

fn tensor_digest(t: &Tensor) -> String {
    sha256_hex(&t.to_le_bytes())
}

/// Preprocesses each sample of `split` once and runs both backends on the
/// cached tensors in id order.
pub fn run_parity(
    a: &mut dyn AgePredictor,
    b: &mut dyn AgePredictor,
    corpus: &Corpus,
    split: Split,
    opts: &ParityOptions,
) -> Result<ConsistencyReport, ParityError> {
    if a.input_size() != b.input_size() {
        return Err(ParityError::InputSizeMismatch(a.input_size(), b.input_size()));
    }
    let side = a.input_size();
    let mut samples = corpus.split(split);
    if samples.is_empty() {
        return Err(ParityError::EmptySplit(split));
    }
    if let Some(k) = opts.limit.filter(|&k| k < samples.len()) {
        let mut rng = rng_for(opts.subset_seed, &[tag("parity-subset")]);
        let mut picked = index::sample(&mut rng, samples.len(), k).into_vec();
        picked.sort_unstable();
        samples = picked.into_iter().map(|i| samples[i]).collect();
    }
    let transform = TransformSpec::eval(side);
    let mut cache = Vec::with_capacity(samples.len());
    for s in &samples {
        let img = corpus.load_image(s)?;
        let t = transform.apply(&img, &mut sample_rng(0, "eval", 0, &s.id))?;
        let digest = tensor_digest(&t);
        cache.push((t, digest));
    }
    let run = |p: &mut dyn AgePredictor, name: &str| -> Result<Vec<f64>, ParityError> {
        let mut out = Vec::with_capacity(cache.len());
        for (chunk, ids) in cache.chunks(opts.batch_size.max(1)).zip(samples.chunks(opts.batch_size.max(1))) {
            for ((t, d), s) in chunk.iter().zip(ids) {
                if tensor_digest(t) != *d {
                    return Err(ParityError::PreprocessMismatch(s.id.clone()));
                }
            }
            let items: Vec<Tensor> = chunk.iter().map(|(t, _)| t.clone()).collect();
            let x = Tensor::stack(&items).map_err(|e| ParityError::Malformed(e.to_string()))?;
            let y = p.predict_batch(&x).map_err(|e| ParityError::Backend {
                backend: name.to_string(),
                message: e.message,
            })?;
            check_output(&y, items.len())?;
            out.extend(y);
        }
        Ok(out)
    };
    let out_a = run(a, &opts.stage_a)?;
    let out_b = run(b, &opts.stage_b)?;

    let rows: Vec<ParitySample> = samples
        .iter()
        .zip(&cache)
        .zip(out_a.iter().zip(&out_b))
        .map(|((s, (_, d)), (&oa, &ob))| ParitySample {
            id: s.id.clone(),
            target: s.age,
            out_a: oa,
            out_b: ob,
            input_sha256: d.clone(),
        })
        .collect();
    let n = rows.len();
    let mean = |f: &dyn Fn(&ParitySample) -> f64| rows.iter().map(f).sum::<f64>() / n as f64;
    let mae_a = mean(&|r| (r.out_a - r.target).abs());
    let mae_b = mean(&|r| (r.out_b - r.target).abs());
    let mean_gap = mean(&|r| r.gap());
    let max_gap = rows.iter().map(ParitySample::gap).fold(0.0, f64::max);
    let mut all = Vec::with_capacity(n * 64);
    for (_, d) in &cache {
        all.extend_from_slice(d.as_bytes());
    }
    let delta_val = match (split, opts.best_train_val_mae) {
        (Split::Val, Some(best)) => Some((mae_b - best).abs()),
        _ => None,
    };
    Ok(ConsistencyReport {
        split,
        stage_a: opts.stage_a.clone(),
        stage_b: opts.stage_b.clone(),
        n,
        mae_stage_a: mae_a,
        mae_stage_b: mae_b,
        delta_conv: (mae_a - mae_b).abs(),
        best_train_val_mae: opts.best_train_val_mae,
        delta_val,
        max_abs_output_gap: max_gap,
        mean_abs_output_gap: mean_gap,
        inputs_sha256: sha256_hex(&all),
        flagged: rows.iter().filter(|r| r.gap() > FLAG_GAP_YEARS).cloned().collect(),
        samples: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, Pretrained};

    fn small_model() -> AgeModel {
        let spec = ModelSpec {
            input_size: 32,
            ..ModelSpec::default()
        };
        AgeModel::build(spec, &Pretrained::Random { seed: 3 }, 4).unwrap()
    }

    fn batch(n: usize, side: usize) -> Tensor {
        let data = (0..n * 3 * side * side).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        Tensor::from_vec(&[n, 3, side, side], data).unwrap()
    }

    #[test]
    fn portable_graph_matches_model() {
        let mut model = small_model();
        let pg = trace(&model);
        let mut rt = PortableRuntime::new(&PortableGraph::from_bytes(&pg.to_bytes()).unwrap()).unwrap();
        let x = batch(2, 32);
        let a = model.forward(&x, None).unwrap();
        let b = rt.run(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deployment_graph_tracks_model() {
        let mut model = small_model();
        let dg = convert(&trace(&model)).unwrap();
        let rt = DeployRuntime::new(DeployGraph::from_bytes(&dg.to_bytes()).unwrap());
        let x = batch(3, 32);
        let a = model.forward(&x, None).unwrap();
        let b = rt.run(&x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-3, "{p} vs {q}");
        }
    }

    #[test]
    fn every_batch_norm_is_folded() {
        let pg = trace(&small_model());
        let dg = convert(&pg).unwrap();
        let convs = pg.graph.nodes.iter().filter(|n| n.op == graph::ops::CONV).count();
        let folded = dg.ops.iter().filter(|o| matches!(o, deploy::DeployOp::Conv { .. })).count();
        assert_eq!(convs, folded);
        assert!(!dg.ops.iter().any(|o| matches!(o, deploy::DeployOp::Activation { .. })));
    }

    #[test]
    fn unknown_operator_is_named() {
        let mut pg = trace(&small_model());
        pg.graph.nodes[2].op = "Gelu".into();
        match convert(&pg) {
            Err(ParityError::UnsupportedOp(op)) => assert_eq!(op, "Gelu"),
            other => panic!("expected unsupported op, got {other:?}"),
        }
        assert!(matches!(PortableRuntime::new(&pg), Err(ParityError::UnsupportedOp(_))));
    }

    #[test]
    fn truncated_deployment_file_is_rejected() {
        let bytes = convert(&trace(&small_model())).unwrap().to_bytes();
        assert!(DeployGraph::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(DeployGraph::from_bytes(b"garbage!").is_err());
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let rt = DeployRuntime::new(convert(&trace(&small_model())).unwrap());
        assert!(matches!(rt.run(&batch(1, 40)), Err(ParityError::InputShape { .. })));
    }
}
