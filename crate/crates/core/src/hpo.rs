//! Random search over the fine-tuning hyperparameters, then a single locked
//! run with the winning configuration.
//!
//! Trial selection uses validation MAE only. The corpus access audit is
//! checked at selection time and the study is rejected if the held-out split
//! was read.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AccessAudit, Corpus, Split};
use crate::error::ErrorKind;
use crate::io::{sha256_hex, write_atomic};
use crate::loader::{predict, PassKey};
use crate::model::{AgeModel, Checkpoint, ModelError, ModelSpec, Mode, Pretrained};
use crate::seed::{derive_seed, rng_for, tag};
use crate::training::{self, EpochRecord, RunOptions, TrainError, TrainSpec};
use crate::transforms::{Pipeline, TransformSpec};

pub const DEFAULT_BUDGET: usize = 40;
pub const DEFAULT_EPOCH_CAP: usize = 60;
pub const DEFAULT_FINAL_EPOCHS: usize = 100;

#[derive(Debug, Error)]
pub enum HpoError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("no trial completed out of {0}")]
    NoCompleteTrials(usize),
    #[error("held-out split was read {reads} time(s) before model selection")]
    TestSplitAccessed { reads: usize },
    #[error("checksum mismatch in {0}: document was modified after creation")]
    ChecksumMismatch(PathBuf),
    #[error("study {study_id} already has a locked run ({runs:?}); pass force with a new run id")]
    AlreadyFinalized { study_id: String, runs: Vec<String> },
    #[error("run id {0} was already used for this study")]
    DuplicateRunId(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed document {path}: {reason}")]
    Document { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HpoError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            HpoError::InvalidSpace(_)
            | HpoError::AlreadyFinalized { .. }
            | HpoError::DuplicateRunId(_) => ErrorKind::Config,
            HpoError::NoCompleteTrials(_) => ErrorKind::Numerical,
            HpoError::TestSplitAccessed { .. } => ErrorKind::Other,
            HpoError::ChecksumMismatch(_) | HpoError::Document { .. } => ErrorKind::Data,
            HpoError::Train(e) => e.kind(),
            HpoError::Model(e) => e.kind(),
            HpoError::Io { .. } => ErrorKind::Io,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Sampled log-uniformly.
    pub lr: (f64, f64),
    pub dropout: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub transforms: Vec<Pipeline>,
    pub freeze_epochs: usize,
    pub backbone_lr_mult: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr: (5e-4, 2e-3),
            dropout: (0.10, 0.30),
            batch_sizes: vec![64, 128],
            transforms: Pipeline::TRAINING.to_vec(),
            freeze_epochs: 5,
            backbone_lr_mult: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub transform: Pipeline,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), HpoError> {
        let bad = |m: &str| Err(HpoError::InvalidSpace(m.into()));
        if !(self.lr.0 > 0.0 && self.lr.0 <= self.lr.1 && self.lr.1.is_finite()) {
            return bad("lr range must be positive and ordered");
        }
        if !(0.0 <= self.dropout.0 && self.dropout.0 <= self.dropout.1 && self.dropout.1 < 1.0) {
            return bad("dropout range must lie in [0, 1)");
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return bad("batch sizes must be non-empty and positive");
        }
        if self.transforms.is_empty() || self.transforms.contains(&Pipeline::EvalDeterministic) {
            return bad("transforms must be non-empty training pipelines");
        }
        if !(self.backbone_lr_mult > 0.0) {
            return bad("backbone_lr_mult must be positive");
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TrialConfig {
        let (lo, hi) = (self.lr.0.ln(), self.lr.1.ln());
        let lr = if lo == hi { self.lr.0 } else { rng.random_range(lo..=hi).exp() }.clamp(self.lr.0, self.lr.1);
        let dropout = if self.dropout.0 == self.dropout.1 {
            self.dropout.0
        } else {
            rng.random_range(self.dropout.0..=self.dropout.1)
        };
        TrialConfig {
            lr,
            dropout,
            batch_size: self.batch_sizes[rng.random_range(0..self.batch_sizes.len())],
            transform: self.transforms[rng.random_range(0..self.transforms.len())],
        }
    }
}

impl TrialConfig {
    pub fn train_spec(&self, base: &TrainSpec, space: &SearchSpace, epochs: usize, seed: u64) -> TrainSpec {
        TrainSpec {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs,
            freeze_epochs: space.freeze_epochs.min(epochs),
            backbone_lr_mult: space.backbone_lr_mult,
            transform: self.transform,
            seed,
            ..base.clone()
        }
    }

    pub fn model_spec(&self, base: &ModelSpec) -> ModelSpec {
        ModelSpec {
            dropout: self.dropout,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrialStatus {
    Complete,
    Pruned,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub seed: u64,
    pub config: TrialConfig,
    pub val_mae_best: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Filled only on request, after selection has happened.
    pub test_mae: Option<f64>,
    pub epochs_run: usize,
    pub status: TrialStatus,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub seed: u64,
    pub budget: usize,
    pub epoch_cap: usize,
    pub space: SearchSpace,
    pub base_train: TrainSpec,
    pub base_model: ModelSpec,
    pub trials: Vec<TrialRecord>,
    pub best_trial: usize,
    /// Reads of the held-out split observed when the best trial was chosen.
    pub test_reads_at_selection: usize,
}

impl StudyRecord {
    pub fn best(&self) -> &TrialRecord {
        &self.trials[self.best_trial]
    }
}

/// What one trial reports back to the study.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub val_mae_best: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub checkpoint: Option<Checkpoint>,
}

/// Everything a trial needs to train.
#[derive(Debug, Clone)]
pub struct TrialContext {
    pub trial_id: usize,
    pub seed: u64,
    pub config: TrialConfig,
    pub train_spec: TrainSpec,
    pub model_spec: ModelSpec,
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    pub study_id: String,
    pub seed: u64,
    pub budget: usize,
    pub epoch_cap: usize,
    pub space: SearchSpace,
    pub base_train: TrainSpec,
    pub base_model: ModelSpec,
    pub pretrained: Pretrained,
    /// Per-trial training output lands in `<out_dir>/trial-<id>`.
    pub out_dir: Option<PathBuf>,
    /// After selection, score every completed trial on the held-out split.
    pub log_test_mae: bool,
}

impl SearchOptions {
    pub fn new(study_id: impl Into<String>, seed: u64) -> Self {
        SearchOptions {
            study_id: study_id.into(),
            seed,
            budget: DEFAULT_BUDGET,
            epoch_cap: DEFAULT_EPOCH_CAP,
            space: SearchSpace::default(),
            base_train: TrainSpec::default(),
            base_model: ModelSpec::default(),
            pretrained: Pretrained::Random { seed },
            out_dir: None,
            log_test_mae: false,
        }
    }

    pub fn trial_context(&self, trial_id: usize) -> TrialContext {
        let seed = derive_seed(self.seed, &[trial_id as u64]);
        let config = self.space.sample(&mut rng_for(self.seed, &[tag("sample"), trial_id as u64]));
        let epochs = self.base_train.epochs.min(self.epoch_cap);
        TrialContext {
            trial_id,
            seed,
            train_spec: config.train_spec(&self.base_train, &self.space, epochs, seed),
            model_spec: config.model_spec(&self.base_model),
            config,
        }
    }
}

/// Lowest validation MAE among completed trials; ties go to the lower id.
pub fn select_best(trials: &[TrialRecord]) -> Option<usize> {
    trials
        .iter()
        .enumerate()
        .filter(|(_, t)| t.status == TrialStatus::Complete && t.val_mae_best.is_some_and(f64::is_finite))
        .min_by(|(_, a), (_, b)| {
            a.val_mae_best
                .unwrap()
                .total_cmp(&b.val_mae_best.unwrap())
                .then(a.trial_id.cmp(&b.trial_id))
        })
        .map(|(i, _)| i)
}

/// Runs the study with a caller-supplied trial executor. A trial whose
/// executor returns `Err` is recorded as FAILED and the study continues.
pub fn search_with(
    opts: &SearchOptions,
    audit: Option<&AccessAudit>,
    run_trial: &mut dyn FnMut(&TrialContext) -> Result<TrialResult, String>,
) -> Result<(StudyRecord, Vec<Option<Checkpoint>>), HpoError> {
    opts.space.validate()?;
    if opts.budget == 0 {
        return Err(HpoError::InvalidSpace("budget must be at least 1".into()));
    }
    let mut trials = Vec::with_capacity(opts.budget);
    let mut checkpoints = Vec::with_capacity(opts.budget);
    for trial_id in 0..opts.budget {
        let ctx = opts.trial_context(trial_id);
        let mut record = TrialRecord {
            trial_id,
            seed: ctx.seed,
            config: ctx.config.clone(),
            val_mae_best: None,
            best_epoch: None,
            test_mae: None,
            epochs_run: 0,
            status: TrialStatus::Failed,
            error: None,
        };
        match run_trial(&ctx) {
            Ok(r) => {
                record.val_mae_best = Some(r.val_mae_best);
                record.best_epoch = Some(r.best_epoch);
                record.epochs_run = r.epochs_run.min(opts.epoch_cap);
                record.status = TrialStatus::Complete;
                checkpoints.push(r.checkpoint);
            }
            Err(e) => {
                warn!("trial {trial_id} failed: {e}");
                record.error = Some(e);
                checkpoints.push(None);
            }
        }
        info!("trial {trial_id}: {:?} val_mae {:?}", record.status, record.val_mae_best);
        trials.push(record);
    }
    let test_reads = audit.map_or(0, |a| a.reads(Split::Test));
    if test_reads != 0 {
        return Err(HpoError::TestSplitAccessed { reads: test_reads });
    }
    let best_trial = select_best(&trials).ok_or(HpoError::NoCompleteTrials(opts.budget))?;
    let study = StudyRecord {
        study_id: opts.study_id.clone(),
        seed: opts.seed,
        budget: opts.budget,
        epoch_cap: opts.epoch_cap,
        space: opts.space.clone(),
        base_train: opts.base_train.clone(),
        base_model: opts.base_model.clone(),
        trials,
        best_trial,
        test_reads_at_selection: test_reads,
    };
    Ok((study, checkpoints))
}

/// Runs the study with real training on `corpus`.
pub fn search(corpus: &Corpus, opts: &SearchOptions) -> Result<StudyRecord, HpoError> {
    let mut runner = |ctx: &TrialContext| -> Result<TrialResult, String> {
        let mut model = AgeModel::build(ctx.model_spec.clone(), &opts.pretrained, ctx.seed).map_err(|e| e.to_string())?;
        let run_opts = RunOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("trial-{:03}", ctx.trial_id))),
            ..RunOptions::default()
        };
        let out = training::run(&mut model, corpus, &ctx.train_spec, &run_opts).map_err(|e| e.to_string())?;
        Ok(TrialResult {
            val_mae_best: out.policy.best_value,
            best_epoch: out.policy.best_epoch,
            epochs_run: out.records.len(),
            checkpoint: opts.log_test_mae.then_some(out.best),
        })
    };
    let (mut study, checkpoints) = search_with(opts, Some(corpus.audit()), &mut runner)?;
    if opts.log_test_mae {
        let test = corpus.split(Split::Test);
        for (trial, ckpt) in study.trials.iter_mut().zip(checkpoints) {
            let Some(ckpt) = ckpt else { continue };
            let mut model = AgeModel::from_checkpoint(&ckpt)?;
            model.set_mode(Mode::Eval);
            let transform = TransformSpec::eval(model.spec().input_size);
            let key = PassKey {
                seed: 0,
                purpose: "test",
                epoch: 0,
            };
            let preds = predict::<TrainError>(&mut model, corpus, &test, &transform, key, 64)?;
            trial.test_mae = Some(preds.mae());
        }
    }
    Ok(study)
}

/// JSON body plus the SHA-256 of its canonical serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sealed<T> {
    sha256: String,
    body: T,
}

pub fn save_sealed<T: Serialize>(path: &Path, body: &T) -> Result<String, HpoError> {
    let canonical = serde_json::to_string(body).expect("serializable");
    let sha256 = sha256_hex(canonical.as_bytes());
    let doc = serde_json::json!({ "sha256": sha256, "body": serde_json::from_str::<serde_json::Value>(&canonical).unwrap() });
    let mut text = serde_json::to_string_pretty(&doc).expect("json");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(|source| HpoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256)
}

pub fn load_sealed<T: Serialize + DeserializeOwned>(path: &Path) -> Result<(T, String), HpoError> {
    let text = fs::read_to_string(path).map_err(|source| HpoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: Sealed<serde_json::Value> = serde_json::from_str(&text).map_err(|e| HpoError::Document {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let body: T = serde_json::from_value(doc.body).map_err(|e| HpoError::Document {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let canonical = serde_json::to_string(&body).expect("serializable");
    if sha256_hex(canonical.as_bytes()) != doc.sha256 {
        return Err(HpoError::ChecksumMismatch(path.to_path_buf()));
    }
    Ok((body, doc.sha256))
}

/// The frozen configuration for the final run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockedConfig {
    pub study_id: String,
    pub source_trial: usize,
    pub config: TrialConfig,
    pub final_epochs: usize,
    pub seed: u64,
    pub train_spec: TrainSpec,
    pub model_spec: ModelSpec,
}

pub fn lock(study: &StudyRecord, final_epochs: usize) -> LockedConfig {
    let best = study.best();
    let seed = derive_seed(study.seed, &[tag("final")]);
    LockedConfig {
        study_id: study.study_id.clone(),
        source_trial: best.trial_id,
        config: best.config.clone(),
        final_epochs,
        seed,
        train_spec: best.config.train_spec(&study.base_train, &study.space, final_epochs, seed),
        model_spec: best.config.model_spec(&study.base_model),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub study_id: String,
    pub run_id: String,
    pub locked_sha256: String,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
    /// Reads of the held-out split observed when the checkpoint was selected.
    pub test_reads_before_selection: usize,
}

#[derive(Debug, Clone)]
pub struct FinalizeOptions {
    pub run_id: String,
    /// Holds one `<study_id>.runs.json` per finalized study.
    pub registry_dir: PathBuf,
    pub out_dir: Option<PathBuf>,
    pub force: bool,
    pub pretrained: Pretrained,
}

fn registry_path(dir: &Path, study_id: &str) -> PathBuf {
    dir.join(format!("{study_id}.runs.json"))
}

/// Claims `run_id` for the study, refusing a second locked run unless
/// forced, and never reusing a run id.
fn claim_run(opts: &FinalizeOptions, study_id: &str) -> Result<(), HpoError> {
    let path = registry_path(&opts.registry_dir, study_id);
    let mut runs: Vec<String> = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| HpoError::Document {
            path: path.clone(),
            reason: e.to_string(),
        })?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(source) => return Err(HpoError::Io { path, source }),
    };
    if runs.contains(&opts.run_id) {
        return Err(HpoError::DuplicateRunId(opts.run_id.clone()));
    }
    if !runs.is_empty() && !opts.force {
        return Err(HpoError::AlreadyFinalized {
            study_id: study_id.to_string(),
            runs,
        });
    }
    runs.push(opts.run_id.clone());
    let text = serde_json::to_string_pretty(&runs).expect("json");
    write_atomic(&path, text.as_bytes()).map_err(|source| HpoError::Io { path, source })
}

/// The single locked training run.
pub fn finalize(
    corpus: &Corpus,
    locked: &LockedConfig,
    locked_sha256: &str,
    opts: &FinalizeOptions,
) -> Result<(FinalReport, AgeModel), HpoError> {
    claim_run(opts, &locked.study_id)?;
    let mut model = AgeModel::build(locked.model_spec.clone(), &opts.pretrained, locked.seed)?;
    let run_opts = RunOptions {
        out_dir: opts.out_dir.clone(),
        ..RunOptions::default()
    };
    let out = training::run(&mut model, corpus, &locked.train_spec, &run_opts)?;
    let test_reads = corpus.audit().reads(Split::Test);
    if test_reads != 0 {
        return Err(HpoError::TestSplitAccessed { reads: test_reads });
    }
    let checkpoint = opts
        .out_dir
        .as_ref()
        .map(|d| d.join("checkpoints").join(format!("epoch-{:03}-best.safetensors", out.policy.best_epoch)));
    Ok((
        FinalReport {
            study_id: locked.study_id.clone(),
            run_id: opts.run_id.clone(),
            locked_sha256: locked_sha256.to_string(),
            best_epoch: out.policy.best_epoch,
            best_val_mae: out.policy.best_value,
            epochs: out.records,
            checkpoint,
            test_reads_before_selection: test_reads,
        },
        model,
    ))
}

/// Per-trial summary rows for reports.
pub fn trial_table(study: &StudyRecord) -> BTreeMap<usize, (TrialStatus, Option<f64>)> {
    study.trials.iter().map(|t| (t.trial_id, (t.status, t.val_mae_best))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(id: usize, mae: Option<f64>, status: TrialStatus) -> TrialRecord {
        TrialRecord {
            trial_id: id,
            seed: 0,
            config: TrialConfig {
                lr: 1e-3,
                dropout: 0.2,
                batch_size: 64,
                transform: Pipeline::Norm256,
            },
            val_mae_best: mae,
            best_epoch: Some(1),
            test_mae: None,
            epochs_run: 1,
            status,
            error: None,
        }
    }

    #[test]
    fn samples_stay_in_range() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let c = space.sample(&mut rng);
            assert!((5e-4..=2e-3).contains(&c.lr));
            assert!((0.10..=0.30).contains(&c.dropout));
            assert!([64, 128].contains(&c.batch_size));
            assert!(Pipeline::TRAINING.contains(&c.transform));
            let ts = c.train_spec(&TrainSpec::default(), &space, 60, 1);
            ts.validate().unwrap();
            c.model_spec(&ModelSpec::default()).validate().unwrap();
        }
    }

    #[test]
    fn selection_skips_failed_and_breaks_ties_by_id() {
        let trials = vec![
            record(0, Some(5.0), TrialStatus::Complete),
            record(1, None, TrialStatus::Failed),
            record(2, Some(4.5), TrialStatus::Complete),
            record(3, Some(4.5), TrialStatus::Complete),
            record(4, Some(1.0), TrialStatus::Pruned),
        ];
        assert_eq!(select_best(&trials), Some(2));
        assert_eq!(select_best(&trials[1..2]), None);
    }

    #[test]
    fn failed_trials_do_not_stop_the_study() {
        let mut opts = SearchOptions::new("s", 3);
        opts.budget = 4;
        let (study, _) = search_with(&opts, None, &mut |ctx| {
            if ctx.trial_id % 2 == 0 {
                Err("diverged".into())
            } else {
                Ok(TrialResult {
                    val_mae_best: 10.0 - ctx.trial_id as f64,
                    best_epoch: 1,
                    epochs_run: 99,
                    checkpoint: None,
                })
            }
        })
        .unwrap();
        assert_eq!(study.best_trial, 3);
        assert_eq!(study.trials[0].status, TrialStatus::Failed);
        assert!(study.trials.iter().all(|t| t.epochs_run <= 60));
    }

    #[test]
    fn all_failed_is_fatal() {
        let mut opts = SearchOptions::new("s", 3);
        opts.budget = 2;
        let err = search_with(&opts, None, &mut |_| Err("boom".into())).unwrap_err();
        assert!(matches!(err, HpoError::NoCompleteTrials(2)));
    }

    #[test]
    fn trial_contexts_replay() {
        let opts = SearchOptions::new("s", 11);
        assert_eq!(opts.trial_context(5).config, opts.trial_context(5).config);
        assert_ne!(opts.trial_context(5).seed, opts.trial_context(6).seed);
        assert_eq!(opts.trial_context(0).train_spec.epochs, 60);
    }

    #[test]
    fn sealed_document_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("locked.json");
        let body = record(7, Some(3.0), TrialStatus::Complete);
        let sum = save_sealed(&p, &body).unwrap();
        let (back, sum2): (TrialRecord, String) = load_sealed(&p).unwrap();
        assert_eq!((back, sum2), (body, sum));
        let text = fs::read_to_string(&p).unwrap().replace("\"trial_id\": 7", "\"trial_id\": 8");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_sealed::<TrialRecord>(&p), Err(HpoError::ChecksumMismatch(_))));
    }
}
