use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    bounded_smooth_l1, clip_module_gradients, cosine_lr, AdamW, CheckpointPolicy, EpochRecord, LossConfig,
    ParamGroup, TrainError, TrainSpec,
};
use crate::dataset::{DatasetError, Sample, Split};
use crate::dataset::Corpus;
use crate::io::{write_atomic, TensorFile};
use crate::loader::{build_batch, predict, PassKey};
use crate::model::{is_backbone_param, AgeModel, Checkpoint, Mode, Stage};
use crate::nn::Module;
use crate::seed::{rng_for, tag};
use crate::transforms::{Pipeline, TransformSpec};

pub const HEAD_GROUP: &str = "head";
pub const BACKBONE_GROUP: &str = "backbone";

pub fn param_group_of(name: &str) -> &'static str {
    if is_backbone_param(name) {
        BACKBONE_GROUP
    } else {
        HEAD_GROUP
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoints, optimizer state and logs go here when set.
    pub out_dir: Option<PathBuf>,
    /// Continue from the state in `out_dir` if there is one.
    pub resume: bool,
    /// Return after this epoch, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub records: Vec<EpochRecord>,
    pub policy: CheckpointPolicy,
}

/// What is persisted after every epoch for resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub spec: TrainSpec,
    pub completed_epochs: usize,
    pub records: Vec<EpochRecord>,
    pub policy: CheckpointPolicy,
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn state(&self) -> PathBuf {
        self.root.join("train_state.json")
    }
    fn last(&self) -> PathBuf {
        self.root.join("checkpoints").join("last.safetensors")
    }
    fn optimizer(&self) -> PathBuf {
        self.root.join("checkpoints").join("optimizer.safetensors")
    }
    fn best(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch-{epoch:03}-best.safetensors"))
    }
    fn log(&self) -> PathBuf {
        self.root.join("logs").join("train.jsonl")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn optimizer_for(stage: Stage, spec: &TrainSpec) -> AdamW {
    let mut groups = vec![ParamGroup {
        name: HEAD_GROUP.into(),
        lr: spec.lr,
        steps: 0,
    }];
    if stage == Stage::Full {
        groups.push(ParamGroup {
            name: BACKBONE_GROUP.into(),
            lr: spec.lr * spec.backbone_lr_mult,
            steps: 0,
        });
    }
    AdamW::new(spec.adamw(), groups, param_group_of)
}

/// Shuffled batches of indices into the training split. A trailing batch of
/// one sample is folded into the previous batch so batch statistics always
/// see at least two samples.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[tag("shuffle"), epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

fn loss_config(model: &AgeModel, spec: &TrainSpec) -> LossConfig {
    LossConfig {
        beta: spec.loss_beta,
        train_min: model.spec().train_min,
        train_max: model.spec().train_max,
    }
}

/// Validation loss and MAE with the training transform replayed for `epoch`.
pub fn revalidate(
    model: &mut AgeModel,
    corpus: &Corpus,
    spec: &TrainSpec,
    epoch: usize,
) -> Result<(f64, f64), TrainError> {
    let val = corpus.split(Split::Val);
    validate_with(model, corpus, &val, spec, epoch)
}

fn validate_with(
    model: &mut AgeModel,
    corpus: &Corpus,
    val: &[&Sample],
    spec: &TrainSpec,
    epoch: usize,
) -> Result<(f64, f64), TrainError> {
    model.set_mode(Mode::Eval);
    let transform = TransformSpec::new(spec.transform, model.spec().input_size);
    let key = PassKey {
        seed: spec.seed,
        purpose: "val",
        epoch: epoch as u64,
    };
    let preds = predict::<TrainError>(model, corpus, val, &transform, key, spec.eval_batch_size)?;
    let mae = preds.mae();
    let loss = bounded_smooth_l1(&preds.preds, &preds.targets, &loss_config(model, spec))
        .map(|l| l.value)
        .unwrap_or(f64::NAN);
    if !mae.is_finite() || !loss.is_finite() {
        return Err(TrainError::NonFiniteValidation { epoch });
    }
    Ok((loss, mae))
}

pub fn run(model: &mut AgeModel, corpus: &Corpus, spec: &TrainSpec, opts: &RunOptions) -> Result<TrainOutcome, TrainError> {
    run_observed(model, corpus, spec, opts, &mut |_, _| {})
}

/// [`run`], calling `observer` after every epoch with the model as it stands
/// at the end of that epoch.
pub fn run_observed(
    model: &mut AgeModel,
    corpus: &Corpus,
    spec: &TrainSpec,
    opts: &RunOptions,
    observer: &mut dyn FnMut(&AgeModel, &EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    spec.validate()?;
    let train = corpus.split(Split::Train);
    let val = corpus.split(Split::Val);
    if train.is_empty() {
        return Err(DatasetError::EmptyTrainSplit.into());
    }
    if val.is_empty() {
        return Err(TrainError::InvalidSpec("validation split is empty".into()));
    }
    let side = model.spec().input_size;
    let transform = TransformSpec::new(spec.transform, side);
    let det_transform = TransformSpec::new(Pipeline::EvalDeterministic, side);
    let loss_cfg = loss_config(model, spec);
    let layout = opts.out_dir.as_ref().map(|root| Layout { root: root.clone() });

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut policy = CheckpointPolicy::default();
    let mut optimizer: Option<AdamW> = None;
    let mut best: Option<Checkpoint> = None;
    let mut start = 1;

    if let Some(l) = layout.as_ref().filter(|_| opts.resume) {
        if l.state().exists() {
            let text = fs::read_to_string(l.state()).map_err(io_err(&l.state()))?;
            let state: TrainState =
                serde_json::from_str(&text).map_err(|e| TrainError::Resume(format!("bad state file: {e}")))?;
            if state.spec != *spec {
                return Err(TrainError::Resume("training spec differs from the interrupted run".into()));
            }
            let last = Checkpoint::load(&l.last())?;
            if last.spec != *model.spec() {
                return Err(TrainError::Resume("model spec differs from the interrupted run".into()));
            }
            model.load_state_dict(&last.state)?;
            let (opt_file, _) = TensorFile::load(&l.optimizer()).map_err(io_err(&l.optimizer()))?;
            optimizer = Some(AdamW::from_tensor_file(&opt_file, param_group_of)?);
            if state.policy.best_epoch > 0 {
                best = Some(Checkpoint::load(&l.best(state.policy.best_epoch))?);
            }
            start = state.completed_epochs + 1;
            info!("resuming after epoch {}", state.completed_epochs);
            records = state.records;
            policy = state.policy;
        }
    }

    let batches_per_epoch = epoch_batches(train.len(), spec.batch_size, spec.seed, 1).len();
    for epoch in start..=spec.epochs {
        let stage = spec.stage_of(epoch);
        let (stage_first, stage_epochs) = match stage {
            Stage::FrozenBackbone => (1, spec.freeze_epochs),
            Stage::Full => (spec.freeze_epochs + 1, spec.epochs - spec.freeze_epochs),
        };
        model.set_stage(stage);
        let needs_new = match &optimizer {
            None => true,
            Some(o) => (stage == Stage::Full) != o.groups().iter().any(|g| g.name == BACKBONE_GROUP),
        };
        if needs_new {
            optimizer = Some(optimizer_for(stage, spec));
        }
        let opt = optimizer.as_mut().expect("optimizer");
        let total_steps = stage_epochs * batches_per_epoch;

        model.set_mode(Mode::Train);
        let started = Instant::now();
        let batches = epoch_batches(train.len(), spec.batch_size, spec.seed, epoch);
        let (mut loss_sum, mut abs_sum, mut norm_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let (mut lr_head0, mut lr_backbone0) = (0.0, 0.0);
        for (b, idx) in batches.iter().enumerate() {
            let t = (epoch - stage_first) * batches_per_epoch + b;
            let lr_head = cosine_lr(t, total_steps, spec.lr, spec.lr * spec.lr_min_factor)?;
            let lr_backbone = if stage == Stage::Full { lr_head * spec.backbone_lr_mult } else { 0.0 };
            opt.set_lr(HEAD_GROUP, lr_head);
            opt.set_lr(BACKBONE_GROUP, lr_backbone);
            if b == 0 {
                (lr_head0, lr_backbone0) = (lr_head, lr_backbone);
            }
            let samples: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let key = PassKey {
                seed: spec.seed,
                purpose: "train",
                epoch: epoch as u64,
            };
            let (x, y) = build_batch::<TrainError>(corpus, &samples, &transform, key)?;
            model.zero_grad();
            let mut dropout_rng = rng_for(spec.seed, &[tag("dropout"), epoch as u64, b as u64]);
            let pred = model.forward(&x, Some(&mut dropout_rng))?;
            let out = bounded_smooth_l1(&pred, &y, &loss_cfg)?;
            model.backward(&out.grad)?;
            let opt_ref: &AdamW = opt;
            let norm = clip_module_gradients(model, &|n| opt_ref.updates(n), spec.clip_norm)?;
            opt.step(model);
            loss_sum += out.value * samples.len() as f64;
            abs_sum += pred.iter().zip(&y).map(|(p, t)| (p - t).abs()).sum::<f64>();
            norm_sum += norm;
            seen += samples.len();
        }
        let elapsed = started.elapsed().as_secs_f64();

        let (val_loss, val_mae) = validate_with(model, corpus, &val, spec, epoch)?;
        let val_mae_deterministic = if spec.deterministic_val {
            let key = PassKey {
                seed: spec.seed,
                purpose: "val-deterministic",
                epoch: 0,
            };
            Some(predict::<TrainError>(model, corpus, &val, &det_transform, key, spec.eval_batch_size)?.mae())
        } else {
            None
        };

        let record = EpochRecord {
            epoch,
            stage,
            train_loss: loss_sum / seen as f64,
            train_mae: abs_sum / seen as f64,
            val_loss,
            val_mae,
            val_mae_deterministic,
            lr_head: lr_head0,
            lr_backbone: lr_backbone0,
            grad_norm: norm_sum / batches.len() as f64,
            throughput: seen as f64 / elapsed.max(1e-9),
            steps: batches.len(),
        };
        info!(
            "epoch {epoch} {stage:?} train_loss {:.4} val_mae {:.4} lr {:.3e}",
            record.train_loss, record.val_mae, record.lr_head
        );

        if policy.update(epoch, val_mae) {
            let ckpt = model.checkpoint(epoch, "best");
            if let Some(l) = &layout {
                if let Some(prev) = &best {
                    let _ = fs::remove_file(l.best(prev.epoch));
                }
                ckpt.save(&l.best(epoch))?;
            }
            best = Some(ckpt);
        }
        records.push(record.clone());
        if let Some(l) = &layout {
            model.checkpoint(epoch, "last").save(&l.last())?;
            let opt_file = optimizer.as_ref().expect("optimizer").to_tensor_file();
            opt_file.save(&l.optimizer()).map_err(io_err(&l.optimizer()))?;
            let mut log = String::new();
            for r in &records {
                log.push_str(&serde_json::to_string(r).expect("record"));
                log.push('\n');
            }
            write_atomic(&l.log(), log.as_bytes()).map_err(io_err(&l.log()))?;
            let state = TrainState {
                spec: spec.clone(),
                completed_epochs: epoch,
                records: records.clone(),
                policy: policy.clone(),
            };
            let json = serde_json::to_string_pretty(&state).expect("state");
            write_atomic(&l.state(), json.as_bytes()).map_err(io_err(&l.state()))?;
        }
        observer(model, &record);
        if opts.stop_after == Some(epoch) {
            break;
        }
    }

    let best = best.ok_or_else(|| TrainError::Resume("no epoch completed".into()))?;
    model.load_state_dict(&best.state)?;
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome { best, records, policy })
}
