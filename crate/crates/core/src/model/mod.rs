//! The age regressor: MobileNetV3-Large features, global pooling, a small
//! regression head and a sigmoid mapping onto the supported age range.

mod backbone;
mod checkpoint;
mod head;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorKind;
use crate::io::TensorFile;
use crate::nn::{global_avg_pool, global_avg_pool_backward, Module, SlotMut, SlotRef};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub use backbone::{
    make_divisible, BlockConfig, ConvBnAct, InvertedResidual, MobileNetV3Large, SqueezeExcite,
    FEATURE_CHANNELS, LARGE_BLOCKS,
};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use head::{RegressionHead, HEAD_DIMS, INIT_STD, INIT_TRUNCATION_STDS};

pub const BACKBONE_ID: &str = "mobilenet_v3_large";
pub const BACKBONE_PREFIX: &str = "features";
pub const HEAD_PREFIX: &str = "head";
pub const MACS_CONVENTION: &str =
    "one multiply-accumulate per conv/linear MAC (batch norm, activations, pooling, SE gating and residual adds excluded)";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("pretrained weights not found at {0}")]
    PretrainedMissing(PathBuf),
    #[error("pretrained weights do not match the backbone:\n{0}")]
    PretrainedMismatch(WeightReport),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("expected input [n, 3, {expected}, {expected}], got {found:?}")]
    InputShape { expected: usize, found: Vec<usize> },
    #[error("non-finite activation for batch index {index}")]
    NonFinite { index: usize },
    #[error("backward called without a preceding training forward pass")]
    NoForwardCache,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ModelError::InvalidSpec(_) | ModelError::InputShape { .. } => ErrorKind::Config,
            ModelError::PretrainedMissing(_) | ModelError::PretrainedMismatch(_) => ErrorKind::Config,
            ModelError::Checkpoint(_) => ErrorKind::Data,
            ModelError::NonFinite { .. } => ErrorKind::Numerical,
            ModelError::NoForwardCache => ErrorKind::Other,
            ModelError::Io { .. } => ErrorKind::Io,
        }
    }
}

/// Expected-versus-found listing for a weight file that does not fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightReport {
    pub missing: Vec<(String, Vec<usize>)>,
    pub mismatched: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl WeightReport {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty() && self.mismatched.is_empty()
    }
}

impl fmt::Display for WeightReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, shape) in &self.missing {
            writeln!(f, "  missing  {name}: expected {shape:?}")?;
        }
        for (name, want, got) in &self.mismatched {
            writeln!(f, "  shape    {name}: expected {want:?}, found {got:?}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: String,
    pub head_dims: [usize; 4],
    pub dropout: f64,
    pub age_min_total: f64,
    pub age_max_total: f64,
    pub train_min: f64,
    pub train_max: f64,
    pub input_size: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            backbone: BACKBONE_ID.into(),
            head_dims: HEAD_DIMS,
            dropout: 0.2,
            age_min_total: 0.0,
            age_max_total: 116.0,
            train_min: 1.0,
            train_max: 95.0,
            input_size: 224,
        }
    }
}

impl ModelSpec {
    pub fn with_dropout(dropout: f64) -> Self {
        ModelSpec {
            dropout,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.backbone != BACKBONE_ID {
            return bad(format!("unsupported backbone {:?}", self.backbone));
        }
        if self.head_dims != HEAD_DIMS {
            return bad(format!("head_dims must be {HEAD_DIMS:?}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.age_min_total < self.age_max_total) {
            return bad("age_min_total must be below age_max_total".into());
        }
        if !(0.0 <= self.train_min && self.train_min < self.train_max && self.train_max <= self.age_max_total) {
            return bad("need 0 <= train_min < train_max <= age_max_total".into());
        }
        if self.input_size < 32 {
            return bad(format!("input_size {} below 32", self.input_size));
        }
        Ok(())
    }

    pub fn bounded_map(&self) -> BoundedAgeMap {
        BoundedAgeMap::new(self.age_min_total, self.age_max_total)
    }
}

/// `age = min + (max - min) · sigmoid(z)`, evaluated in f64.
///
/// The sigmoid is held inside `[1e-9, 1 - 1e-9]` so the result stays strictly
/// inside the open interval even when `z` saturates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundedAgeMap {
    pub min: f64,
    pub max: f64,
}

pub const SIGMOID_FLOOR: f64 = 1e-9;

impl BoundedAgeMap {
    pub fn new(min: f64, max: f64) -> Self {
        BoundedAgeMap { min, max }
    }

    pub fn sigmoid(z: f64) -> f64 {
        let s = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        s.clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR)
    }

    pub fn apply(&self, z: f64) -> f64 {
        self.min + (self.max - self.min) * Self::sigmoid(z)
    }

    /// `d age / d z`.
    pub fn derivative(&self, z: f64) -> f64 {
        let s = Self::sigmoid(z);
        (self.max - self.min) * s * (1.0 - s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    FrozenBackbone,
    Full,
}

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Pretrained {
    /// A tensor file holding `features.*` entries; other entries are ignored.
    File(PathBuf),
    /// He-normal initialization from a seed with batch-norm statistics
    /// calibrated on noise, for tests and offline runs.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub params: u64,
    pub backbone_params: u64,
    pub head_params: u64,
    pub mult_adds: u64,
    pub backbone_mult_adds: u64,
    pub head_mult_adds: u64,
    pub input_size: usize,
}

struct ForwardCache {
    z: Vec<f64>,
    feat_hw: (usize, usize),
}

pub struct AgeModel {
    spec: ModelSpec,
    pub backbone: MobileNetV3Large,
    pub head: RegressionHead,
    mode: Mode,
    stage: Stage,
    map: BoundedAgeMap,
    cache: Option<ForwardCache>,
}

impl Clone for AgeModel {
    fn clone(&self) -> Self {
        AgeModel {
            spec: self.spec.clone(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            mode: self.mode,
            stage: self.stage,
            map: self.map,
            cache: None,
        }
    }
}

impl fmt::Debug for AgeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgeModel")
            .field("spec", &self.spec)
            .field("mode", &self.mode)
            .field("stage", &self.stage)
            .finish()
    }
}

impl AgeModel {
    /// Builds the model with backbone weights from `pretrained` and a freshly
    /// initialized head seeded by `seed`. Starts in EVAL mode, FULL stage.
    pub fn build(spec: ModelSpec, pretrained: &Pretrained, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut backbone = MobileNetV3Large::new();
        match pretrained {
            Pretrained::Random { seed } => {
                let mut rng = rng_for(*seed, &[1]);
                backbone.init_random(&mut rng);
                backbone.calibrate_batch_norm(&calibration_batch(spec.input_size, &mut rng));
            }
            Pretrained::File(path) => {
                if !path.exists() {
                    return Err(ModelError::PretrainedMissing(path.clone()));
                }
                let (file, _) = TensorFile::load(path).map_err(|source| ModelError::Io {
                    path: path.clone(),
                    source,
                })?;
                load_into(&mut backbone, BACKBONE_PREFIX, &file.tensors)
                    .map_err(ModelError::PretrainedMismatch)?;
            }
        }
        let mut head = RegressionHead::new(spec.dropout);
        head.init(&mut rng_for(seed, &[2]));
        Ok(AgeModel {
            map: spec.bounded_map(),
            spec,
            backbone,
            head,
            mode: Mode::Eval,
            stage: Stage::Full,
            cache: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn bounded_map(&self) -> BoundedAgeMap {
        self.map
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.clear_cache();
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
        self.clear_cache();
    }

    fn clear_cache(&mut self) {
        self.cache = None;
        self.backbone.clear_cache();
        self.head.clear_cache();
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), ModelError> {
        let s = self.spec.input_size;
        let shape = batch.shape();
        if shape.len() != 4 || shape[0] == 0 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(ModelError::InputShape {
                expected: s,
                found: shape.to_vec(),
            });
        }
        Ok(())
    }

    fn backbone_trains(&self) -> bool {
        self.mode == Mode::Train && self.stage == Stage::Full
    }

    /// Pooled 960-d backbone features under the current mode and stage,
    /// without keeping anything for a backward pass.
    pub fn features(&mut self, batch: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(batch)?;
        let bn_batch = self.backbone_trains();
        let feats = self.backbone.forward(batch, bn_batch, false);
        Ok(global_avg_pool(&feats))
    }

    /// Raw head scalars `z` followed by the bounded mapping. In TRAIN mode
    /// activations are cached for [`AgeModel::backward`] and dropout draws
    /// from `rng` (no dropout when `rng` is `None`).
    pub fn forward(&mut self, batch: &Tensor, rng: Option<&mut dyn RngCore>) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward_raw(batch, rng)?.into_iter().map(|z| self.map.apply(z)).collect())
    }

    pub fn forward_raw(&mut self, batch: &Tensor, rng: Option<&mut dyn RngCore>) -> Result<Vec<f64>, ModelError> {
        self.check_input(batch)?;
        self.cache = None;
        let per = batch.len() / batch.shape()[0];
        if let Some(i) = batch.data().chunks(per).position(|c| !c.iter().all(|v| v.is_finite())) {
            return Err(ModelError::NonFinite { index: i });
        }
        let train = self.mode == Mode::Train;
        let backbone_trains = self.backbone_trains();
        let feats = self.backbone.forward(batch, backbone_trains, backbone_trains);
        let (_, _, h, w) = feats.dims4();
        let pooled = global_avg_pool(&feats);
        drop(feats);
        let (n, c) = pooled.dims2();
        for i in 0..n {
            if !pooled.data()[i * c..(i + 1) * c].iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite { index: i });
            }
        }
        let rng = if train { rng } else { None };
        let z = self.head.forward(&pooled, rng, train);
        let z: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { index: i });
        }
        if train {
            self.cache = Some(ForwardCache {
                z: z.clone(),
                feat_hw: (h, w),
            });
        }
        Ok(z)
    }

    /// Accumulates gradients given `d loss / d age` for each sample of the
    /// last TRAIN forward. In FROZEN_BACKBONE stage only the head receives
    /// gradients.
    pub fn backward(&mut self, d_ages: &[f64]) -> Result<(), ModelError> {
        let cache = self.cache.take().ok_or(ModelError::NoForwardCache)?;
        assert_eq!(d_ages.len(), cache.z.len(), "gradient length");
        let dz: Vec<f32> = d_ages
            .iter()
            .zip(&cache.z)
            .map(|(&g, &z)| (g * self.map.derivative(z)) as f32)
            .collect();
        let dz = Tensor::from_vec(&[dz.len(), 1], dz).expect("shape");
        let dpooled = self.head.backward(&dz);
        if self.backbone_trains() {
            let dfeat = global_avg_pool_backward(&dpooled, cache.feat_hw.0, cache.feat_hw.1);
            self.backbone.backward(dfeat);
        }
        Ok(())
    }

    pub fn accounting(&self) -> Accounting {
        let s = self.spec.input_size;
        let mut backbone_params = 0u64;
        self.backbone.visit("", &mut |_, slot| {
            if let SlotRef::Param(p) = slot {
                backbone_params += p.len() as u64;
            }
        });
        let head_params = self.head.param_count() as u64;
        let backbone_mult_adds = self.backbone.mult_adds(s, s);
        let head_mult_adds = self.head.mult_adds();
        Accounting {
            params: backbone_params + head_params,
            backbone_params,
            head_params,
            mult_adds: backbone_mult_adds + head_mult_adds,
            backbone_mult_adds,
            head_mult_adds,
            input_size: s,
        }
    }

    /// Every parameter and buffer by name.
    pub fn state_dict(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, slot| {
            out.insert(name.to_string(), slot.tensor().clone());
        });
        out
    }

    /// Requires every name and shape to match.
    pub fn load_state_dict(&mut self, state: &BTreeMap<String, Tensor>) -> Result<(), ModelError> {
        load_into(self, "", state).map_err(|r| ModelError::Checkpoint(format!("state does not match model:\n{r}")))
    }

    pub fn checkpoint(&self, epoch: usize, tag: &str) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            epoch,
            tag: tag.to_string(),
            state: self.state_dict(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let mut model = AgeModel::build(ckpt.spec.clone(), &Pretrained::Random { seed: 0 }, 0)?;
        model.load_state_dict(&ckpt.state)?;
        Ok(model)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Writes the backbone weights in the layout [`Pretrained::File`] reads.
    pub fn save_backbone(&self, path: &Path) -> Result<(), ModelError> {
        let mut file = TensorFile::default();
        self.backbone.visit(BACKBONE_PREFIX, &mut |name, slot| {
            file.tensors.insert(name.to_string(), slot.tensor().clone());
        });
        file.save(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Standard-normal images, i.e. inputs with the moments the normalization
/// step targets.
fn calibration_batch(side: usize, rng: &mut dyn RngCore) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n = CALIBRATION_BATCH * 3 * side * side;
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(&[CALIBRATION_BATCH, 3, side, side], data).expect("shape")
}

const CALIBRATION_BATCH: usize = 4;

pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("features.")
}

fn load_into(
    module: &mut dyn Module,
    prefix: &str,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<(), WeightReport> {
    let mut report = WeightReport::default();
    module.visit(prefix, &mut |name, slot| {
        let want = slot.tensor().shape().to_vec();
        match tensors.get(name) {
            None => report.missing.push((name.to_string(), want)),
            Some(t) if t.shape() != want.as_slice() => {
                report.mismatched.push((name.to_string(), want, t.shape().to_vec()))
            }
            Some(_) => {}
        }
    });
    if !report.is_ok() {
        return Err(report);
    }
    module.visit_mut(prefix, &mut |name, mut slot| {
        *slot.tensor_mut() = tensors[name].clone();
    });
    Ok(())
}

impl Module for AgeModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.backbone.visit(&crate::nn::join(prefix, BACKBONE_PREFIX), f);
        self.head.visit(&crate::nn::join(prefix, HEAD_PREFIX), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.backbone.visit_mut(&crate::nn::join(prefix, BACKBONE_PREFIX), f);
        self.head.visit_mut(&crate::nn::join(prefix, HEAD_PREFIX), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            input_size: 32,
            dropout: 0.0,
            ..ModelSpec::default()
        }
    }

    fn batch(n: usize, side: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * 3 * side * side;
        Tensor::from_vec(&[n, 3, side, side], (0..len).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap()
    }

    #[test]
    fn midpoint_and_saturation() {
        let m = BoundedAgeMap::new(0.0, 116.0);
        assert_eq!(m.apply(0.0), 58.0);
        assert!(m.apply(1e6) < 116.0 && m.apply(1e6) > 115.99);
        assert!(m.apply(-1e6) > 0.0 && m.apply(-1e6) < 0.01);
    }

    #[test]
    fn dropout_probability_is_reported() {
        let m = AgeModel::build(ModelSpec::with_dropout(0.18074), &Pretrained::Random { seed: 1 }, 1).unwrap();
        assert_eq!(m.head.dropout_p(), (0.18074, 0.18074));
    }

    #[test]
    fn head_biases_start_at_zero_and_weights_are_truncated() {
        let m = AgeModel::build(ModelSpec::default(), &Pretrained::Random { seed: 1 }, 5).unwrap();
        for fc in [&m.head.fc1, &m.head.fc2, &m.head.out] {
            assert!(fc.bias.value.data().iter().all(|&b| b == 0.0));
            assert!(fc.weight.value.data().iter().all(|w| w.abs() <= 0.04 + 1e-7));
        }
    }

    #[test]
    fn output_shape_and_range() {
        let mut m = AgeModel::build(small_spec(), &Pretrained::Random { seed: 1 }, 1).unwrap();
        let ages = m.forward(&batch(4, 32, 0), None).unwrap();
        assert_eq!(ages.len(), 4);
        assert!(ages.iter().all(|&a| a > 0.0 && a < 116.0));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let mut m = AgeModel::build(small_spec(), &Pretrained::Random { seed: 1 }, 1).unwrap();
        assert!(matches!(m.forward(&batch(1, 64, 0), None), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn eval_forward_is_bit_identical() {
        let mut m = AgeModel::build(small_spec(), &Pretrained::Random { seed: 2 }, 2).unwrap();
        let x = batch(2, 32, 1);
        let a = m.forward(&x, None).unwrap();
        let b = m.forward(&x, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nan_input_reports_batch_index() {
        let mut m = AgeModel::build(small_spec(), &Pretrained::Random { seed: 2 }, 2).unwrap();
        let mut x = batch(3, 32, 1);
        let plane = 3 * 32 * 32;
        x.data_mut()[2 * plane + 5] = f32::NAN;
        match m.forward(&x, None) {
            Err(ModelError::NonFinite { index }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frozen_stage_leaves_backbone_gradients_zero() {
        let mut m = AgeModel::build(small_spec(), &Pretrained::Random { seed: 3 }, 3).unwrap();
        m.set_mode(Mode::Train);
        m.set_stage(Stage::FrozenBackbone);
        let x = batch(2, 32, 4);
        let f1 = m.features(&x).unwrap();
        m.forward(&x, None).unwrap();
        m.backward(&[1.0, -1.0]).unwrap();
        let f2 = m.features(&x).unwrap();
        assert_eq!(f1, f2);
        let mut backbone_grad = 0.0f32;
        let mut head_grad = 0.0f32;
        m.visit("", &mut |name, slot| {
            if let SlotRef::Param(p) = slot {
                let s: f32 = p.grad.iter().map(|g| g.abs()).sum();
                if is_backbone_param(name) {
                    backbone_grad += s;
                } else {
                    head_grad += s;
                }
            }
        });
        assert_eq!(backbone_grad, 0.0);
        assert!(head_grad > 0.0);
    }

    #[test]
    fn full_stage_propagates_into_backbone() {
        let mut m = AgeModel::build(small_spec(), &Pretrained::Random { seed: 3 }, 3).unwrap();
        m.set_mode(Mode::Train);
        m.set_stage(Stage::Full);
        m.forward(&batch(2, 32, 4), None).unwrap();
        m.backward(&[1.0, -1.0]).unwrap();
        let mut g = 0.0f32;
        m.backbone.visit("", &mut |_, slot| {
            if let SlotRef::Param(p) = slot {
                g += p.grad.iter().map(|v| v.abs()).sum::<f32>();
            }
        });
        assert!(g > 0.0);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut m = AgeModel::build(small_spec(), &Pretrained::Random { seed: 7 }, 7).unwrap();
        // a larger head output scale makes the probe less sensitive to f32 noise
        m.head.out.weight.value.data_mut().iter_mut().for_each(|w| *w *= 20.0);
        m.set_mode(Mode::Train);
        m.set_stage(Stage::FrozenBackbone);
        let x = batch(2, 32, 9);
        m.forward(&x, None).unwrap();
        m.backward(&[1.0, 1.0]).unwrap();
        let analytic = m.head.out.bias.grad[0] as f64;
        let eps = 1e-2f32;
        let eval = |delta: f32| {
            let mut probe = m.clone();
            probe.head.out.bias.value.data_mut()[0] += delta;
            probe.forward(&x, None).unwrap().iter().sum::<f64>()
        };
        let fd = (eval(eps) - eval(-eps)) / (2.0 * eps as f64);
        assert!((fd - analytic).abs() < 1e-3 * analytic.abs().max(1.0), "{fd} vs {analytic}");
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let mut m = AgeModel::build(small_spec(), &Pretrained::Random { seed: 5 }, 5).unwrap();
        m.head.out.weight.value.data_mut().iter_mut().for_each(|w| *w *= 20.0);
        m.set_mode(Mode::Train);
        m.set_stage(Stage::Full);
        let x = batch(3, 32, 2);
        let weights = [0.3, -0.7, 1.1];
        m.forward(&x, None).unwrap();
        m.backward(&weights).unwrap();
        let probes = [
            "features.0.0.weight",
            "features.0.1.weight",
            "features.4.block.1.0.weight",
            "features.4.block.2.fc1.weight",
            "features.12.block.3.1.bias",
            "features.16.0.weight",
        ];
        let mut grads = BTreeMap::new();
        m.visit("", &mut |name, slot| {
            if let SlotRef::Param(p) = slot {
                if probes.contains(&name) {
                    grads.insert(name.to_string(), p.grad.clone());
                }
            }
        });
        for name in probes {
            let g = &grads[name];
            let i = g
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .unwrap()
                .0;
            // the random backbone is sharply curved; larger steps leave the linear regime
            let eps = 1e-3f32;
            let eval = |delta: f32| {
                let mut probe = m.clone();
                probe.visit_mut("", &mut |n, mut slot| {
                    if n == name {
                        slot.tensor_mut().data_mut()[i] += delta;
                    }
                });
                let ages = probe.forward(&x, None).unwrap();
                ages.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps as f64);
            let an = g[i] as f64;
            assert!((fd - an).abs() < 0.05 * an.abs() + 0.05, "{name}[{i}]: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn missing_pretrained_file_is_reported() {
        let err = AgeModel::build(ModelSpec::default(), &Pretrained::File("/nonexistent/w.safetensors".into()), 0)
            .unwrap_err();
        assert!(matches!(err, ModelError::PretrainedMissing(_)));
    }

    #[test]
    fn mismatched_pretrained_file_lists_expected_and_found() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let m = AgeModel::build(ModelSpec::default(), &Pretrained::Random { seed: 1 }, 0).unwrap();
        m.save_backbone(&path).unwrap();
        let (mut file, _) = TensorFile::load(&path).unwrap();
        file.tensors.remove("features.16.0.weight");
        file.tensors.insert("features.0.0.weight".into(), Tensor::zeros(&[16, 3, 5, 5]));
        file.save(&path).unwrap();
        match AgeModel::build(ModelSpec::default(), &Pretrained::File(path), 0) {
            Err(ModelError::PretrainedMismatch(r)) => {
                assert_eq!(r.missing, vec![("features.16.0.weight".to_string(), vec![960, 160, 1, 1])]);
                assert_eq!(r.mismatched[0].1, vec![16, 3, 3, 3]);
                assert_eq!(r.mismatched[0].2, vec![16, 3, 5, 5]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pretrained_round_trip_reproduces_backbone() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let a = AgeModel::build(small_spec(), &Pretrained::Random { seed: 11 }, 0).unwrap();
        a.save_backbone(&path).unwrap();
        let b = AgeModel::build(small_spec(), &Pretrained::File(path), 0).unwrap();
        assert_eq!(a.state_dict(), b.state_dict());
    }
}
