//! MobileNetV3-Large feature extractor (everything before the classifier).
//!
//! Parameter names follow the common `features.<i>...` layout so that
//! converted ImageNet weights load without renaming.

use rand::Rng;

use crate::nn::{
    global_avg_pool, join, kaiming_normal_fan_out, Activation, ActivationKind, BatchNorm2d,
    Conv2d, Linear, Module, SlotMut, SlotRef,
};
use crate::tensor::Tensor;

pub const FEATURE_CHANNELS: usize = 960;
const BN_EPS: f32 = 1e-3;
const BN_MOMENTUM: f32 = 0.01;

/// One inverted-residual stage: `(in, kernel, expanded, out, squeeze-excite, hardswish, stride)`.
#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub input: usize,
    pub kernel: usize,
    pub expanded: usize,
    pub out: usize,
    pub use_se: bool,
    pub hardswish: bool,
    pub stride: usize,
}

const fn block(
    input: usize,
    kernel: usize,
    expanded: usize,
    out: usize,
    use_se: bool,
    hardswish: bool,
    stride: usize,
) -> BlockConfig {
    BlockConfig {
        input,
        kernel,
        expanded,
        out,
        use_se,
        hardswish,
        stride,
    }
}

pub const LARGE_BLOCKS: [BlockConfig; 15] = [
    block(16, 3, 16, 16, false, false, 1),
    block(16, 3, 64, 24, false, false, 2),
    block(24, 3, 72, 24, false, false, 1),
    block(24, 5, 72, 40, true, false, 2),
    block(40, 5, 120, 40, true, false, 1),
    block(40, 5, 120, 40, true, false, 1),
    block(40, 3, 240, 80, false, true, 2),
    block(80, 3, 200, 80, false, true, 1),
    block(80, 3, 184, 80, false, true, 1),
    block(80, 3, 184, 80, false, true, 1),
    block(80, 3, 480, 112, true, true, 1),
    block(112, 3, 672, 112, true, true, 1),
    block(112, 5, 672, 160, true, true, 2),
    block(160, 5, 960, 160, true, true, 1),
    block(160, 5, 960, 160, true, true, 1),
];

/// Rounds to the nearest multiple of `divisor`, never dropping below 90% of
/// the input.
pub fn make_divisible(v: usize, divisor: usize) -> usize {
    let mut new_v = ((v + divisor / 2) / divisor * divisor).max(divisor);
    if (new_v as f64) < 0.9 * v as f64 {
        new_v += divisor;
    }
    new_v
}

#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Option<Activation>,
}

impl ConvBnAct {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, groups: usize, act: Option<ActivationKind>) -> Self {
        ConvBnAct {
            conv: Conv2d::new(cin, cout, k, stride, groups, false),
            bn: BatchNorm2d::new(cout, BN_EPS, BN_MOMENTUM),
            act: act.map(Activation::new),
        }
    }

    fn forward(&mut self, x: &Tensor, bn_batch: bool, keep: bool) -> Tensor {
        let y = self.conv.forward(x, keep);
        let y = self.bn.forward(&y, bn_batch, keep);
        match &mut self.act {
            Some(a) => a.forward_owned(y, keep),
            None => y,
        }
    }

    fn backward(&mut self, dy: Tensor, need_dx: bool) -> Option<Tensor> {
        let dy = match &mut self.act {
            Some(a) => a.backward(&dy),
            None => dy,
        };
        let dy = self.bn.backward(&dy);
        self.conv.backward(&dy, need_dx)
    }

    fn clear_cache(&mut self) {
        self.conv.clear_cache();
        self.bn.clear_cache();
        if let Some(a) = &mut self.act {
            a.clear_cache();
        }
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let shape = self.conv.weight.value.shape().to_vec();
        self.conv.weight.value = Tensor::from_vec(&shape, kaiming_normal_fan_out(&shape, rng)).expect("shape");
    }
}

impl Module for ConvBnAct {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.conv.visit(&join(prefix, "0"), f);
        self.bn.visit(&join(prefix, "1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.conv.visit_mut(&join(prefix, "0"), f);
        self.bn.visit_mut(&join(prefix, "1"), f);
    }
}

struct SeCache {
    x: Tensor,
    hidden: Tensor,
    gate_pre: Tensor,
    gate: Tensor,
}

/// Squeeze-and-excitation: channel gates from pooled features.
pub struct SqueezeExcite {
    pub channels: usize,
    pub squeeze: usize,
    pub fc1: Linear,
    pub fc2: Linear,
    cache: Option<SeCache>,
}

impl Clone for SqueezeExcite {
    fn clone(&self) -> Self {
        SqueezeExcite {
            channels: self.channels,
            squeeze: self.squeeze,
            fc1: self.fc1.clone(),
            fc2: self.fc2.clone(),
            cache: None,
        }
    }
}

impl std::fmt::Debug for SqueezeExcite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SqueezeExcite({} -> {})", self.channels, self.squeeze)
    }
}

impl SqueezeExcite {
    fn new(channels: usize) -> Self {
        let squeeze = make_divisible(channels / 4, 8);
        SqueezeExcite {
            channels,
            squeeze,
            fc1: Linear::conv1x1(channels, squeeze),
            fc2: Linear::conv1x1(squeeze, channels),
            cache: None,
        }
    }

    fn forward(&mut self, x: Tensor, keep: bool) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let pooled = global_avg_pool(&x);
        let hidden = self.fc1.forward(&pooled, keep);
        let mut hr = hidden.clone();
        hr.data_mut().iter_mut().for_each(|v| *v = ActivationKind::Relu.apply(*v));
        let gate_pre = self.fc2.forward(&hr, keep);
        let mut gate = gate_pre.clone();
        gate.data_mut()
            .iter_mut()
            .for_each(|v| *v = ActivationKind::Hardsigmoid.apply(*v));
        let mut y = x.clone();
        let plane = h * w;
        for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let g = gate.data()[i];
            chunk.iter_mut().for_each(|v| *v *= g);
        }
        debug_assert_eq!(gate.len(), n * c);
        if keep {
            self.cache = Some(SeCache {
                x,
                hidden,
                gate_pre,
                gate,
            });
        }
        y
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("squeeze-excite backward without cache");
        let (n, c, h, w) = dy.dims4();
        let plane = h * w;
        let mut dx = dy.clone();
        let mut dgate = Tensor::zeros(&[n, c]);
        for i in 0..n * c {
            let g = cache.gate.data()[i];
            let dyc = &dy.data()[i * plane..(i + 1) * plane];
            let xc = &cache.x.data()[i * plane..(i + 1) * plane];
            dgate.data_mut()[i] = dyc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
            dx.data_mut()[i * plane..(i + 1) * plane]
                .iter_mut()
                .for_each(|v| *v *= g);
        }
        for (d, &pre) in dgate.data_mut().iter_mut().zip(cache.gate_pre.data()) {
            *d *= ActivationKind::Hardsigmoid.derivative(pre);
        }
        let mut dh = self.fc2.backward(&dgate, true).expect("dx requested");
        for (d, &pre) in dh.data_mut().iter_mut().zip(cache.hidden.data()) {
            *d *= ActivationKind::Relu.derivative(pre);
        }
        let dpooled = self.fc1.backward(&dh, true).expect("dx requested");
        for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
            let g = dpooled.data()[i] / plane as f32;
            chunk.iter_mut().for_each(|v| *v += g);
        }
        dx
    }

    fn clear_cache(&mut self) {
        self.cache = None;
        self.fc1.clear_cache();
        self.fc2.clear_cache();
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for fc in [&mut self.fc1, &mut self.fc2] {
            let shape = fc.weight.value.shape().to_vec();
            fc.weight.value = Tensor::from_vec(&shape, kaiming_normal_fan_out(&shape, rng)).expect("shape");
        }
    }

    pub fn mult_adds(&self) -> u64 {
        self.fc1.mult_adds() + self.fc2.mult_adds()
    }
}

impl Module for SqueezeExcite {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct InvertedResidual {
    pub config: BlockConfig,
    pub expand: Option<ConvBnAct>,
    pub depthwise: ConvBnAct,
    pub se: Option<SqueezeExcite>,
    pub project: ConvBnAct,
}

impl InvertedResidual {
    fn new(cfg: BlockConfig) -> Self {
        let act = if cfg.hardswish {
            ActivationKind::Hardswish
        } else {
            ActivationKind::Relu
        };
        InvertedResidual {
            config: cfg,
            expand: (cfg.expanded != cfg.input)
                .then(|| ConvBnAct::new(cfg.input, cfg.expanded, 1, 1, 1, Some(act))),
            depthwise: ConvBnAct::new(cfg.expanded, cfg.expanded, cfg.kernel, cfg.stride, cfg.expanded, Some(act)),
            se: cfg.use_se.then(|| SqueezeExcite::new(cfg.expanded)),
            project: ConvBnAct::new(cfg.expanded, cfg.out, 1, 1, 1, None),
        }
    }

    pub fn residual(&self) -> bool {
        self.config.stride == 1 && self.config.input == self.config.out
    }

    fn forward(&mut self, x: &Tensor, bn_batch: bool, keep: bool) -> Tensor {
        let mut y = match &mut self.expand {
            Some(e) => e.forward(x, bn_batch, keep),
            None => x.clone(),
        };
        y = self.depthwise.forward(&y, bn_batch, keep);
        if let Some(se) = &mut self.se {
            y = se.forward(y, keep);
        }
        let mut y = self.project.forward(&y, bn_batch, keep);
        if self.residual() {
            for (a, b) in y.data_mut().iter_mut().zip(x.data()) {
                *a += b;
            }
        }
        y
    }

    fn backward(&mut self, dy: Tensor) -> Tensor {
        let residual = self.residual().then(|| dy.clone());
        let mut d = self.project.backward(dy, true).expect("dx");
        if let Some(se) = &mut self.se {
            d = se.backward(&d);
        }
        d = self.depthwise.backward(d, true).expect("dx");
        if let Some(e) = &mut self.expand {
            d = e.backward(d, true).expect("dx");
        }
        if let Some(r) = residual {
            for (a, b) in d.data_mut().iter_mut().zip(r.data()) {
                *a += b;
            }
        }
        d
    }

    fn clear_cache(&mut self) {
        if let Some(e) = &mut self.expand {
            e.clear_cache();
        }
        self.depthwise.clear_cache();
        if let Some(se) = &mut self.se {
            se.clear_cache();
        }
        self.project.clear_cache();
    }

    fn parts_mut(&mut self) -> Vec<&mut ConvBnAct> {
        let mut v: Vec<&mut ConvBnAct> = Vec::new();
        if let Some(e) = &mut self.expand {
            v.push(e);
        }
        v.push(&mut self.depthwise);
        v.push(&mut self.project);
        v
    }
}

impl Module for InvertedResidual {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        let mut idx = 0;
        let mut name = || {
            let n = join(prefix, &format!("block.{idx}"));
            idx += 1;
            n
        };
        if let Some(e) = &self.expand {
            e.visit(&name(), f);
        }
        self.depthwise.visit(&name(), f);
        if let Some(se) = &self.se {
            se.visit(&name(), f);
        }
        self.project.visit(&name(), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        let mut idx = 0;
        let mut name = || {
            let n = join(prefix, &format!("block.{idx}"));
            idx += 1;
            n
        };
        if let Some(e) = &mut self.expand {
            e.visit_mut(&name(), f);
        }
        self.depthwise.visit_mut(&name(), f);
        if let Some(se) = &mut self.se {
            se.visit_mut(&name(), f);
        }
        self.project.visit_mut(&name(), f);
    }
}

/// Stem convolution, fifteen inverted-residual blocks and the final 1×1
/// expansion to 960 channels.
#[derive(Debug, Clone)]
pub struct MobileNetV3Large {
    pub stem: ConvBnAct,
    pub blocks: Vec<InvertedResidual>,
    pub last: ConvBnAct,
}

impl Default for MobileNetV3Large {
    fn default() -> Self {
        Self::new()
    }
}

impl MobileNetV3Large {
    pub fn new() -> Self {
        MobileNetV3Large {
            stem: ConvBnAct::new(3, 16, 3, 2, 1, Some(ActivationKind::Hardswish)),
            blocks: LARGE_BLOCKS.iter().map(|&c| InvertedResidual::new(c)).collect(),
            last: ConvBnAct::new(160, FEATURE_CHANNELS, 1, 1, 1, Some(ActivationKind::Hardswish)),
        }
    }

    /// He-normal conv weights, unit/zero batch-norm affine, zero biases.
    pub fn init_random<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.stem.init(rng);
        for b in &mut self.blocks {
            for part in b.parts_mut() {
                part.init(rng);
            }
            if let Some(se) = &mut b.se {
                se.init(rng);
            }
        }
        self.last.init(rng);
    }

    /// Sets every batch-norm running statistic to the moments of `x` as it
    /// flows through the network, replacing the identity statistics of a
    /// fresh initialization.
    pub fn calibrate_batch_norm(&mut self, x: &Tensor) {
        let mut momenta = Vec::new();
        self.visit_batch_norms(&mut |bn| {
            momenta.push(bn.momentum);
            bn.momentum = 1.0;
        });
        self.forward(x, true, false);
        let mut it = momenta.into_iter();
        self.visit_batch_norms(&mut |bn| bn.momentum = it.next().expect("same layers"));
    }

    fn visit_batch_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        f(&mut self.stem.bn);
        for b in &mut self.blocks {
            for part in b.parts_mut() {
                f(&mut part.bn);
            }
        }
        f(&mut self.last.bn);
    }

    /// `[n, 3, H, W] -> [n, 960, H/32, W/32]` (rounded up per stride).
    pub fn forward(&mut self, x: &Tensor, bn_batch: bool, keep: bool) -> Tensor {
        let mut y = self.stem.forward(x, bn_batch, keep);
        for b in &mut self.blocks {
            y = b.forward(&y, bn_batch, keep);
        }
        self.last.forward(&y, bn_batch, keep)
    }

    /// Accumulates parameter gradients from the feature-map gradient.
    pub fn backward(&mut self, dy: Tensor) {
        let mut d = self.last.backward(dy, true).expect("dx");
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(d);
        }
        self.stem.backward(d, false);
    }

    pub fn clear_cache(&mut self) {
        self.stem.clear_cache();
        for b in &mut self.blocks {
            b.clear_cache();
        }
        self.last.clear_cache();
    }

    /// Multiply-accumulates of every convolution and squeeze-excite linear
    /// layer for one `h × w` image.
    pub fn mult_adds(&self, h: usize, w: usize) -> u64 {
        let mut total = self.stem.conv.mult_adds(h, w);
        let (mut h, mut w) = self.stem.conv.output_hw(h, w);
        for b in &self.blocks {
            if let Some(e) = &b.expand {
                total += e.conv.mult_adds(h, w);
            }
            total += b.depthwise.conv.mult_adds(h, w);
            (h, w) = b.depthwise.conv.output_hw(h, w);
            if let Some(se) = &b.se {
                total += se.mult_adds();
            }
            total += b.project.conv.mult_adds(h, w);
        }
        total + self.last.conv.mult_adds(h, w)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (mut h, mut w) = self.stem.conv.output_hw(h, w);
        for b in &self.blocks {
            (h, w) = b.depthwise.conv.output_hw(h, w);
        }
        (h, w)
    }
}

impl Module for MobileNetV3Large {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.stem.visit(&join(prefix, "0"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &(i + 1).to_string()), f);
        }
        self.last.visit(&join(prefix, &(self.blocks.len() + 1).to_string()), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.stem.visit_mut(&join(prefix, "0"), f);
        let n = self.blocks.len();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &(i + 1).to_string()), f);
        }
        self.last.visit_mut(&join(prefix, &(n + 1).to_string()), f);
    }
}
