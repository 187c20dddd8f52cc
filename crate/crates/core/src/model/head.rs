use rand::{Rng, RngCore};

use crate::nn::{join, truncated_normal, Activation, ActivationKind, Dropout, Linear, Module, SlotMut, SlotRef};
use crate::tensor::Tensor;

pub const HEAD_DIMS: [usize; 4] = [960, 256, 64, 1];
pub const INIT_STD: f64 = 0.02;
pub const INIT_TRUNCATION_STDS: f64 = 2.0;

/// `960 → 256 → 64 → 1` with hard-swish and dropout after each hidden layer.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub fc1: Linear,
    pub act1: Activation,
    pub drop1: Dropout,
    pub fc2: Linear,
    pub act2: Activation,
    pub drop2: Dropout,
    pub out: Linear,
}

impl RegressionHead {
    pub fn new(dropout: f64) -> Self {
        RegressionHead {
            fc1: Linear::new(HEAD_DIMS[0], HEAD_DIMS[1]),
            act1: Activation::new(ActivationKind::Hardswish),
            drop1: Dropout::new(dropout),
            fc2: Linear::new(HEAD_DIMS[1], HEAD_DIMS[2]),
            act2: Activation::new(ActivationKind::Hardswish),
            drop2: Dropout::new(dropout),
            out: Linear::new(HEAD_DIMS[2], HEAD_DIMS[3]),
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for fc in [&mut self.fc1, &mut self.fc2, &mut self.out] {
            let shape = fc.weight.value.shape().to_vec();
            let w = truncated_normal(fc.weight.len(), INIT_STD, INIT_TRUNCATION_STDS, rng);
            fc.weight.value = Tensor::from_vec(&shape, w).expect("shape");
            fc.bias.value = Tensor::zeros(&[fc.out_features]);
        }
    }

    pub fn dropout_p(&self) -> (f64, f64) {
        (self.drop1.p, self.drop2.p)
    }

    /// `[n, 960] -> [n, 1]`. Dropout is active only when `rng` is given.
    pub fn forward(&mut self, x: &Tensor, mut rng: Option<&mut dyn RngCore>, keep: bool) -> Tensor {
        let h = self.fc1.forward(x, keep);
        let h = self.act1.forward_owned(h, keep);
        let h = self.drop1.forward(h, rng.as_deref_mut());
        let h = self.fc2.forward(&h, keep);
        let h = self.act2.forward_owned(h, keep);
        let h = self.drop2.forward(h, rng.as_deref_mut());
        self.out.forward(&h, keep)
    }

    /// Accumulates head gradients and returns the gradient w.r.t. the
    /// pooled features.
    pub fn backward(&mut self, dz: &Tensor) -> Tensor {
        let d = self.out.backward(dz, true).expect("dx");
        let d = self.drop2.backward(d);
        let d = self.act2.backward(&d);
        let d = self.fc2.backward(&d, true).expect("dx");
        let d = self.drop1.backward(d);
        let d = self.act1.backward(&d);
        self.fc1.backward(&d, true).expect("dx")
    }

    pub fn clear_cache(&mut self) {
        for fc in [&mut self.fc1, &mut self.fc2, &mut self.out] {
            fc.clear_cache();
        }
        self.act1.clear_cache();
        self.act2.clear_cache();
    }

    pub fn mult_adds(&self) -> u64 {
        self.fc1.mult_adds() + self.fc2.mult_adds() + self.out.mult_adds()
    }
}

impl Module for RegressionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}
