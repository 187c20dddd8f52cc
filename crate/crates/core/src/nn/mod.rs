//! A small CPU neural-network engine: layers with explicit forward/backward
//! passes and per-layer activation caches.
//!
//! Each layer caches what its backward pass needs during `forward` when asked
//! to (`keep = true`) and accumulates parameter gradients into [`Param::grad`]
//! during `backward`. Nothing here allocates a graph; the model wires the
//! backward calls in reverse order itself.

mod init;
mod layers;

pub use init::{kaiming_normal_fan_out, truncated_normal};
pub use layers::{
    global_avg_pool, global_avg_pool_backward, Activation, ActivationKind, BatchNorm2d, Conv2d,
    Dropout, Linear,
};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// How a parameter participates in optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    NormWeight,
    NormBias,
}

impl ParamRole {
    /// Decoupled weight decay applies to conv/linear weights only.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f32>,
    pub role: ParamRole,
}

impl Param {
    pub fn new(value: Tensor, role: ParamRole) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad, role }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// A named tensor owned by a module: either a trainable parameter or a
/// non-trainable buffer (batch-norm running statistics).
pub enum SlotRef<'a> {
    Param(&'a Param),
    Buffer(&'a Tensor),
}

pub enum SlotMut<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut Tensor),
}

impl SlotRef<'_> {
    pub fn tensor(&self) -> &Tensor {
        match self {
            SlotRef::Param(p) => &p.value,
            SlotRef::Buffer(t) => t,
        }
    }
}

impl SlotMut<'_> {
    pub fn tensor_mut(&mut self) -> &mut Tensor {
        match self {
            SlotMut::Param(p) => &mut p.value,
            SlotMut::Buffer(t) => t,
        }
    }
}

/// Visits every named parameter and buffer in a fixed, deterministic order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, slot| {
            if let SlotRef::Param(p) = slot {
                n += p.len();
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, slot| {
            if let SlotMut::Param(p) = slot {
                p.zero_grad();
            }
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `c = a · b + beta · c` for strided row/column layouts.
///
/// `a` is `m × k`, `b` is `k × n`, `c` is `m × n`; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: every index reachable through the given strides was bounds
    // checked above, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
