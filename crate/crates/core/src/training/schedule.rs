use std::f64::consts::PI;

use super::TrainError;
use crate::nn::{Module, SlotMut, SlotRef};

/// `lr_min + ½ (lr_max − lr_min)(1 + cos(π t / T))` for `0 ≤ t ≤ T`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64, TrainError> {
    if total == 0 {
        return Err(TrainError::Schedule("total steps must be at least 1".into()));
    }
    if t > total {
        return Err(TrainError::Schedule(format!("step {t} beyond total {total}")));
    }
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t as f64 / total as f64).cos()))
}

fn scale_for(norm: f64, clip_norm: f64) -> Result<Option<f32>, TrainError> {
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    Ok((norm > clip_norm).then(|| (clip_norm / norm) as f32))
}

/// Scales all gradients by `clip_norm / g` when their global L2 norm `g`
/// exceeds `clip_norm`. Returns `g`.
pub fn clip_gradients(grads: &mut [&mut [f32]], clip_norm: f64) -> Result<f64, TrainError> {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v as f64 * v as f64)
        .sum();
    let norm = sq.sqrt();
    if let Some(s) = scale_for(norm, clip_norm)? {
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    Ok(norm)
}

/// [`clip_gradients`] over the parameters of `module` selected by `include`.
pub fn clip_module_gradients(
    module: &mut dyn Module,
    include: &dyn Fn(&str) -> bool,
    clip_norm: f64,
) -> Result<f64, TrainError> {
    let mut sq = 0.0f64;
    module.visit("", &mut |name, slot| {
        if let SlotRef::Param(p) = slot {
            if include(name) {
                sq += p.grad.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
            }
        }
    });
    let norm = sq.sqrt();
    if let Some(s) = scale_for(norm, clip_norm)? {
        module.visit_mut("", &mut |name, slot| {
            if let SlotMut::Param(p) = slot {
                if include(name) {
                    p.grad.iter_mut().for_each(|v| *v *= s);
                }
            }
        });
    }
    Ok(norm)
}
