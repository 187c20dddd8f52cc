use super::TrainError;

/// Elementwise Smooth-L1 (Huber with slope 1): quadratic below `beta`,
/// linear above. `beta == 0` is plain L1.
pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

/// Derivative of [`smooth_l1`] with respect to `d`.
pub fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub train_min: f64,
    pub train_max: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 1.0,
            train_min: 1.0,
            train_max: 95.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Batch mean.
    pub value: f64,
    pub per_sample: Vec<f64>,
    /// `d value / d pred_i`, including the `1/B` of the mean.
    pub grad: Vec<f64>,
}

/// Mean Smooth-L1 between predictions and targets clamped to the training
/// range.
pub fn bounded_smooth_l1(pred: &[f64], target: &[f64], cfg: &LossConfig) -> Result<LossOutput, TrainError> {
    assert_eq!(pred.len(), target.len(), "prediction/target length");
    if pred.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = pred.len() as f64;
    let mut per_sample = Vec::with_capacity(pred.len());
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t.clamp(cfg.train_min, cfg.train_max);
        per_sample.push(smooth_l1(d, cfg.beta));
        grad.push(smooth_l1_grad(d, cfg.beta) / n);
    }
    let bad: Vec<usize> = per_sample
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(TrainError::NonFiniteLoss { indices: bad });
    }
    let value = per_sample.iter().sum::<f64>() / n;
    Ok(LossOutput {
        value,
        per_sample,
        grad,
    })
}
