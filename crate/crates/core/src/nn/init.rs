use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-normal initialization with `fan_out = shape[0] * prod(shape[2..])`.
pub fn kaiming_normal_fan_out<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Vec<f32> {
    let receptive: usize = shape[2..].iter().product();
    let fan_out = shape[0] * receptive.max(1);
    let std = (2.0 / fan_out as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let len: usize = shape.iter().product();
    (0..len).map(|_| normal.sample(rng) as f32).collect()
}

/// Normal samples with the given std, redrawn until they fall within
/// `±bound_stds · std`.
pub fn truncated_normal<R: Rng + ?Sized>(
    len: usize,
    std: f64,
    bound_stds: f64,
    rng: &mut R,
) -> Vec<f32> {
    let normal = Normal::new(0.0, std).expect("finite std");
    let bound = bound_stds * std;
    (0..len)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= bound {
                break v as f32;
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_respects_bound_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = truncated_normal(20_000, 0.02, 2.0, &mut rng);
        assert!(v.iter().all(|x| x.abs() <= 0.04 + 1e-9));
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / v.len() as f64;
        // A normal truncated at ±2σ keeps ~0.774 of its variance.
        let expected = 0.02f64.powi(2) * 0.7737;
        assert!(mean.abs() < 1e-3);
        assert!((var / expected - 1.0).abs() < 0.05, "var {var} expected {expected}");
    }

    #[test]
    fn kaiming_uses_fan_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = kaiming_normal_fan_out(&[64, 16, 3, 3], &mut rng);
        let var = w.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / (64.0 * 9.0);
        assert!((var / expected - 1.0).abs() < 0.1);
    }
}
