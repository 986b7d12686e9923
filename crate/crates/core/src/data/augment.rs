use rand_distr::{Distribution, StandardNormal};

use crate::{rng, Error, Result, Tensor};

/// Returns `batch + N(0, σ²)` noise drawn i.i.d. per element from the stream
/// keyed by `(seed, call_index)`. The result is not clipped.
pub fn gaussian_augment(batch: &Tensor, sigma: f64, seed: u64, call_index: u64) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise std must be non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(batch.clone());
    }
    let mut r = rng::stream(seed, &[0xa06, call_index]);
    let mut out = batch.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(&mut r);
        *v += sigma * z;
    }
    Ok(out)
}

/// Clamps every value into `[0, 1]`.
pub fn clip_unit(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let b = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(gaussian_augment(&b, 0.0, 3, 0).unwrap(), b);
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(gaussian_augment(&Tensor::zeros(&[1, 1]), -0.1, 0, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed_and_call() {
        let b = Tensor::zeros(&[4, 3]);
        let a1 = gaussian_augment(&b, 0.5, 1, 7).unwrap();
        assert_eq!(a1, gaussian_augment(&b, 0.5, 1, 7).unwrap());
        assert_ne!(a1, gaussian_augment(&b, 0.5, 1, 8).unwrap());
    }

    #[test]
    fn noise_moments() {
        // Law-of-large-numbers oracle: with 10^6 draws the sample mean has
        // std 0.5e-3 and the sample std has std ~0.35e-3.
        let b = Tensor::full(&[1000, 1000], 0.5);
        let out = gaussian_augment(&b, 0.5, 2024, 0).unwrap();
        let n = out.len() as f64;
        let noise: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
        let mean = noise.iter().sum::<f64>() / n;
        let var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.002, "mean {mean}");
        let std = var.sqrt();
        assert!((0.498..=0.502).contains(&std), "std {std}");
        // not clipped
        assert!(out.data().iter().any(|&v| !(0.0..=1.0).contains(&v)));
    }
}
