use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::{rng, Error, Result, Tensor};

/// Per-coordinate standard deviation of every synthetic blob.
pub const BLOB_STD: f64 = 0.1;

/// Class-conditional Gaussian blobs clipped into `[0, 1]`.
///
/// Example `i` has label `i mod n_classes`. Class means sit at pairwise
/// distance `separation` along coordinate axes when `dim ≥ n_classes`,
/// otherwise on a circle (or a line for `dim == 1`) with neighbouring means
/// `separation` apart. Means are centred on 0.5.
pub fn synth_blobs(
    n: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if n_classes == 0 || dim == 0 {
        return Err(Error::InvalidConfig(
            "need at least one class and one dimension".into(),
        ));
    }
    let means = class_means(n_classes, dim, separation);
    let noise = Normal::new(0.0, BLOB_STD).expect("valid std");
    let mut r = rng::stream(seed, &[0x5eed_b10b]);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % n_classes;
        labels.push(y);
        for &m in &means[y] {
            data.push((m + noise.sample(&mut r)).clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, n_classes)
}

fn class_means(k: usize, dim: usize, s: f64) -> Vec<Vec<f64>> {
    if dim >= k {
        let off = s / std::f64::consts::SQRT_2;
        let base = 0.5 - off / 2.0;
        (0..k)
            .map(|c| {
                let mut m = vec![base; dim];
                m[c] += off;
                m
            })
            .collect()
    } else if dim >= 2 {
        let radius = s / (2.0 * (std::f64::consts::PI / k as f64).sin());
        (0..k)
            .map(|c| {
                let t = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                let mut m = vec![0.5; dim];
                m[0] += radius * t.cos();
                m[1] += radius * t.sin();
                m
            })
            .collect()
    } else {
        (0..k)
            .map(|c| vec![0.5 + s * (c as f64 - (k as f64 - 1.0) / 2.0)])
            .collect()
    }
}
