//! Cross-entropy surface sampled on a 2-D grid around a clean image.
//!
//! Probe points `x + ε₁·d₁ + ε₂·d₂` are not clipped to the valid pixel range.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::defense::losses;
use crate::nn::{Network, Selector};
use crate::tensor::sign;
use crate::{parallel, rng, Error, Result, Tensor};

pub const DEFAULT_RESOLUTION: usize = 41;
/// Default half-width of the grid on the `[0, 1]` pixel scale.
pub const DEFAULT_RANGE: f64 = 10.0 / 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DirectionSpec {
    Rademacher { seed: u64 },
    Adversarial,
}

/// Independent ±1 entries with equal probability.
pub fn rademacher_direction(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[0x4ade]);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// `sign(∇ₓ xent(x, y))` for a single example `x` of shape `[1, ...]`.
pub fn adversarial_direction(net: &Network, x: &Tensor, y: usize) -> Result<Tensor> {
    check_single(net, x, y)?;
    let g = net.input_gradient(x, Selector::CrossEntropy(&[y]))?;
    if !g.is_finite() {
        return Err(Error::NonFinite("cross-entropy input gradient".into()));
    }
    Ok(g.map(sign))
}

fn check_single(net: &Network, x: &Tensor, y: usize) -> Result<()> {
    if x.rows() != 1 {
        return Err(Error::Shape(format!("expected one example, got {}", x.rows())));
    }
    if y >= net.n_classes() {
        return Err(Error::InvalidConfig(format!(
            "label {y} out of range for {} classes",
            net.n_classes()
        )));
    }
    Ok(())
}

/// Loss values over a `resolution × resolution` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub image_index: usize,
    pub label: usize,
    pub directions: [DirectionSpec; 2],
    pub range: f64,
    pub resolution: usize,
    /// Offsets along each axis, shared by both.
    pub offsets: Vec<f64>,
    /// Row-major: `loss[i * resolution + j]` is at `(offsets[i], offsets[j])`.
    pub loss: Vec<f64>,
}

impl LandscapeGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.loss[i * self.resolution + j]
    }

    pub fn center(&self) -> f64 {
        let c = self.resolution / 2;
        self.at(c, c)
    }

    /// Max minus min of the loss along the first axis (second offset 0).
    pub fn range_along_first(&self) -> f64 {
        let c = self.resolution / 2;
        spread((0..self.resolution).map(|i| self.at(i, c)))
    }

    pub fn range_along_second(&self) -> f64 {
        let c = self.resolution / 2;
        spread((0..self.resolution).map(|j| self.at(c, j)))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "eps1,eps2,loss")?;
        for (i, e1) in self.offsets.iter().enumerate() {
            for (j, e2) in self.offsets.iter().enumerate() {
                writeln!(w, "{e1},{e2},{}", self.at(i, j))?;
            }
        }
        Ok(())
    }

    /// Sidecar metadata; `model_hash` identifies the checkpoint.
    pub fn sidecar_json(&self, model_hash: &str) -> Result<String> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            image_index: usize,
            label: usize,
            directions: &'a [DirectionSpec; 2],
            range: f64,
            resolution: usize,
            model_hash: &'a str,
            center_loss: f64,
        }
        Ok(serde_json::to_string_pretty(&Sidecar {
            image_index: self.image_index,
            label: self.label,
            directions: &self.directions,
            range: self.range,
            resolution: self.resolution,
            model_hash,
            center_loss: self.center(),
        })?)
    }
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    hi - lo
}

/// Grid offsets `range · (2k − (n−1)) / (n−1)` for `k = 0..n`; the middle
/// entry is exactly zero.
pub fn grid_offsets(range: f64, resolution: usize) -> Vec<f64> {
    let m = (resolution - 1) as f64;
    (0..resolution)
        .map(|k| range * (2.0 * k as f64 - m) / m)
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn loss_surface(
    net: &Network,
    x: &Tensor,
    y: usize,
    dir1: &Tensor,
    dir2: &Tensor,
    range: f64,
    resolution: usize,
) -> Result<Vec<f64>> {
    check_single(net, x, y)?;
    if resolution < 3 || resolution.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "grid resolution must be odd and at least 3, got {resolution}"
        )));
    }
    if !(range.is_finite() && range >= 0.0) {
        return Err(Error::InvalidConfig(format!("grid range must be non-negative, got {range}")));
    }
    let n = x.row_len();
    if dir1.len() != n || dir2.len() != n {
        return Err(Error::Shape(format!(
            "directions of length {} and {} for an input of length {n}",
            dir1.len(),
            dir2.len()
        )));
    }
    let offsets = grid_offsets(range, resolution);
    let x0 = x.row(0);
    let (d1, d2) = (dir1.data(), dir2.data());
    let rows: Vec<usize> = (0..resolution).collect();
    let parts = parallel::map_ordered(&rows, |&i| -> Result<Vec<f64>> {
        let e1 = offsets[i];
        let mut data = Vec::with_capacity(resolution * n);
        for &e2 in &offsets {
            data.extend((0..n).map(|p| x0[p] + e1 * d1[p] + e2 * d2[p]));
        }
        let mut shape = vec![resolution];
        shape.extend_from_slice(x.item_shape());
        let z = net.logits(&Tensor::new(shape, data)?)?;
        (0..resolution)
            .map(|j| Ok(losses::xent_single(z.row(j), y)?.0))
            .collect()
    });
    let mut out = Vec::with_capacity(resolution * resolution);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Resolves both direction specs for one example and samples the grid.
#[allow(clippy::too_many_arguments)]
pub fn landscape(
    net: &Network,
    x: &Tensor,
    y: usize,
    image_index: usize,
    directions: [DirectionSpec; 2],
    range: f64,
    resolution: usize,
) -> Result<LandscapeGrid> {
    let resolve = |d: &DirectionSpec| match d {
        DirectionSpec::Rademacher { seed } => Ok(rademacher_direction(x.item_shape(), *seed)),
        DirectionSpec::Adversarial => adversarial_direction(net, x, y),
    };
    let d1 = resolve(&directions[0])?;
    let d2 = resolve(&directions[1])?;
    let loss = loss_surface(net, x, y, &d1, &d2, range, resolution)?;
    Ok(LandscapeGrid {
        image_index,
        label: y,
        directions,
        range,
        resolution,
        offsets: grid_offsets(range, resolution),
        loss,
    })
}
