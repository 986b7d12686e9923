use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::Result;

pub const DEFAULT_BINS: usize = 100;

/// Uniform-bin histogram with explicit edges.
///
/// Bins are half-open `[edge_i, edge_{i+1})` except the last, which also
/// holds the upper edge. Non-finite samples land in `underflow` (−∞, NaN) or
/// `overflow` (+∞).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    /// `bins` uniform bins spanning the finite sample range. A degenerate
    /// range `[v, v]` is widened to `[v − 0.5, v + 0.5]`.
    pub fn from_samples(samples: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let finite = samples.iter().copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
        let (lo, hi) = if lo > hi {
            (0.0, 1.0)
        } else if lo == hi {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        };
        Self::with_range(samples, bins, lo, hi)
    }

    pub fn with_range(samples: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut h = Self {
            edges,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
        };
        for &v in samples {
            if v.is_nan() || v < lo {
                h.underflow += 1;
            } else if v > hi {
                h.overflow += 1;
            } else {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                h.counts[b] += 1;
            }
        }
        h
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// Centre of the fullest bin.
    pub fn mode(&self) -> f64 {
        let b = self
            .counts
            .iter()
            .enumerate()
            .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
            .map_or(0, |(i, _)| i);
        0.5 * (self.edges[b] + self.edges[b + 1])
    }

    /// CSV rows `bin_lo,bin_hi,count`, preceded by underflow/overflow rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_lo,bin_hi,count")?;
        writeln!(w, "-inf,{},{}", self.edges[0], self.underflow)?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{},{c}", self.edges[i], self.edges[i + 1])?;
        }
        writeln!(w, "{},inf,{}", self.edges[self.edges.len() - 1], self.overflow)?;
        Ok(())
    }
}
