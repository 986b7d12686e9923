use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attack::EVAL_CHUNK;
use crate::data::Dataset;
use crate::nn::Network;
use crate::{parallel, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationLayer {
    /// Input of the final dense layer (the feature representation).
    Penultimate,
    Logits,
}

/// Cumulative `|activation|` per neuron over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub layer: ActivationLayer,
    pub cumulative: Vec<f64>,
    pub threshold: f64,
    /// Neurons whose cumulative magnitude is zero or below
    /// `threshold × max`.
    pub inactive: usize,
}

impl ActivationProfile {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let max = self.cumulative.iter().copied().fold(0.0, f64::max);
        writeln!(w, "neuron,cumulative_abs_activation,inactive")?;
        for (i, &c) in self.cumulative.iter().enumerate() {
            writeln!(w, "{i},{c},{}", is_inactive(c, max, self.threshold) as u8)?;
        }
        Ok(())
    }
}

fn is_inactive(c: f64, max: f64, threshold: f64) -> bool {
    c == 0.0 || c < threshold * max
}

pub fn activation_profile(
    net: &Network,
    data: &Dataset,
    layer: ActivationLayer,
    inactive_threshold: f64,
) -> Result<ActivationProfile> {
    if inactive_threshold.is_nan() || inactive_threshold < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "inactive threshold must be non-negative, got {inactive_threshold}"
        )));
    }
    let width = match layer {
        ActivationLayer::Penultimate => net.feature_dim(),
        ActivationLayer::Logits => net.n_classes(),
    };
    let ranges = parallel::chunk_ranges(data.len(), EVAL_CHUNK);
    let parts = parallel::map_ordered(&ranges, |&(s, e)| -> Result<Vec<f64>> {
        let idx: Vec<usize> = (s..e).collect();
        let (x, _) = data.batch(&idx);
        let trace = net.forward(&x)?;
        let a = match layer {
            ActivationLayer::Penultimate => trace.penultimate(),
            ActivationLayer::Logits => trace.logits().clone(),
        };
        let mut acc = vec![0.0; width];
        for i in 0..a.rows() {
            for (s, v) in acc.iter_mut().zip(a.row(i)) {
                *s += v.abs();
            }
        }
        Ok(acc)
    });
    let mut cumulative = vec![0.0; width];
    for p in parts {
        for (s, v) in cumulative.iter_mut().zip(p?) {
            *s += v;
        }
    }
    let max = cumulative.iter().copied().fold(0.0, f64::max);
    let inactive = cumulative
        .iter()
        .filter(|&&c| is_inactive(c, max, inactive_threshold))
        .count();
    Ok(ActivationProfile {
        layer,
        cumulative,
        threshold: inactive_threshold,
        inactive,
    })
}
