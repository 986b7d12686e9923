use super::layer::Params;
use super::network::{Gradients, Network};
use crate::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← m·v + g + wd·θ`, `θ ← θ − lr·v`. Velocity buffers persist across
/// calls to [`Sgd::step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Option<Vec<Option<Params>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Self {
            momentum,
            weight_decay,
            velocity: None,
        })
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if grads.layers.len() != net.params().len() {
            return Err(Error::Shape("gradients do not match the network".into()));
        }
        if let Some(i) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of layer {i}")));
        }
        let velocity = self.velocity.get_or_insert_with(|| {
            net.params()
                .iter()
                .map(|p| p.as_ref().map(Params::zeros_like))
                .collect()
        });
        let (m, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in net
            .params_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(velocity.iter_mut())
        {
            let (Some(p), Some(g), Some(v)) = (p, g, v) else {
                continue;
            };
            update(p.weight.data_mut(), g.weight.data(), v.weight.data_mut(), lr, m, wd);
            update(p.bias.data_mut(), g.bias.data(), v.bias.data_mut(), lr, m, wd);
        }
        Ok(())
    }
}

fn update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, m: f64, wd: f64) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
}
