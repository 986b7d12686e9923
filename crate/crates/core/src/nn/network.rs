use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::layer::{self, Cache, LayerSpec, Padding, Params};
use crate::defense::losses;
use crate::{rng, Error, Result, Tensor};

/// Named network shapes buildable from a one-line description.
///
/// Textual forms: `linear`, `mlp:256,256`, `cnn:8,16,128`
/// (two conv widths and a dense width).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    Linear,
    Mlp { hidden: Vec<usize> },
    Cnn { conv1: usize, conv2: usize, hidden: usize },
}

impl Architecture {
    pub fn small_cnn() -> Self {
        Architecture::Cnn {
            conv1: 8,
            conv2: 16,
            hidden: 128,
        }
    }

    /// Layer stack for inputs of `input_shape` and `n_classes` outputs.
    pub fn layers(&self, input_shape: &[usize], n_classes: usize) -> Result<Vec<LayerSpec>> {
        let flat: usize = input_shape.iter().product();
        let mut specs = Vec::new();
        if input_shape.len() > 1 && !matches!(self, Architecture::Cnn { .. }) {
            specs.push(LayerSpec::Flatten);
        }
        match self {
            Architecture::Linear => specs.push(LayerSpec::Dense {
                inputs: flat,
                outputs: n_classes,
            }),
            Architecture::Mlp { hidden } => {
                let mut width = flat;
                for &h in hidden {
                    specs.push(LayerSpec::Dense {
                        inputs: width,
                        outputs: h,
                    });
                    specs.push(LayerSpec::Relu);
                    width = h;
                }
                specs.push(LayerSpec::Dense {
                    inputs: width,
                    outputs: n_classes,
                });
            }
            &Architecture::Cnn {
                conv1,
                conv2,
                hidden,
            } => {
                let [c, h, w] = *input_shape else {
                    return Err(Error::InvalidConfig(format!(
                        "cnn needs [channels, height, width] inputs, got {input_shape:?}"
                    )));
                };
                let pooled = (h / 4) * (w / 4);
                specs.extend([
                    LayerSpec::Conv2d {
                        in_channels: c,
                        out_channels: conv1,
                        kernel: 5,
                        padding: Padding::Same,
                    },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2x2,
                    LayerSpec::Conv2d {
                        in_channels: conv1,
                        out_channels: conv2,
                        kernel: 5,
                        padding: Padding::Same,
                    },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2x2,
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        inputs: conv2 * pooled,
                        outputs: hidden,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Dense {
                        inputs: hidden,
                        outputs: n_classes,
                    },
                ]);
            }
        }
        Ok(specs)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Linear => write!(f, "linear"),
            Architecture::Mlp { hidden } => {
                let h: Vec<String> = hidden.iter().map(usize::to_string).collect();
                write!(f, "mlp:{}", h.join(","))
            }
            Architecture::Cnn {
                conv1,
                conv2,
                hidden,
            } => write!(f, "cnn:{conv1},{conv2},{hidden}"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let nums = || -> Result<Vec<usize>> {
            rest.split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&n| n > 0)
                        .ok_or_else(|| Error::Parse(format!("bad layer width {p:?} in {s:?}")))
                })
                .collect()
        };
        match kind.trim() {
            "linear" if rest.is_empty() => Ok(Architecture::Linear),
            "mlp" => Ok(Architecture::Mlp { hidden: nums()? }),
            "cnn" if rest.is_empty() => Ok(Architecture::small_cnn()),
            "cnn" => match nums()?.as_slice() {
                &[conv1, conv2, hidden] => Ok(Architecture::Cnn {
                    conv1,
                    conv2,
                    hidden,
                }),
                _ => Err(Error::Parse(format!("cnn takes three widths, got {s:?}"))),
            },
            _ => Err(Error::Parse(format!("unknown architecture {s:?}"))),
        }
    }
}

/// An ordered layer stack mapping `[batch, ..input_shape]` to
/// `[batch, n_classes]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<Params>>,
    /// Item shape after each layer.
    shapes: Vec<Vec<usize>>,
    seed: u64,
}

/// Activations recorded by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[i]` is the input of layer `i`; the last entry is the logits.
    activations: Vec<Tensor>,
    caches: Vec<Cache>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("trace always holds the input")
    }

    /// Input of the final layer, flattened to `[batch, features]`.
    pub fn penultimate(&self) -> Tensor {
        let a = &self.activations[self.activations.len().saturating_sub(2)];
        let shape = [a.rows(), a.row_len()];
        a.clone().reshape(&shape).expect("same element count")
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }
}

/// Parameter gradients aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<Params>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .params
                .iter()
                .map(|p| p.as_ref().map(Params::zeros_like))
                .collect(),
        }
    }

    /// Index of the first layer holding a non-finite gradient.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|p| p.as_ref().is_some_and(|p| !p.is_finite()))
    }

    pub fn scale(&mut self, c: f64) {
        for p in self.layers.iter_mut().flatten() {
            p.weight.data_mut().iter_mut().for_each(|v| *v *= c);
            p.bias.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    /// `self += c · other`.
    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                    *x += c * y;
                }
                for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                    *x += c * y;
                }
            }
        }
    }
}

/// Scalar per example whose input gradient is requested.
#[derive(Debug, Clone, Copy)]
pub enum Selector<'a> {
    /// Logit `c` of every example.
    Logit(usize),
    /// Cross-entropy against the one-hot label of each example.
    CrossEntropy(&'a [usize]),
    /// Margin loss `max_{k≠y} z_k − z_y` for each example.
    Cw(&'a [usize]),
}

impl Network {
    /// Builds a network with He-uniform weights (bound `sqrt(6 / fan_in)`)
    /// and zero biases, drawn from a stream keyed by `seed` and layer index.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let params = layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                spec.param_shapes().map(|(ws, bs)| {
                    let bound = (6.0 / spec.fan_in() as f64).sqrt();
                    let mut r = rng::stream(seed, &[i as u64]);
                    let n = ws.iter().product();
                    let w = (0..n).map(|_| r.random_range(-bound..bound)).collect();
                    Params {
                        weight: Tensor::new(ws, w).unwrap(),
                        bias: Tensor::zeros(&bs),
                    }
                })
            })
            .collect();
        Self::with_params(input_shape, layers, params, seed)
    }

    pub fn from_architecture(
        arch: &Architecture,
        input_shape: &[usize],
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::new(input_shape, arch.layers(input_shape, n_classes)?, seed)
    }

    /// Builds a network from explicit parameters, validating every shape.
    pub fn with_params(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        params: Vec<Option<Params>>,
        seed: u64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network has no layers".into()));
        }
        if params.len() != layers.len() {
            return Err(Error::Shape(format!(
                "{} layers but {} parameter slots",
                layers.len(),
                params.len()
            )));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.to_vec();
        for (i, (spec, p)) in layers.iter().zip(&params).enumerate() {
            layer::check_params(i, spec, p.as_ref())?;
            cur = spec.output_shape(&cur).ok_or_else(|| {
                Error::Shape(format!(
                    "layer {i} ({}) cannot take input of shape {cur:?}",
                    spec.name()
                ))
            })?;
            shapes.push(cur.clone());
        }
        if cur.len() != 1 || !matches!(layers.last(), Some(LayerSpec::Dense { .. })) {
            return Err(Error::InvalidConfig(
                "the final layer must be dense and produce a logit vector".into(),
            ));
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            shapes,
            seed,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn n_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s[0])
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<Params>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<Params>] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Width of the penultimate (feature) layer.
    pub fn feature_dim(&self) -> usize {
        match self.shapes.len() {
            0 | 1 => self.input_shape.iter().product(),
            n => self.shapes[n - 2].iter().product(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Params::len).sum()
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().is_empty() || batch.item_shape() != self.input_shape.as_slice() {
            let mut expected = vec![batch.rows()];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::LayerShape {
                layer: 0,
                expected,
                actual: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<ForwardTrace> {
        self.check_input(batch)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        activations.push(batch.clone());
        for (i, spec) in self.layers.iter().enumerate() {
            let (out, cache) = layer::forward(
                spec,
                self.params[i].as_ref(),
                &activations[i],
                &self.shapes[i],
            );
            activations.push(out);
            caches.push(cache);
        }
        Ok(ForwardTrace {
            activations,
            caches,
        })
    }

    /// Logits only; intermediate activations are dropped as soon as possible.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut cur = batch.clone();
        for (i, spec) in self.layers.iter().enumerate() {
            cur = layer::forward(spec, self.params[i].as_ref(), &cur, &self.shapes[i]).0;
        }
        Ok(cur)
    }

    /// Reverse pass from `grad_logits = ∂L/∂z`. Returns parameter gradients
    /// (when requested) and `∂L/∂x`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: &Tensor,
        want_params: bool,
    ) -> Result<(Option<Gradients>, Tensor)> {
        if trace.caches.len() != self.layers.len()
            || trace.activations.len() != self.layers.len() + 1
        {
            return Err(Error::Shape(format!(
                "trace has {} layers, network has {}",
                trace.caches.len(),
                self.layers.len()
            )));
        }
        if grad_logits.shape() != trace.logits().shape() {
            return Err(Error::Shape(format!(
                "loss gradient shape {:?} differs from logits shape {:?}",
                grad_logits.shape(),
                trace.logits().shape()
            )));
        }
        for (i, a) in trace.activations.iter().skip(1).enumerate() {
            if a.item_shape() != self.shapes[i].as_slice() {
                return Err(Error::LayerShape {
                    layer: i,
                    expected: self.shapes[i].clone(),
                    actual: a.item_shape().to_vec(),
                });
            }
        }
        let mut grads = want_params.then(|| Gradients::zeros_like(self));
        let mut g = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            let slot = grads.as_mut().and_then(|gr| gr.layers[i].as_mut());
            g = layer::backward(
                &self.layers[i],
                self.params[i].as_ref(),
                &trace.activations[i],
                &trace.caches[i],
                &g,
                slot,
            );
        }
        Ok((grads, g))
    }

    /// Gradients of the scalar `Σ loss_grad ⊙ logits` with respect to every
    /// parameter.
    pub fn param_gradients(&self, trace: &ForwardTrace, loss_grad: &Tensor) -> Result<Gradients> {
        Ok(self
            .backward(trace, loss_grad, true)?
            .0
            .expect("requested parameter gradients"))
    }

    /// Gradient of the selected per-example scalar with respect to the input
    /// batch. Row `i` of the result only depends on example `i`.
    pub fn input_gradient(&self, x: &Tensor, selector: Selector<'_>) -> Result<Tensor> {
        let trace = self.forward(x)?;
        let g = selector_grad(trace.logits(), selector)?;
        Ok(self.backward(&trace, &g, false)?.1)
    }

    /// `[n_classes]` input gradients, one per logit, for a batch.
    pub fn logit_jacobians(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let trace = self.forward(x)?;
        let logits = trace.logits().clone();
        let n = x.rows();
        let k = self.n_classes();
        let mut out = Vec::with_capacity(k);
        for c in 0..k {
            let mut g = Tensor::zeros(&[n, k]);
            for i in 0..n {
                g.row_mut(i)[c] = 1.0;
            }
            out.push(self.backward(&trace, &g, false)?.1);
        }
        Ok((logits, out))
    }

    /// Copy of this network with the final dense layer multiplied by `c`.
    pub fn with_scaled_output(&self, c: f64) -> Self {
        let mut net = self.clone();
        if let Some(Some(p)) = net.params.last_mut() {
            p.weight.data_mut().iter_mut().for_each(|v| *v *= c);
            p.bias.data_mut().iter_mut().for_each(|v| *v *= c);
        }
        net
    }
}

/// `∂(selected scalar)/∂z` for every row of `logits`.
pub(crate) fn selector_grad(logits: &Tensor, selector: Selector<'_>) -> Result<Tensor> {
    let n = logits.rows();
    let k = logits.row_len();
    let mut g = Tensor::zeros(logits.shape());
    match selector {
        Selector::Logit(c) => {
            if c >= k {
                return Err(Error::InvalidConfig(format!(
                    "logit index {c} out of range for {k} classes"
                )));
            }
            for i in 0..n {
                g.row_mut(i)[c] = 1.0;
            }
        }
        Selector::CrossEntropy(labels) | Selector::Cw(labels) => {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for a batch of {n}",
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                return Err(Error::InvalidConfig(format!(
                    "label {bad} out of range for {k} classes"
                )));
            }
            for (i, &y) in labels.iter().enumerate() {
                let row = g.row_mut(i);
                match selector {
                    Selector::CrossEntropy(_) => {
                        let (_, gi) = losses::xent_single(logits.row(i), y)?;
                        row.copy_from_slice(&gi);
                    }
                    _ => {
                        let (_, runner) = losses::cw_loss(logits.row(i), y)?;
                        row[runner] = 1.0;
                        row[y] = -1.0;
                    }
                }
            }
        }
    }
    Ok(g)
}
