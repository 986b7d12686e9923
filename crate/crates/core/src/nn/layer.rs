//! Layer descriptors and their forward/backward kernels.
//!
//! Every kernel works on a whole batch; the leading axis of each tensor is the
//! batch axis. Image tensors are laid out as `[batch, channels, height, width]`.

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use crate::{Error, Result, Tensor};

/// Examples unfolded per convolution GEMM; bounds the column buffer size.
const CONV_CHUNK: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    /// Zero padding of `(kernel - 1) / 2` on every side; kernel must be odd.
    Same,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    /// Stride-1 square convolution.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    },
    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2x2,
    Flatten,
}

/// Weight and bias of a parameterised layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.is_finite()
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LayerSpec {
    /// Output item shape for the given input item shape.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => (input == [inputs]).then(|| vec![outputs]),
            LayerSpec::Relu => Some(input.to_vec()),
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let [c, h, w] = *input else { return None };
                if c != in_channels || kernel == 0 {
                    return None;
                }
                match padding {
                    Padding::Same if kernel % 2 == 1 => Some(vec![out_channels, h, w]),
                    Padding::Same => None,
                    Padding::Valid if h >= kernel && w >= kernel => {
                        Some(vec![out_channels, h - kernel + 1, w - kernel + 1])
                    }
                    Padding::Valid => None,
                }
            }
            LayerSpec::MaxPool2x2 => {
                let [c, h, w] = *input else { return None };
                (h >= 2 && w >= 2).then(|| vec![c, h / 2, w / 2])
            }
        }
    }

    /// Weight and bias shapes, or `None` for parameter-free layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Per-layer state kept by the forward pass for backprop.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    None,
    /// Flat input index of the maximum for every pooled output element.
    PoolArgmax(Vec<usize>),
}

pub(crate) fn forward(
    spec: &LayerSpec,
    params: Option<&Params>,
    input: &Tensor,
    out_item: &[usize],
) -> (Tensor, Cache) {
    let batch = input.rows();
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(out_item);
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            let p = params.expect("dense layer without params");
            let mut out = vec![0.0; batch * outputs];
            gemm(
                false,
                true,
                batch,
                outputs,
                inputs,
                input.data(),
                p.weight.data(),
                0.0,
                &mut out,
            );
            let bias = p.bias.data();
            for row in out.chunks_exact_mut(outputs) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            (Tensor::new(out_shape, out).unwrap(), Cache::None)
        }
        LayerSpec::Relu => (input.map(|v| v.max(0.0)), Cache::None),
        LayerSpec::Flatten => (
            Tensor::new(out_shape, input.data().to_vec()).unwrap(),
            Cache::None,
        ),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding,
        } => {
            let p = params.expect("conv layer without params");
            let geo = ConvGeometry::new(input.item_shape(), kernel, padding);
            let plane = geo.out_h * geo.out_w;
            let ckk = in_channels * kernel * kernel;
            let mut out = vec![0.0; batch * out_channels * plane];
            let mut cols = Vec::new();
            let mut wide = Vec::new();
            // One GEMM per chunk of examples: [oc, ckk] × [ckk, chunk·plane].
            for start in (0..batch).step_by(CONV_CHUNK) {
                let n = CONV_CHUNK.min(batch - start);
                geo.im2col_batch(input, in_channels, start, n, &mut cols);
                wide.resize(out_channels * n * plane, 0.0);
                gemm(
                    false,
                    false,
                    out_channels,
                    n * plane,
                    ckk,
                    p.weight.data(),
                    &cols,
                    0.0,
                    &mut wide,
                );
                for (o, src) in wide.chunks_exact(n * plane).enumerate() {
                    let bias = p.bias.data()[o];
                    for (b, chunk) in src.chunks_exact(plane).enumerate() {
                        let dst = &mut out[((start + b) * out_channels + o) * plane..][..plane];
                        for (d, v) in dst.iter_mut().zip(chunk) {
                            *d = v + bias;
                        }
                    }
                }
            }
            (Tensor::new(out_shape, out).unwrap(), Cache::None)
        }
        LayerSpec::MaxPool2x2 => {
            let [c, h, w] = *input.item_shape() else {
                unreachable!("pool input validated at construction")
            };
            let (oh, ow) = (h / 2, w / 2);
            let n_out = batch * c * oh * ow;
            let mut out = Vec::with_capacity(n_out);
            let mut argmax = Vec::with_capacity(n_out);
            let x = input.data();
            for plane in 0..batch * c {
                let base = plane * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = base + 2 * i * w + 2 * j;
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * i + di) * w + 2 * j + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
            (
                Tensor::new(out_shape, out).unwrap(),
                Cache::PoolArgmax(argmax),
            )
        }
    }
}

/// Backprop through one layer. Returns the gradient with respect to the
/// layer input and, when `param_grad` is given, accumulates parameter
/// gradients into it.
pub(crate) fn backward(
    spec: &LayerSpec,
    params: Option<&Params>,
    input: &Tensor,
    cache: &Cache,
    grad_out: &Tensor,
    mut param_grad: Option<&mut Params>,
) -> Tensor {
    let batch = input.rows();
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            let p = params.expect("dense layer without params");
            if let Some(g) = param_grad {
                gemm(
                    true,
                    false,
                    outputs,
                    inputs,
                    batch,
                    grad_out.data(),
                    input.data(),
                    1.0,
                    g.weight.data_mut(),
                );
                let gb = g.bias.data_mut();
                for row in grad_out.data().chunks_exact(outputs) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            let mut dx = vec![0.0; batch * inputs];
            gemm(
                false,
                false,
                batch,
                inputs,
                outputs,
                grad_out.data(),
                p.weight.data(),
                0.0,
                &mut dx,
            );
            Tensor::new(input.shape().to_vec(), dx).unwrap()
        }
        LayerSpec::Relu => {
            let data = input
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            Tensor::new(input.shape().to_vec(), data).unwrap()
        }
        LayerSpec::Flatten => Tensor::new(input.shape().to_vec(), grad_out.data().to_vec()).unwrap(),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding,
        } => {
            let p = params.expect("conv layer without params");
            let geo = ConvGeometry::new(input.item_shape(), kernel, padding);
            let plane = geo.out_h * geo.out_w;
            let ckk = in_channels * kernel * kernel;
            let mut dx = vec![0.0; input.len()];
            let (mut cols, mut dwide, mut dcols) = (Vec::new(), Vec::new(), Vec::new());
            for start in (0..batch).step_by(CONV_CHUNK) {
                let n = CONV_CHUNK.min(batch - start);
                let wide_len = n * plane;
                // Channel-major copy of the output gradient: [oc, chunk·plane].
                dwide.resize(out_channels * wide_len, 0.0);
                let rows = &grad_out.data()[start * out_channels * plane..][..n * out_channels * plane];
                for (b, row) in rows.chunks_exact(out_channels * plane).enumerate() {
                    for (o, chan) in row.chunks_exact(plane).enumerate() {
                        dwide[o * wide_len + b * plane..][..plane].copy_from_slice(chan);
                    }
                }
                if let Some(g) = param_grad.as_deref_mut() {
                    geo.im2col_batch(input, in_channels, start, n, &mut cols);
                    gemm(
                        false,
                        true,
                        out_channels,
                        ckk,
                        wide_len,
                        &dwide,
                        &cols,
                        1.0,
                        g.weight.data_mut(),
                    );
                    for (acc, chan) in g.bias.data_mut().iter_mut().zip(dwide.chunks_exact(wide_len)) {
                        *acc += chan.iter().sum::<f64>();
                    }
                }
                dcols.resize(ckk * wide_len, 0.0);
                gemm(
                    true,
                    false,
                    ckk,
                    wide_len,
                    out_channels,
                    p.weight.data(),
                    &dwide,
                    0.0,
                    &mut dcols,
                );
                geo.col2im_batch(&dcols, in_channels, start, n, &mut dx);
            }
            Tensor::new(input.shape().to_vec(), dx).unwrap()
        }
        LayerSpec::MaxPool2x2 => {
            let Cache::PoolArgmax(argmax) = cache else {
                unreachable!("pool cache missing")
            };
            let mut dx = vec![0.0; input.len()];
            for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
                dx[idx] += g;
            }
            Tensor::new(input.shape().to_vec(), dx).unwrap()
        }
    }
}

struct ConvGeometry {
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(item: &[usize], k: usize, padding: Padding) -> Self {
        let (h, w) = (item[1], item[2]);
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => (k - 1) / 2,
        };
        Self {
            h,
            w,
            k,
            pad,
            out_h: h + 2 * pad - k + 1,
            out_w: w + 2 * pad - k + 1,
        }
    }

    /// Unfolds a `[batch, c, h, w]` tensor into a `[c·k·k, batch·plane]`
    /// matrix whose columns are grouped by example.
    /// Columns for examples `start..start + n`: a `[c·k·k, n·plane]` matrix.
    fn im2col_batch(&self, input: &Tensor, channels: usize, start: usize, n: usize, cols: &mut Vec<f64>) {
        let plane = self.out_h * self.out_w;
        cols.resize(channels * self.k * self.k * n * plane, 0.0);
        for b in 0..n {
            self.im2col(input.row(start + b), channels, cols, b * plane, n * plane);
        }
    }

    /// Adjoint of [`im2col_batch`](Self::im2col_batch), accumulated into `dx`.
    fn col2im_batch(&self, cols: &[f64], channels: usize, start: usize, n: usize, dx: &mut [f64]) {
        let plane = self.out_h * self.out_w;
        let in_len = channels * self.h * self.w;
        for (b, img) in dx[start * in_len..].chunks_exact_mut(in_len).take(n).enumerate() {
            self.col2im(cols, channels, img, b * plane, n * plane);
        }
    }

    /// Unfolds one `[c, h, w]` image into columns `offset..offset + plane`
    /// of a `[c·k·k, stride]` matrix.
    fn im2col(&self, img: &[f64], channels: usize, cols: &mut [f64], offset: usize, stride: usize) {
        let plane = self.out_h * self.out_w;
        for c in 0..channels {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * stride + offset..][..plane];
                    for oi in 0..self.out_h {
                        let ii = (oi + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * self.out_w..(oi + 1) * self.out_w];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[c * self.h * self.w + ii as usize * self.w..][..self.w];
                        for (oj, v) in line.iter_mut().enumerate() {
                            let jj = (oj + kj) as isize - self.pad as isize;
                            *v = if jj < 0 || jj >= self.w as isize {
                                0.0
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back
    /// onto the image, accumulating overlaps.
    fn col2im(&self, cols: &[f64], channels: usize, img: &mut [f64], offset: usize, stride: usize) {
        let plane = self.out_h * self.out_w;
        for c in 0..channels {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * stride + offset..][..plane];
                    for oi in 0..self.out_h {
                        let ii = (oi + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[c * self.h * self.w + ii as usize * self.w..][..self.w];
                        for oj in 0..self.out_w {
                            let jj = (oj + kj) as isize - self.pad as isize;
                            if jj >= 0 && (jj as usize) < self.w {
                                dst[jj as usize] += src[oi * self.out_w + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Validates that `params` has the shapes `spec` requires.
pub(crate) fn check_params(index: usize, spec: &LayerSpec, params: Option<&Params>) -> Result<()> {
    match (spec.param_shapes(), params) {
        (None, None) => Ok(()),
        (Some((ws, bs)), Some(p)) => {
            if p.weight.shape() != ws.as_slice() {
                return Err(Error::LayerShape {
                    layer: index,
                    expected: ws,
                    actual: p.weight.shape().to_vec(),
                });
            }
            if p.bias.shape() != bs.as_slice() {
                return Err(Error::LayerShape {
                    layer: index,
                    expected: bs,
                    actual: p.bias.shape().to_vec(),
                });
            }
            Ok(())
        }
        (Some(_), None) => Err(Error::Shape(format!(
            "layer {index} ({}) is missing parameters",
            spec.name()
        ))),
        (None, Some(_)) => Err(Error::Shape(format!(
            "layer {index} ({}) takes no parameters",
            spec.name()
        ))),
    }
}
