//! Small convolutional network engine: forward pass, backprop, Glorot init.
//!
//! Activations are laid out channel-major (`[C, H, W]`, row-major within a
//! channel). Dense layers flatten their input in that order. Convolutions use
//! valid padding.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

/// Upper clamp of the output rectifier.
pub const RELU6_CAP: f64 = 6.0;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("backward called before forward")]
    NoForwardState,
    #[error("non-finite value produced by layer {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
    },
    /// Non-overlapping average pooling.
    Subsample {
        pool_size: usize,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    ReLU,
    ReLU6,
}

impl LayerSpec {
    pub fn has_parameters(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    /// Output shape for a `[C, H, W]` input, or an explanation of the mismatch.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3], String> {
        let [c, h, w] = input;
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel_size,
                stride,
            } => {
                if in_channels != c {
                    return Err(format!("conv expects {in_channels} channels, got {c}"));
                }
                if kernel_size == 0 || stride == 0 || out_channels == 0 {
                    return Err("conv sizes must be positive".into());
                }
                if kernel_size > h || kernel_size > w {
                    return Err(format!("kernel {kernel_size} larger than input {h}x{w}"));
                }
                Ok([
                    out_channels,
                    (h - kernel_size) / stride + 1,
                    (w - kernel_size) / stride + 1,
                ])
            }
            LayerSpec::Subsample { pool_size } => {
                if pool_size == 0 || h % pool_size != 0 || w % pool_size != 0 {
                    return Err(format!("pool {pool_size} does not tile {h}x{w}"));
                }
                Ok([c, h / pool_size, w / pool_size])
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                if in_dim != c * h * w {
                    return Err(format!("dense expects {in_dim} inputs, got {}", c * h * w));
                }
                if out_dim == 0 {
                    return Err("dense output must be positive".into());
                }
                Ok([out_dim, 1, 1])
            }
            LayerSpec::ReLU | LayerSpec::ReLU6 => Ok(input),
        }
    }

    /// `(weight shape, bias length, fan_in, fan_out)` for parameterized layers.
    fn param_layout(&self) -> Option<(Vec<usize>, usize, usize, usize)> {
        match *self {
            LayerSpec::Conv {
                in_channels: c,
                out_channels: o,
                kernel_size: k,
                ..
            } => Some((vec![o, c, k, k], o, c * k * k, o * k * k)),
            LayerSpec::Dense { in_dim, out_dim } => {
                Some((vec![out_dim, in_dim], out_dim, in_dim, out_dim))
            }
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel_size,
                stride,
            } => write!(
                f,
                "conv {in_channels} {out_channels} {kernel_size} {stride}"
            ),
            LayerSpec::Subsample { pool_size } => write!(f, "subsample {pool_size}"),
            LayerSpec::Dense { in_dim, out_dim } => write!(f, "dense {in_dim} {out_dim}"),
            LayerSpec::ReLU => f.write_str("relu"),
            LayerSpec::ReLU6 => f.write_str("relu6"),
        }
    }
}

impl std::str::FromStr for LayerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let nums = |n: usize| -> Result<Vec<usize>, String> {
            if parts.len() != n + 1 {
                return Err(format!("{:?} expects {n} integers", parts[0]));
            }
            parts[1..]
                .iter()
                .map(|p| p.parse().map_err(|_| format!("bad integer {p:?}")))
                .collect()
        };
        match parts.first().copied() {
            Some("conv") => {
                let v = nums(4)?;
                Ok(LayerSpec::Conv {
                    in_channels: v[0],
                    out_channels: v[1],
                    kernel_size: v[2],
                    stride: v[3],
                })
            }
            Some("subsample") => Ok(LayerSpec::Subsample {
                pool_size: nums(1)?[0],
            }),
            Some("dense") => {
                let v = nums(2)?;
                Ok(LayerSpec::Dense {
                    in_dim: v[0],
                    out_dim: v[1],
                })
            }
            Some("relu") if parts.len() == 1 => Ok(LayerSpec::ReLU),
            Some("relu6") if parts.len() == 1 => Ok(LayerSpec::ReLU6),
            _ => Err(format!("unknown layer {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu6(x: f64) -> f64 {
    x.clamp(0.0, RELU6_CAP)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Index of the largest component (first one on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Ordered layers plus their parameters, producing `K` logits in `[0, 6]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    num_classes: usize,
}

impl NetworkModel {
    /// Validates the layer chain and allocates zeroed parameters.
    pub fn new(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        num_classes: usize,
    ) -> Result<Self, NnError> {
        if num_classes < 2 {
            return Err(NnError::InvalidArchitecture(
                "need at least 2 classes".into(),
            ));
        }
        if input_shape.contains(&0) {
            return Err(NnError::InvalidArchitecture("empty input shape".into()));
        }
        if layers.last() != Some(&LayerSpec::ReLU6) {
            return Err(NnError::InvalidArchitecture(
                "final layer must be relu6".into(),
            ));
        }
        let mut shape = input_shape;
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(shape)
                .map_err(|e| NnError::InvalidArchitecture(format!("layer {i} ({layer}): {e}")))?;
        }
        if shape != [num_classes, 1, 1] {
            return Err(NnError::InvalidArchitecture(format!(
                "network emits {shape:?}, expected {num_classes} logits"
            )));
        }
        let params = layers
            .iter()
            .map(|l| {
                l.param_layout().map(|(wshape, blen, _, _)| LayerParams {
                    weights: Tensor::zeros(wshape),
                    bias: Tensor::zeros(vec![blen]),
                })
            })
            .collect();
        Ok(Self {
            input_shape,
            layers,
            params,
            num_classes,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }

    /// Parameter buffers in layer order, weights before bias.
    pub fn param_slices(&self) -> impl Iterator<Item = &[f64]> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [p.weights.values(), p.bias.values()])
    }

    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [p.weights.values_mut(), p.bias.values_mut()])
    }

    /// Glorot-uniform weights, zero biases, drawn from a seeded generator.
    pub fn init_parameters(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (layer, params) in self.layers.iter().zip(self.params.iter_mut()) {
            let (Some((_, _, fan_in, fan_out)), Some(p)) = (layer.param_layout(), params) else {
                continue;
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in p.weights.values_mut() {
                *w = rng.gen_range(-bound..=bound);
            }
            p.bias.values_mut().fill(0.0);
        }
        self
    }

    /// Stateless forward pass returning the `K` logits.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(input)?;
        let mut ws = Workspace::new(self);
        let logits = ws.forward(self, input.values())?.to_vec();
        Tensor::new(vec![self.num_classes], logits)
    }

    pub fn check_input(&self, input: &Tensor) -> Result<(), NnError> {
        let [c, h, w] = self.input_shape;
        let ok = input.shape() == [c, h, w] || (c == 1 && input.shape() == [h, w]);
        if ok {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch(format!(
                "input {:?} does not match model input {:?}",
                input.shape(),
                self.input_shape
            )))
        }
    }
}

/// The fixed reference architecture used for both training modes.
///
/// `1x28x28 -> conv5(6) -> relu -> pool2 -> conv5(12) -> relu -> pool2
///  -> dense(192, 64) -> relu -> dense(64, K) -> relu6`, 14,970 parameters at K = 10.
pub fn build_lenet_like(num_classes: usize) -> Result<NetworkModel, NnError> {
    use LayerSpec::*;
    NetworkModel::new(
        [1, 28, 28],
        vec![
            Conv {
                in_channels: 1,
                out_channels: 6,
                kernel_size: 5,
                stride: 1,
            },
            ReLU,
            Subsample { pool_size: 2 },
            Conv {
                in_channels: 6,
                out_channels: 12,
                kernel_size: 5,
                stride: 1,
            },
            ReLU,
            Subsample { pool_size: 2 },
            Dense {
                in_dim: 192,
                out_dim: 64,
            },
            ReLU,
            Dense {
                in_dim: 64,
                out_dim: num_classes,
            },
            ReLU6,
        ],
        num_classes,
    )
}

/// Gradients shaped like a model's parameters, plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Option<LayerParams>>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &NetworkModel) -> Self {
        let params = model
            .params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| LayerParams {
                    weights: Tensor::zeros(p.weights.shape().to_vec()),
                    bias: Tensor::zeros(p.bias.shape().to_vec()),
                })
            })
            .collect();
        Self {
            params,
            input: vec![0.0; model.input_len()],
        }
    }

    pub fn clear(&mut self) {
        self.slices_mut().for_each(|s| s.fill(0.0));
        self.input.fill(0.0);
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [p.weights.values(), p.bias.values()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [p.weights.values_mut(), p.bias.values_mut()])
    }
}

/// Retained activations for one forward/backward pair. Reused across samples.
#[derive(Debug, Clone)]
pub struct Workspace {
    shapes: Vec<[usize; 3]>,
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    has_forward: bool,
}

impl Workspace {
    pub fn new(model: &NetworkModel) -> Self {
        let mut shapes = vec![model.input_shape];
        for layer in &model.layers {
            let next = layer
                .output_shape(*shapes.last().unwrap())
                .expect("model layers validated at construction");
            shapes.push(next);
        }
        let acts = shapes
            .iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        let widest = shapes
            .iter()
            .map(|s| s.iter().product::<usize>())
            .max()
            .unwrap_or(0);
        Self {
            shapes,
            acts,
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
            has_forward: false,
        }
    }

    fn check_model(&self, model: &NetworkModel) -> Result<(), NnError> {
        if self.shapes.len() != model.layers.len() + 1 || self.shapes[0] != model.input_shape {
            return Err(NnError::ShapeMismatch(
                "workspace built for a different model".into(),
            ));
        }
        Ok(())
    }

    /// Runs the model on a flat `[C, H, W]` input and returns the logits.
    pub fn forward(&mut self, model: &NetworkModel, input: &[f64]) -> Result<&[f64], NnError> {
        self.check_model(model)?;
        if input.len() != self.acts[0].len() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} values, model expects {}",
                input.len(),
                self.acts[0].len()
            )));
        }
        self.has_forward = false;
        self.acts[0].copy_from_slice(input);
        for (i, layer) in model.layers.iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(i + 1);
            let src = &before[i];
            let dst = &mut after[0];
            let in_shape = self.shapes[i];
            match *layer {
                LayerSpec::Conv {
                    kernel_size,
                    stride,
                    ..
                } => {
                    let p = model.params[i].as_ref().unwrap();
                    conv_forward(
                        src,
                        in_shape,
                        p,
                        kernel_size,
                        stride,
                        self.shapes[i + 1],
                        dst,
                    );
                }
                LayerSpec::Subsample { pool_size } => pool_forward(src, in_shape, pool_size, dst),
                LayerSpec::Dense { in_dim, out_dim } => {
                    let p = model.params[i].as_ref().unwrap();
                    let w = p.weights.values();
                    for (o, (d, b)) in dst.iter_mut().zip(p.bias.values()).enumerate() {
                        let row = &w[o * in_dim..(o + 1) * in_dim];
                        *d = b + dot(row, src);
                    }
                    debug_assert_eq!(dst.len(), out_dim);
                }
                LayerSpec::ReLU => {
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d = relu(s);
                    }
                }
                LayerSpec::ReLU6 => {
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d = relu6(s);
                    }
                }
            }
        }
        let logits = self.acts.last().unwrap();
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite(model.layers.len() - 1));
        }
        self.has_forward = true;
        Ok(logits)
    }

    /// Logits of the most recent forward pass.
    pub fn logits(&self) -> Result<&[f64], NnError> {
        if !self.has_forward {
            return Err(NnError::NoForwardState);
        }
        Ok(self.acts.last().unwrap())
    }

    /// Backpropagates `upstream = dL/dlogits` and returns fresh gradients.
    pub fn backward(
        &mut self,
        model: &NetworkModel,
        upstream: &[f64],
    ) -> Result<Gradients, NnError> {
        let mut grads = Gradients::zeros_like(model);
        self.backward_into(model, upstream, &mut grads, true)?;
        Ok(grads)
    }

    /// Adds this sample's parameter gradients into `grads`. The input
    /// gradient is overwritten (not accumulated) when `want_input` is set.
    pub fn backward_into(
        &mut self,
        model: &NetworkModel,
        upstream: &[f64],
        grads: &mut Gradients,
        want_input: bool,
    ) -> Result<(), NnError> {
        if !self.has_forward {
            return Err(NnError::NoForwardState);
        }
        self.check_model(model)?;
        if upstream.len() != model.num_classes {
            return Err(NnError::ShapeMismatch(format!(
                "upstream gradient has {} entries, expected {}",
                upstream.len(),
                model.num_classes
            )));
        }
        let mut delta = std::mem::take(&mut self.delta);
        let mut prev = std::mem::take(&mut self.delta_prev);
        delta.clear();
        delta.extend_from_slice(upstream);

        for i in (0..model.layers.len()).rev() {
            let input = &self.acts[i];
            let in_shape = self.shapes[i];
            let need_prev = i > 0 || want_input;
            prev.clear();
            prev.resize(input.len(), 0.0);
            match model.layers[i] {
                LayerSpec::Conv {
                    kernel_size,
                    stride,
                    ..
                } => {
                    let p = model.params[i].as_ref().unwrap();
                    let g = grads.params[i].as_mut().unwrap();
                    conv_backward(
                        input,
                        in_shape,
                        p,
                        kernel_size,
                        stride,
                        self.shapes[i + 1],
                        &delta,
                        g,
                        need_prev.then_some(prev.as_mut_slice()),
                    );
                }
                LayerSpec::Subsample { pool_size } => {
                    pool_backward(in_shape, pool_size, &delta, &mut prev);
                }
                LayerSpec::Dense { in_dim, .. } => {
                    let p = model.params[i].as_ref().unwrap();
                    let g = grads.params[i].as_mut().unwrap();
                    let w = p.weights.values();
                    let gw = g.weights.values_mut();
                    for (o, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        axpy(d, input, &mut gw[o * in_dim..(o + 1) * in_dim]);
                        if need_prev {
                            axpy(d, &w[o * in_dim..(o + 1) * in_dim], &mut prev);
                        }
                    }
                    for (gb, &d) in g.bias.values_mut().iter_mut().zip(delta.iter()) {
                        *gb += d;
                    }
                }
                LayerSpec::ReLU => {
                    for ((p, &d), &x) in prev.iter_mut().zip(delta.iter()).zip(input.iter()) {
                        *p = if x > 0.0 { d } else { 0.0 };
                    }
                }
                LayerSpec::ReLU6 => {
                    for ((p, &d), &x) in prev.iter_mut().zip(delta.iter()).zip(input.iter()) {
                        *p = if x > 0.0 && x < RELU6_CAP { d } else { 0.0 };
                    }
                }
            }
            std::mem::swap(&mut delta, &mut prev);
        }
        if want_input {
            grads.input.copy_from_slice(&delta);
        }
        self.delta = delta;
        self.delta_prev = prev;
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn conv_forward(
    src: &[f64],
    [c_in, h, w]: [usize; 3],
    p: &LayerParams,
    k: usize,
    stride: usize,
    [c_out, oh, ow]: [usize; 3],
    dst: &mut [f64],
) {
    let weights = p.weights.values();
    for o in 0..c_out {
        let out = &mut dst[o * oh * ow..(o + 1) * oh * ow];
        out.fill(p.bias.values()[o]);
        for c in 0..c_in {
            let plane = &src[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[((o * c_in + c) * k + ky) * k + kx];
                    for y in 0..oh {
                        let row = &plane[(y * stride + ky) * w + kx..];
                        let out_row = &mut out[y * ow..(y + 1) * ow];
                        if stride == 1 {
                            axpy(wv, &row[..ow], out_row);
                        } else {
                            for (x, o) in out_row.iter_mut().enumerate() {
                                *o += wv * row[x * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    src: &[f64],
    [c_in, h, w]: [usize; 3],
    p: &LayerParams,
    k: usize,
    stride: usize,
    [c_out, oh, ow]: [usize; 3],
    delta: &[f64],
    g: &mut LayerParams,
    mut prev: Option<&mut [f64]>,
) {
    let weights = p.weights.values();
    let gw = g.weights.values_mut();
    for o in 0..c_out {
        let d_out = &delta[o * oh * ow..(o + 1) * oh * ow];
        g.bias.values_mut()[o] += d_out.iter().sum::<f64>();
        for c in 0..c_in {
            let plane = &src[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * c_in + c) * k + ky) * k + kx;
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let row = &plane[(y * stride + ky) * w + kx..];
                        let d_row = &d_out[y * ow..(y + 1) * ow];
                        if stride == 1 {
                            acc += dot(&row[..ow], d_row);
                        } else {
                            acc += d_row
                                .iter()
                                .enumerate()
                                .map(|(x, d)| d * row[x * stride])
                                .sum::<f64>();
                        }
                    }
                    gw[widx] += acc;
                    if let Some(prev) = prev.as_deref_mut() {
                        let wv = weights[widx];
                        let prev_plane = &mut prev[c * h * w..(c + 1) * h * w];
                        for y in 0..oh {
                            let base = (y * stride + ky) * w + kx;
                            let d_row = &d_out[y * ow..(y + 1) * ow];
                            if stride == 1 {
                                axpy(wv, d_row, &mut prev_plane[base..base + ow]);
                            } else {
                                for (x, &d) in d_row.iter().enumerate() {
                                    prev_plane[base + x * stride] += wv * d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn pool_forward(src: &[f64], [c, h, w]: [usize; 3], p: usize, dst: &mut [f64]) {
    let (oh, ow) = (h / p, w / p);
    let scale = 1.0 / (p * p) as f64;
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..p {
                    let row = &src[ch * h * w + (y * p + dy) * w + x * p..];
                    acc += row[..p].iter().sum::<f64>();
                }
                dst[(ch * oh + y) * ow + x] = acc * scale;
            }
        }
    }
}

fn pool_backward([c, h, w]: [usize; 3], p: usize, delta: &[f64], prev: &mut [f64]) {
    let (oh, ow) = (h / p, w / p);
    let scale = 1.0 / (p * p) as f64;
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                prev[(ch * h + yy) * w + xx] = delta[(ch * oh + yy / p) * ow + xx / p] * scale;
            }
        }
    }
}
