use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::{logit_gradient, sample_loss, softmax_row};
use super::{NnError, Result, Tensor};
use crate::data::{ClassLabel, ClassWeights, NUM_CLASSES};
use crate::parallel::Exec;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Cross-correlation with bias and zero padding.
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out_features: usize,
    },
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    /// conv(8, 3x3) - relu - maxpool(2) - conv(16, 3x3) - relu - maxpool(2)
    /// - flatten - dense(8), with same-padding convolutions.
    pub fn small_cnn(height: usize, width: usize) -> ModelSpec {
        ModelSpec {
            input: [3, height, width],
            layers: vec![
                Layer::Conv2d {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::MaxPool { kernel: 2, stride: 2 },
                Layer::Conv2d {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::MaxPool { kernel: 2, stride: 2 },
                Layer::Flatten,
                Layer::Dense {
                    out_features: NUM_CLASSES,
                },
            ],
        }
    }

    /// Activation shapes: the input followed by each layer's output.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(NnError::InvalidSpec(format!(
                "input {:?} has a zero dimension",
                self.input
            )));
        }
        let mut shapes = vec![Shape::Map { c, h, w }];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let bad = |msg: &str| NnError::InvalidSpec(format!("layer {i} ({layer:?}): {msg}"));
            let next = match (*layer, cur) {
                (
                    Layer::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    Shape::Map { h, w, .. },
                ) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("sizes must be positive"));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(bad("kernel larger than padded input"));
                    }
                    Shape::Map {
                        c: out_channels,
                        h: (h + 2 * padding - kernel) / stride + 1,
                        w: (w + 2 * padding - kernel) / stride + 1,
                    }
                }
                (Layer::MaxPool { kernel, stride }, Shape::Map { c, h, w }) => {
                    if kernel == 0 || stride == 0 {
                        return Err(bad("sizes must be positive"));
                    }
                    if h < kernel || w < kernel {
                        return Err(bad("window larger than input"));
                    }
                    Shape::Map {
                        c,
                        h: (h - kernel) / stride + 1,
                        w: (w - kernel) / stride + 1,
                    }
                }
                (Layer::Relu, s) => s,
                (Layer::Flatten, s) => Shape::Flat(s.len()),
                (Layer::Dense { out_features }, Shape::Flat(_)) => {
                    if out_features == 0 {
                        return Err(bad("out_features must be positive"));
                    }
                    Shape::Flat(out_features)
                }
                (Layer::Dense { .. }, Shape::Map { .. }) => return Err(bad("dense needs a flattened input")),
                (_, Shape::Flat(_)) => return Err(bad("spatial layer after flatten")),
            };
            shapes.push(next);
        }
        if shapes.last() != Some(&Shape::Flat(NUM_CLASSES)) {
            return Err(NnError::InvalidSpec(format!(
                "network must end in {NUM_CLASSES} logits, ends in {:?}",
                shapes.last().unwrap()
            )));
        }
        Ok(shapes)
    }
}

/// Location of one layer's parameters in the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    offset: usize,
    weights: usize,
    biases: usize,
    fan_in: usize,
}

/// Flat parameter (or gradient) buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub values: Vec<f64>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A validated [`ModelSpec`] with its parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    shapes: Vec<Shape>,
    slots: Vec<Option<Slot>>,
    param_count: usize,
}

/// Per-sample forward state kept for the backward pass.
struct Trace {
    /// Input to each layer, then the logits.
    acts: Vec<Vec<f64>>,
    /// Argmax positions for max-pool layers.
    pool_idx: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(spec: ModelSpec) -> Result<Network> {
        let shapes = spec.shapes()?;
        let mut slots = Vec::with_capacity(spec.layers.len());
        let mut offset = 0;
        for (layer, input) in spec.layers.iter().zip(&shapes) {
            let slot = match (*layer, *input) {
                (
                    Layer::Conv2d {
                        out_channels, kernel, ..
                    },
                    Shape::Map { c, .. },
                ) => Some(Slot {
                    offset,
                    weights: out_channels * c * kernel * kernel,
                    biases: out_channels,
                    fan_in: c * kernel * kernel,
                }),
                (Layer::Dense { out_features }, Shape::Flat(n)) => Some(Slot {
                    offset,
                    weights: out_features * n,
                    biases: out_features,
                    fan_in: n,
                }),
                _ => None,
            };
            if let Some(s) = slot {
                offset += s.weights + s.biases;
            }
            slots.push(slot);
        }
        Ok(Network {
            spec,
            shapes,
            slots,
            param_count: offset,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_len(&self) -> usize {
        self.shapes[0].len()
    }

    pub fn zero_params(&self) -> Params {
        Params {
            values: vec![0.0; self.param_count],
        }
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = rng::seeded(seed);
        let mut values = vec![0.0; self.param_count];
        for slot in self.slots.iter().flatten() {
            let normal = Normal::new(0.0, (2.0 / slot.fan_in as f64).sqrt()).expect("positive std");
            for v in &mut values[slot.offset..slot.offset + slot.weights] {
                *v = normal.sample(&mut rng);
            }
        }
        Params { values }
    }

    /// Weight block of layer `layer` (row-major `[out, in, k, k]` for
    /// convolutions, `[out, in]` for dense), if it has parameters.
    pub fn weights<'a>(&self, params: &'a Params, layer: usize) -> Option<&'a [f64]> {
        self.slots[layer].map(|s| &params.values[s.offset..s.offset + s.weights])
    }

    pub fn biases<'a>(&self, params: &'a Params, layer: usize) -> Option<&'a [f64]> {
        self.slots[layer].map(|s| &params.values[s.offset + s.weights..s.offset + s.weights + s.biases])
    }

    /// Mutable weight and bias blocks of `layer`.
    pub fn layer_params_mut<'a>(&self, params: &'a mut Params, layer: usize) -> Option<(&'a mut [f64], &'a mut [f64])> {
        self.slots[layer].map(|s| params.values[s.offset..s.offset + s.weights + s.biases].split_at_mut(s.weights))
    }

    fn check_params(&self, params: &Params) -> Result<()> {
        if params.len() != self.param_count {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count,
                params.len()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let [c, h, w] = self.spec.input;
        if batch.shape().len() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(NnError::ShapeMismatch(format!(
                "batch shape {:?} does not match input [B, {c}, {h}, {w}]",
                batch.shape()
            )));
        }
        Ok(())
    }

    fn trace(&self, params: &Params, input: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut pool_idx = Vec::new();
        acts.push(input.to_vec());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let out = match (*layer, self.shapes[i], self.shapes[i + 1]) {
                (
                    Layer::Conv2d {
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    Shape::Map { c: ic, h: ih, w: iw },
                    Shape::Map { c: oc, h: oh, w: ow },
                ) => {
                    let w = self.weights(params, i).unwrap();
                    let b = self.biases(params, i).unwrap();
                    let mut y = vec![0.0; oc * oh * ow];
                    for o in 0..oc {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut s = b[o];
                                for c in 0..ic {
                                    for ky in 0..kernel {
                                        let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&v| v < ih)
                                        else {
                                            continue;
                                        };
                                        let wrow = ((o * ic + c) * kernel + ky) * kernel;
                                        let xrow = (c * ih + iy) * iw;
                                        for kx in 0..kernel {
                                            if let Some(ix) =
                                                (ox * stride + kx).checked_sub(padding).filter(|&v| v < iw)
                                            {
                                                s += w[wrow + kx] * x[xrow + ix];
                                            }
                                        }
                                    }
                                }
                                y[(o * oh + oy) * ow + ox] = s;
                            }
                        }
                    }
                    y
                }
                (Layer::Relu, _, _) => x.iter().map(|&v| v.max(0.0)).collect(),
                (
                    Layer::MaxPool { kernel, stride },
                    Shape::Map { c: ch, h: ih, w: iw },
                    Shape::Map { h: oh, w: ow, .. },
                ) => {
                    let mut y = vec![0.0; ch * oh * ow];
                    let mut idx = vec![0; ch * oh * ow];
                    for c in 0..ch {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut at = 0;
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let p = (c * ih + oy * stride + ky) * iw + ox * stride + kx;
                                        if x[p] > best {
                                            best = x[p];
                                            at = p;
                                        }
                                    }
                                }
                                let o = (c * oh + oy) * ow + ox;
                                y[o] = best;
                                idx[o] = at;
                            }
                        }
                    }
                    pool_idx.push(idx);
                    y
                }
                (Layer::Flatten, _, _) => x.clone(),
                (Layer::Dense { out_features }, Shape::Flat(n), _) => {
                    let w = self.weights(params, i).unwrap();
                    let b = self.biases(params, i).unwrap();
                    (0..out_features)
                        .map(|j| b[j] + w[j * n..(j + 1) * n].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
                        .collect()
                }
                _ => unreachable!("shapes validated in Network::new"),
            };
            acts.push(out);
        }
        Trace { acts, pool_idx }
    }

    /// Accumulates parameter gradients of one sample into `grad`, given the
    /// gradient with respect to its logits.
    fn backprop(&self, params: &Params, trace: &Trace, dlogits: Vec<f64>, grad: &mut [f64]) {
        let mut delta = dlogits;
        let mut pool_slot = trace.pool_idx.len();
        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            let x = &trace.acts[i];
            let mut dx = vec![0.0; x.len()];
            match (*layer, self.shapes[i], self.shapes[i + 1]) {
                (
                    Layer::Conv2d {
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    Shape::Map { c: ic, h: ih, w: iw },
                    Shape::Map { c: oc, h: oh, w: ow },
                ) => {
                    let slot = self.slots[i].unwrap();
                    let w = self.weights(params, i).unwrap();
                    let (gw, gb) =
                        grad[slot.offset..slot.offset + slot.weights + slot.biases].split_at_mut(slot.weights);
                    for o in 0..oc {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let d = delta[(o * oh + oy) * ow + ox];
                                if d == 0.0 {
                                    continue;
                                }
                                gb[o] += d;
                                for c in 0..ic {
                                    for ky in 0..kernel {
                                        let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&v| v < ih)
                                        else {
                                            continue;
                                        };
                                        let wrow = ((o * ic + c) * kernel + ky) * kernel;
                                        let xrow = (c * ih + iy) * iw;
                                        for kx in 0..kernel {
                                            if let Some(ix) =
                                                (ox * stride + kx).checked_sub(padding).filter(|&v| v < iw)
                                            {
                                                gw[wrow + kx] += d * x[xrow + ix];
                                                dx[xrow + ix] += d * w[wrow + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (Layer::Relu, _, _) => {
                    for ((g, &v), &d) in dx.iter_mut().zip(x).zip(&delta) {
                        if v > 0.0 {
                            *g = d;
                        }
                    }
                }
                (Layer::MaxPool { .. }, _, _) => {
                    pool_slot -= 1;
                    for (&at, &d) in trace.pool_idx[pool_slot].iter().zip(&delta) {
                        dx[at] += d;
                    }
                }
                (Layer::Flatten, _, _) => dx.copy_from_slice(&delta),
                (Layer::Dense { out_features }, Shape::Flat(n), _) => {
                    let slot = self.slots[i].unwrap();
                    let w = self.weights(params, i).unwrap();
                    let (gw, gb) =
                        grad[slot.offset..slot.offset + slot.weights + slot.biases].split_at_mut(slot.weights);
                    for j in 0..out_features {
                        let d = delta[j];
                        gb[j] += d;
                        let row = &w[j * n..(j + 1) * n];
                        for k in 0..n {
                            gw[j * n + k] += d * x[k];
                            dx[k] += d * row[k];
                        }
                    }
                }
                _ => unreachable!("shapes validated in Network::new"),
            }
            delta = dx;
        }
    }

    /// Logits for a single planar sample.
    pub fn logits(&self, params: &Params, input: &[f64]) -> Vec<f64> {
        self.trace(params, input).acts.pop().unwrap()
    }

    /// Batched forward pass: `[B, C, H, W]` to `[B, 8]` logits.
    pub fn forward(&self, params: &Params, batch: &Tensor, exec: Exec) -> Result<Tensor> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let rows = exec.map_indexed(batch.batch(), |b| self.logits(params, batch.row(b)));
        Tensor::stack(&[NUM_CLASSES], rows)
    }

    /// Mean weighted cross-entropy of the batch and its exact gradient.
    ///
    /// Samples are processed independently (possibly in parallel) and their
    /// contributions summed in batch order.
    pub fn loss_and_grad(
        &self,
        params: &Params,
        batch: &Tensor,
        labels: &[ClassLabel],
        weights: &ClassWeights,
        exec: Exec,
    ) -> Result<(f64, Params)> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        if labels.len() != batch.batch() {
            return Err(NnError::ShapeMismatch(format!(
                "{} labels for a batch of {}",
                labels.len(),
                batch.batch()
            )));
        }
        let scale = 1.0 / batch.batch() as f64;
        let per_sample = exec.map_indexed(batch.batch(), |b| {
            let trace = self.trace(params, batch.row(b));
            let logits = trace.acts.last().unwrap();
            let probs = softmax_row(logits);
            let y = labels[b];
            let w = weights.get(y);
            let loss = sample_loss(logits, y, w) * scale;
            let mut grad = vec![0.0; self.param_count];
            if w != 0.0 {
                self.backprop(params, &trace, logit_gradient(&probs, y, w, scale), &mut grad);
            }
            (loss, grad)
        });
        let mut total = 0.0;
        let mut grad = vec![0.0; self.param_count];
        for (loss, g) in per_sample {
            total += loss;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((total, Params { values: grad }))
    }

    /// Loss only (used by finite differences).
    pub fn loss(&self, params: &Params, batch: &Tensor, labels: &[ClassLabel], weights: &ClassWeights) -> Result<f64> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let scale = 1.0 / batch.batch() as f64;
        let mut total = 0.0;
        for (b, y) in labels.iter().enumerate() {
            total += sample_loss(&self.logits(params, batch.row(b)), *y, weights.get(*y)) * scale;
        }
        Ok(total)
    }
}

/// Convenience wrapper: validates `spec` and runs [`Network::forward`].
pub fn forward(spec: &ModelSpec, params: &Params, batch: &Tensor) -> Result<Tensor> {
    Network::new(spec.clone())?.forward(params, batch, Exec::default())
}

/// Convenience wrapper returning only the gradient of the weighted loss.
pub fn backward(
    spec: &ModelSpec,
    params: &Params,
    batch: &Tensor,
    labels: &[ClassLabel],
    weights: &ClassWeights,
) -> Result<Params> {
    Ok(Network::new(spec.clone())?
        .loss_and_grad(params, batch, labels, weights, Exec::default())?
        .1)
}
