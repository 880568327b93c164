//! Quantized tensors, models and the accurate integer reference path.
//!
//! Activations are unsigned 8-bit, weights signed 8-bit, biases and
//! accumulators signed 32-bit. Tensors with three dimensions use HWC layout
//! (NHWC with an implicit batch of one).

use serde::{Deserialize, Serialize};

use crate::perforation::optimal_c;
use crate::{Error, Rational, Result};

/// Element role of a [`QTensor`], fixing the admissible value range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Activation,
    Weight,
    Accumulator,
}

impl Role {
    pub fn range(self) -> (i64, i64) {
        match self {
            Role::Activation => (0, 255),
            Role::Weight => (-128, 127),
            Role::Accumulator => (i32::MIN as i64, i32::MAX as i64),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Role::Activation => "activation",
            Role::Weight => "weight",
            Role::Accumulator => "accumulator",
        }
    }
}

/// Shaped integer tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    shape: Vec<usize>,
    elems: Vec<i32>,
    role: Role,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, elems: Vec<i32>, role: Role) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != elems.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {len} elements, got {}",
                elems.len()
            )));
        }
        let (lo, hi) = role.range();
        if let Some((i, &v)) = elems
            .iter()
            .enumerate()
            .find(|(_, &v)| (v as i64) < lo || (v as i64) > hi)
        {
            return Err(Error::Range {
                what: role.name(),
                path: format!("elems[{i}]"),
                value: v as i64,
            });
        }
        Ok(QTensor { shape, elems, role })
    }

    /// Activation tensor from raw bytes; cannot violate the role range.
    pub fn from_activations(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        Self::new(shape, bytes.iter().map(|&b| b as i32).collect(), Role::Activation)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn elems(&self) -> &[i32] {
        &self.elems
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    fn activation_bytes(&self) -> Result<Vec<u8>> {
        if self.role != Role::Activation {
            return Err(Error::Shape(format!(
                "expected an activation tensor, got {}",
                self.role.name()
            )));
        }
        Ok(self.elems.iter().map(|&v| v as u8).collect())
    }
}

/// One output channel: weights over the flattened receptive field, bias and
/// the control constant `C` (exact mean of the weights and its 8-bit rounding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvFilter {
    weights: Vec<i8>,
    bias: i32,
    c_exact: Rational,
    c_quantized: i8,
}

impl ConvFilter {
    pub fn new(weights: Vec<i8>, bias: i32) -> Result<Self> {
        let c_exact = optimal_c(&weights)?;
        // Ratio::round rounds half away from zero; the mean of i8 values is
        // already inside [-128, 127], the clamp only documents the contract.
        let c_quantized = c_exact.round().to_integer().clamp(-128, 127) as i8;
        Ok(ConvFilter {
            weights,
            bias,
            c_exact,
            c_quantized,
        })
    }

    pub fn weights(&self) -> &[i8] {
        &self.weights
    }

    pub fn bias(&self) -> i32 {
        self.bias
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn c_exact(&self) -> Rational {
        self.c_exact
    }

    pub fn c_quantized(&self) -> i8 {
        self.c_quantized
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// A single inference layer.
///
/// `Conv2d` and `Dense` take an activation tensor and produce accumulators;
/// when `shift` is set the output is requantized (ReLU-fused) back to
/// activations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv2d {
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
        shift: Option<u32>,
        filters: Vec<ConvFilter>,
    },
    Dense {
        shift: Option<u32>,
        filters: Vec<ConvFilter>,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Requantize {
        shift: u32,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Requantize { .. } => "requantize",
        }
    }

    pub fn filters(&self) -> Option<&[ConvFilter]> {
        match self {
            Layer::Conv2d { filters, .. } | Layer::Dense { filters, .. } => Some(filters),
            _ => None,
        }
    }

    pub fn is_mac_layer(&self) -> bool {
        self.filters().is_some()
    }
}

/// Output spatial size and leading padding of a convolution along one axis.
fn conv_axis(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if input < kernel {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

fn check_shift(shift: u32, idx: usize) -> Result<()> {
    if shift > 31 {
        return Err(Error::Config(format!("layer {idx}: shift {shift} outside [0, 31]")));
    }
    Ok(())
}

/// Shape and role flowing out of `layer` given its input.
fn infer_output(layer: &Layer, idx: usize, shape: &[usize], role: Role) -> Result<(Vec<usize>, Role)> {
    let need_act = |what: &str| -> Result<()> {
        if role != Role::Activation {
            return Err(Error::Shape(format!(
                "layer {idx} ({what}) needs activation input, got {}",
                role.name()
            )));
        }
        Ok(())
    };
    let check_filters = |filters: &[ConvFilter], k: usize| -> Result<()> {
        if filters.is_empty() {
            return Err(Error::Shape(format!("layer {idx} has no filters")));
        }
        for (f, filter) in filters.iter().enumerate() {
            if filter.k() != k {
                return Err(Error::Shape(format!(
                    "layer {idx} filter {f}: {} weights, receptive field needs {k}",
                    filter.k()
                )));
            }
        }
        Ok(())
    };
    match layer {
        Layer::Conv2d {
            kernel,
            stride,
            padding,
            shift,
            filters,
        } => {
            need_act("conv2d")?;
            let [h, w, c] = match shape {
                &[h, w, c] => [h, w, c],
                _ => {
                    return Err(Error::Shape(format!(
                        "layer {idx}: conv2d needs HWC input, got {shape:?}"
                    )))
                }
            };
            if *stride == 0 || kernel[0] == 0 || kernel[1] == 0 {
                return Err(Error::Config(format!("layer {idx}: kernel and stride must be >= 1")));
            }
            let (oh, _) = conv_axis(h, kernel[0], *stride, *padding)
                .ok_or_else(|| Error::Shape(format!("layer {idx}: kernel taller than input")))?;
            let (ow, _) = conv_axis(w, kernel[1], *stride, *padding)
                .ok_or_else(|| Error::Shape(format!("layer {idx}: kernel wider than input")))?;
            check_filters(filters, kernel[0] * kernel[1] * c)?;
            let out_role = match shift {
                Some(s) => {
                    check_shift(*s, idx)?;
                    Role::Activation
                }
                None => Role::Accumulator,
            };
            Ok((vec![oh, ow, filters.len()], out_role))
        }
        Layer::Dense { shift, filters } => {
            need_act("dense")?;
            check_filters(filters, shape.iter().product())?;
            let out_role = match shift {
                Some(s) => {
                    check_shift(*s, idx)?;
                    Role::Activation
                }
                None => Role::Accumulator,
            };
            Ok((vec![filters.len()], out_role))
        }
        Layer::Relu => Ok((shape.to_vec(), role)),
        Layer::MaxPool { window, stride } => {
            if *window == 0 || *stride == 0 {
                return Err(Error::Config(format!("layer {idx}: window and stride must be >= 1")));
            }
            match shape {
                &[h, w, c] if h >= *window && w >= *window => {
                    Ok((vec![(h - window) / stride + 1, (w - window) / stride + 1, c], role))
                }
                _ => Err(Error::Shape(format!(
                    "layer {idx}: maxpool window {window} does not fit input {shape:?}"
                ))),
            }
        }
        Layer::Requantize { shift } => {
            check_shift(*shift, idx)?;
            if role != Role::Accumulator {
                return Err(Error::Shape(format!("layer {idx}: requantize needs accumulator input")));
            }
            Ok((shape.to_vec(), Role::Activation))
        }
    }
}

/// A validated layer pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantModel {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    outputs: Vec<(Vec<usize>, Role)>,
}

impl QuantModel {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut outputs = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        let mut role = Role::Activation;
        for (idx, layer) in layers.iter().enumerate() {
            let (s, r) = infer_output(layer, idx, &shape, role)?;
            outputs.push((s.clone(), r));
            shape = s;
            role = r;
        }
        Ok(QuantModel {
            input_shape,
            layers,
            outputs,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Output shape of layer `idx`.
    pub fn output_shape(&self, idx: usize) -> &[usize] {
        &self.outputs[idx].0
    }

    pub fn class_count(&self) -> usize {
        self.outputs
            .last()
            .map(|(s, _)| s.iter().product())
            .unwrap_or_else(|| self.input_shape.iter().product())
    }
}

/// Receptive-field windows of a MAC layer, one row of length `k` per output
/// position. Padded positions hold zero activations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patches {
    k: usize,
    data: Vec<u8>,
}

impl Patches {
    pub fn new(k: usize, data: Vec<u8>) -> Result<Self> {
        if k == 0 || !data.len().is_multiple_of(k) {
            return Err(Error::Shape(format!(
                "{} bytes do not split into windows of {k}",
                data.len()
            )));
        }
        Ok(Patches { k, data })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.k
    }

    pub fn window(&self, p: usize) -> &[u8] {
        &self.data[p * self.k..(p + 1) * self.k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks_exact(self.k)
    }
}

/// Gathers the receptive-field windows of a conv2d or dense layer.
pub fn layer_patches(layer: &Layer, input: &QTensor) -> Result<Patches> {
    let bytes = input.activation_bytes()?;
    match layer {
        Layer::Dense { .. } => Patches::new(bytes.len(), bytes),
        Layer::Conv2d {
            kernel: [kh, kw],
            stride,
            padding,
            ..
        } => {
            let [h, w, c] = match input.shape() {
                &[h, w, c] => [h, w, c],
                s => return Err(Error::Shape(format!("conv2d needs HWC input, got {s:?}"))),
            };
            let (oh, pad_top) =
                conv_axis(h, *kh, *stride, *padding).ok_or_else(|| Error::Shape("kernel taller than input".into()))?;
            let (ow, pad_left) =
                conv_axis(w, *kw, *stride, *padding).ok_or_else(|| Error::Shape("kernel wider than input".into()))?;
            let k = kh * kw * c;
            let mut data = vec![0u8; oh * ow * k];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (oy * ow + ox) * k;
                    for dy in 0..*kh {
                        let iy = (oy * stride + dy) as isize - pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..*kw {
                            let ix = (ox * stride + dx) as isize - pad_left as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = (iy as usize * w + ix as usize) * c;
                            let dst = base + (dy * kw + dx) * c;
                            data[dst..dst + c].copy_from_slice(&bytes[src..src + c]);
                        }
                    }
                }
            }
            Patches::new(k, data)
        }
        other => Err(Error::Shape(format!("{} layer has no receptive field", other.kind()))),
    }
}

/// Computes every (window, filter) dot product of a MAC layer.
///
/// The result is window-major: `out[p * filters.len() + f]`.
pub trait MacEngine {
    fn compute(&self, filters: &[ConvFilter], patches: &Patches) -> Result<Vec<i32>>;
}

/// Exact integer engine.
#[derive(Debug, Clone, Copy, Default)]
pub struct AccurateEngine;

impl MacEngine for AccurateEngine {
    fn compute(&self, filters: &[ConvFilter], patches: &Patches) -> Result<Vec<i32>> {
        let mut out = Vec::with_capacity(patches.count() * filters.len());
        for window in patches.iter() {
            for filter in filters {
                out.push(conv_accurate(filter, window)?);
            }
        }
        Ok(out)
    }
}

pub fn accurate_mul(w: i8, a: u8) -> i32 {
    w as i32 * a as i32
}

/// `B + sum(W_j * A_j)` with checked 32-bit accumulation.
pub fn conv_accurate(filter: &ConvFilter, window: &[u8]) -> Result<i32> {
    if window.len() != filter.k() {
        return Err(Error::Shape(format!(
            "window of {} activations for a filter of {}",
            window.len(),
            filter.k()
        )));
    }
    filter
        .weights()
        .iter()
        .zip(window)
        .try_fold(filter.bias(), |acc, (&w, &a)| acc.checked_add(accurate_mul(w, a)))
        .ok_or(Error::Overflow("accurate convolution"))
}

/// Power-of-two requantization with fused ReLU and saturation.
pub fn requantize(acc: i32, shift: u32) -> u8 {
    assert!(shift <= 31, "requantize shift {shift} outside [0, 31]");
    (acc >> shift).clamp(0, 255) as u8
}

fn finish_mac_layer(out: Vec<i32>, shape: Vec<usize>, shift: Option<u32>) -> Result<QTensor> {
    match shift {
        Some(s) => QTensor::new(
            shape,
            out.into_iter().map(|v| requantize(v, s) as i32).collect(),
            Role::Activation,
        ),
        None => QTensor::new(shape, out, Role::Accumulator),
    }
}

/// Output shape of a MAC layer for the given input.
fn mac_output_shape(layer: &Layer, input: &QTensor) -> Result<Vec<usize>> {
    match layer {
        Layer::Conv2d {
            kernel,
            stride,
            padding,
            filters,
            ..
        } => {
            let shape = input.shape();
            let oh = conv_axis(shape[0], kernel[0], *stride, *padding);
            let ow = conv_axis(shape[1], kernel[1], *stride, *padding);
            match (oh, ow) {
                (Some((oh, _)), Some((ow, _))) => Ok(vec![oh, ow, filters.len()]),
                _ => Err(Error::Shape(format!("kernel {kernel:?} does not fit input {shape:?}"))),
            }
        }
        Layer::Dense { filters, .. } => Ok(vec![filters.len()]),
        other => Err(Error::Shape(format!("{} is not a MAC layer", other.kind()))),
    }
}

/// Wraps the raw MAC outputs of `layer` into its output tensor.
pub fn assemble_mac_output(layer: &Layer, input: &QTensor, out: Vec<i32>) -> Result<QTensor> {
    let shape = mac_output_shape(layer, input)?;
    let shift = match layer {
        Layer::Conv2d { shift, .. } | Layer::Dense { shift, .. } => *shift,
        _ => None,
    };
    finish_mac_layer(out, shape, shift)
}

/// Runs one layer, delegating conv2d / dense products to `engine`.
pub fn apply_layer<E: MacEngine + ?Sized>(layer: &Layer, input: &QTensor, engine: &E) -> Result<QTensor> {
    match layer {
        Layer::Conv2d { filters, .. } | Layer::Dense { filters, .. } => {
            let patches = layer_patches(layer, input)?;
            let out = engine.compute(filters, &patches)?;
            assemble_mac_output(layer, input, out)
        }
        Layer::Relu => {
            let elems = input.elems().iter().map(|&v| v.max(0)).collect();
            QTensor::new(input.shape().to_vec(), elems, input.role())
        }
        Layer::MaxPool { window, stride } => {
            let [h, w, c] = match input.shape() {
                &[h, w, c] => [h, w, c],
                s => return Err(Error::Shape(format!("maxpool needs HWC input, got {s:?}"))),
            };
            if h < *window || w < *window {
                return Err(Error::Shape(format!("maxpool window {window} larger than input")));
            }
            let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
            let src = input.elems();
            let mut out = Vec::with_capacity(oh * ow * c);
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = i32::MIN;
                        for dy in 0..*window {
                            for dx in 0..*window {
                                let v = src[((oy * stride + dy) * w + ox * stride + dx) * c + ch];
                                best = best.max(v);
                            }
                        }
                        out.push(best);
                    }
                }
            }
            QTensor::new(vec![oh, ow, c], out, input.role())
        }
        Layer::Requantize { shift } => {
            if input.role() != Role::Accumulator {
                return Err(Error::Shape("requantize needs accumulator input".into()));
            }
            let elems = input.elems().iter().map(|&v| requantize(v, *shift) as i32).collect();
            QTensor::new(input.shape().to_vec(), elems, Role::Activation)
        }
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inference {
    pub logits: Vec<i32>,
    pub label: usize,
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[i32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Forward pass of `model` with conv2d / dense products computed by `engine`.
pub fn run_model<E: MacEngine + ?Sized>(model: &QuantModel, input: &QTensor, engine: &E) -> Result<Inference> {
    if input.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape()
        )));
    }
    if input.role() != Role::Activation {
        return Err(Error::Shape("model input must be an activation tensor".into()));
    }
    let mut current = input.clone();
    for layer in model.layers() {
        current = apply_layer(layer, &current, engine)?;
    }
    let logits = current.elems().to_vec();
    let label = argmax(&logits);
    Ok(Inference { logits, label })
}

pub fn run_model_accurate(model: &QuantModel, input: &QTensor) -> Result<Inference> {
    run_model(model, input, &AccurateEngine)
}

/// Top-1 outcome of a batch evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evaluation {
    /// Predicted label per sample, in dataset order.
    pub predictions: Vec<usize>,
    pub logits: Vec<Vec<i32>>,
    pub correct: usize,
}

impl Evaluation {
    pub fn samples(&self) -> usize {
        self.predictions.len()
    }

    pub fn top1(&self) -> f64 {
        if self.predictions.is_empty() {
            return 0.0;
        }
        self.correct as f64 / self.predictions.len() as f64
    }
}

/// Runs every dataset sample through `model`, fanning out over samples.
pub fn evaluate<E: MacEngine + Sync + ?Sized>(
    model: &QuantModel,
    dataset: &crate::io::Dataset,
    engine: &E,
) -> Result<Evaluation> {
    use rayon::prelude::*;
    let expected: usize = model.input_shape().iter().product();
    if dataset.sample_len() != expected {
        return Err(Error::Shape(format!(
            "dataset samples hold {} activations, model input needs {expected}",
            dataset.sample_len()
        )));
    }
    let results = dataset
        .samples()
        .par_iter()
        .map(|sample| {
            let input = QTensor::from_activations(model.input_shape().to_vec(), &sample.data)?;
            run_model(model, &input, engine)
        })
        .collect::<Result<Vec<_>>>()?;
    let correct = results
        .iter()
        .zip(dataset.samples())
        .filter(|(r, s)| r.label == s.label as usize)
        .count();
    Ok(Evaluation {
        predictions: results.iter().map(|r| r.label).collect(),
        logits: results.into_iter().map(|r| r.logits).collect(),
        correct,
    })
}
