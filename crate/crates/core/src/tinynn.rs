//! A small fully connected classifier with hand-written forward and backward
//! passes. Per-layer weight gradients are the matrices that defenses operate
//! on; attacks differentiate through the backward pass itself (see
//! [`crate::attack`]).

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_MAGIC: &str = "SVDLAB-MODEL-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Affine layer without a nonlinearity.
    Dense,
    /// Affine layer followed by ReLU.
    DenseRelu,
    /// Final affine layer producing logits for softmax cross-entropy.
    DenseSoftmaxOutput,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::DenseRelu => "dense-relu",
            LayerKind::DenseSoftmaxOutput => "dense-softmax-output",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(LayerKind::Dense),
            "dense-relu" => Ok(LayerKind::DenseRelu),
            "dense-softmax-output" => Ok(LayerKind::DenseSoftmaxOutput),
            other => Err(Error::Format(format!("unknown layer kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub kind: LayerKind,
}

impl LayerParams {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// Validate layer chaining and output-layer placement.
    pub fn new(layers: Vec<LayerParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::InvalidInput(format!(
                    "layer {i}: bias length {} does not match {} outputs",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::InvalidInput(format!("layer {i}: non-finite bias")));
            }
            if i > 0 && l.in_dim() != layers[i - 1].out_dim() {
                return Err(Error::InvalidInput(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.in_dim(),
                    i - 1,
                    layers[i - 1].out_dim()
                )));
            }
            let is_last = i + 1 == layers.len();
            if is_last != (l.kind == LayerKind::DenseSoftmaxOutput) {
                return Err(Error::InvalidInput(
                    "exactly the final layer must be dense-softmax-output".into(),
                ));
            }
        }
        if layers.last().map(LayerParams::out_dim) < Some(2) {
            return Err(Error::InvalidInput("need at least two classes".into()));
        }
        Ok(Self { layers })
    }

    /// Randomly initialised MLP `input → hidden… (ReLU) → classes`.
    ///
    /// Hidden layers use He-normal weights, the output layer uses
    /// `N(0, 1/fan_in)`; biases start at zero.
    pub fn init_mlp(input_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || classes < 2 || hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "bad MLP dimensions: input {input_dim}, hidden {hidden:?}, classes {classes}"
            )));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let last = i + 2 == dims.len();
                let var = if last { 1.0 } else { 2.0 } / fan_in as f64;
                let normal = Normal::new(0.0, var.sqrt()).expect("positive variance");
                let mut r = rng::stream(seed, &[0x1417, i as u64]);
                let weight = Matrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut r));
                LayerParams {
                    weight,
                    bias: vec![0.0; fan_out],
                    kind: if last {
                        LayerKind::DenseSoftmaxOutput
                    } else {
                        LayerKind::DenseRelu
                    },
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Every parameter in layer order (weight then bias per layer).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable access to the `idx`-th flattened parameter.
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            if idx < nw {
                return &mut l.weight.as_mut_slice()[idx];
            }
            idx -= nw;
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Serialize to the versioned text checkpoint format.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        s.push_str(CHECKPOINT_MAGIC);
        s.push('\n');
        s.push_str(&format!("layers {}\n", self.layers.len()));
        for l in &self.layers {
            s.push_str(&format!(
                "layer {} {} {}\n",
                l.kind.as_str(),
                l.out_dim(),
                l.in_dim()
            ));
            push_values(&mut s, "w", l.weight.as_slice());
            push_values(&mut s, "b", &l.bias);
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Format(format!("missing {CHECKPOINT_MAGIC} header")));
        }
        let count: usize = parse_tagged(lines.next(), "layers")?
            .first()
            .ok_or_else(|| Error::Format("missing layer count".into()))?
            .parse()
            .map_err(|e| Error::Format(format!("bad layer count: {e}")))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let head = parse_tagged(lines.next(), "layer")?;
            if head.len() != 3 {
                return Err(Error::Format("layer header needs kind, out, in".into()));
            }
            let kind = LayerKind::parse(head[0])?;
            let out: usize = head[1].parse().map_err(|e| Error::Format(format!("{e}")))?;
            let inp: usize = head[2].parse().map_err(|e| Error::Format(format!("{e}")))?;
            let w = parse_floats(parse_tagged(lines.next(), "w")?)?;
            let b = parse_floats(parse_tagged(lines.next(), "b")?)?;
            let weight = Matrix::new(out, inp, w).map_err(|e| Error::Format(e.to_string()))?;
            layers.push(LayerParams {
                weight,
                bias: b,
                kind,
            });
        }
        Self::new(layers).map_err(|e| Error::Format(e.to_string()))
    }
}

fn push_values(s: &mut String, tag: &str, vals: &[f64]) {
    s.push_str(tag);
    for v in vals {
        s.push(' ');
        s.push_str(&v.to_string());
    }
    s.push('\n');
}

fn parse_tagged<'a>(line: Option<&'a str>, tag: &str) -> Result<Vec<&'a str>> {
    let line =
        line.ok_or_else(|| Error::Format(format!("unexpected end of checkpoint, wanted {tag}")))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(Error::Format(format!("expected line tagged {tag:?}")));
    }
    Ok(parts.collect())
}

fn parse_floats(parts: Vec<&str>) -> Result<Vec<f64>> {
    parts
        .into_iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|e| Error::Format(format!("bad number {p:?}: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight_grad: Matrix,
    pub bias_grad: Vec<f64>,
}

/// Per-layer gradients (or updates) shaped exactly like a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub layers: Vec<LayerGrad>,
}

impl GradSet {
    pub fn zeros_like(model: &ModelParams) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight_grad: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias_grad: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn matches(&self, model: &ModelParams) -> bool {
        self.layers.len() == model.layers.len()
            && self.layers.iter().zip(&model.layers).all(|(g, l)| {
                g.weight_grad.shape() == l.weight.shape() && g.bias_grad.len() == l.bias.len()
            })
    }

    pub fn same_shape(&self, other: &GradSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight_grad.shape() == b.weight_grad.shape()
                    && a.bias_grad.len() == b.bias_grad.len()
            })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight_grad.as_slice().iter().all(|v| v.is_finite())
                && l.bias_grad.iter().all(|v| v.is_finite())
        })
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &GradSet, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a
                .weight_grad
                .as_mut_slice()
                .iter_mut()
                .zip(b.weight_grad.as_slice())
            {
                *x += s * y;
            }
            for (x, y) in a.bias_grad.iter_mut().zip(&b.bias_grad) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight_grad
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v *= s);
            l.bias_grad.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight_grad.as_slice());
            out.extend_from_slice(&l.bias_grad);
        }
        out
    }

    /// Apply `f` to every tensor (weights and biases) in layer order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(l.weight_grad.as_mut_slice());
            f(&mut l.bias_grad);
        }
    }
}

/// One labelled example: flattened image in `[0, 1]` and a class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub label: usize,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l` (so `inputs[0]` is the example).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer; the last entry holds the logits.
    pub pre: Vec<Vec<f64>>,
}

pub fn forward(params: &ModelParams, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if input.len() != params.input_dim() {
        return Err(Error::InvalidInput(format!(
            "input has length {} but model expects {}",
            input.len(),
            params.input_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut a = input.to_vec();
    for l in &params.layers {
        let mut z = l.weight.matvec(&a);
        z.iter_mut().zip(&l.bias).for_each(|(z, b)| *z += b);
        let next = match l.kind {
            LayerKind::DenseRelu => z.iter().map(|&v| v.max(0.0)).collect(),
            LayerKind::Dense | LayerKind::DenseSoftmaxOutput => z.clone(),
        };
        inputs.push(std::mem::replace(&mut a, next));
        pre.push(z);
    }
    Ok((a, ForwardCache { inputs, pre }))
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Derivative mask of a layer's activation at its pre-activation values.
pub(crate) fn activation_mask(kind: LayerKind, pre: &[f64]) -> Vec<f64> {
    match kind {
        LayerKind::DenseRelu => pre
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect(),
        LayerKind::Dense | LayerKind::DenseSoftmaxOutput => vec![1.0; pre.len()],
    }
}

/// `(loss, grads, cache, probs, deltas)` of one example.
pub(crate) type ExampleBackward = (f64, GradSet, ForwardCache, Vec<f64>, Vec<Vec<f64>>);

/// Cross-entropy against a target distribution, with gradients of one example.
///
/// Returns `(loss, grads, cache, probs, deltas)` where `deltas[l]` is the
/// error signal at layer `l`'s pre-activation.
pub(crate) fn example_backward(
    params: &ModelParams,
    input: &[f64],
    target: &[f64],
) -> Result<ExampleBackward> {
    let (logits, cache) = forward(params, input)?;
    if target.len() != logits.len() {
        return Err(Error::InvalidInput(
            "target length must equal class count".into(),
        ));
    }
    let probs = softmax(&logits);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let loss: f64 = target
        .iter()
        .zip(&logits)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, z)| t * (lse - z))
        .sum();

    let n = params.layers.len();
    let mut deltas = vec![Vec::new(); n];
    let mut grads = Vec::with_capacity(n);
    let mut delta: Vec<f64> = probs.iter().zip(target).map(|(p, t)| p - t).collect();
    for l in (0..n).rev() {
        let layer = &params.layers[l];
        grads.push(LayerGrad {
            weight_grad: Matrix::outer(&delta, &cache.inputs[l]),
            bias_grad: delta.clone(),
        });
        deltas[l] = delta.clone();
        if l > 0 {
            let back = layer.weight.matvec_t(&delta);
            let mask = activation_mask(params.layers[l - 1].kind, &cache.pre[l - 1]);
            delta = back.iter().zip(&mask).map(|(b, m)| b * m).collect();
        }
    }
    grads.reverse();
    Ok((loss, GradSet { layers: grads }, cache, probs, deltas))
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Mean softmax cross-entropy over `batch` and the mean per-example gradient.
pub fn loss_and_grad(params: &ModelParams, batch: &[Example]) -> Result<(f64, GradSet)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("batch must not be empty".into()));
    }
    let c = params.num_classes();
    let mut total = GradSet::zeros_like(params);
    let mut loss = 0.0;
    for ex in batch {
        if ex.label >= c {
            return Err(Error::InvalidInput(format!(
                "label {} out of range for {c} classes",
                ex.label
            )));
        }
        let (l, g, ..) = example_backward(params, &ex.input, &one_hot(ex.label, c))?;
        loss += l;
        total.add_scaled(&g, 1.0);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// `params - lr * grads`
pub fn sgd_step(params: &ModelParams, grads: &GradSet, lr: f64) -> Result<ModelParams> {
    if !(lr > 0.0) {
        return Err(Error::InvalidInput(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !grads.matches(params) {
        return Err(Error::InvalidInput(
            "gradient shapes do not match model".into(),
        ));
    }
    let mut out = params.clone();
    for (l, g) in out.layers.iter_mut().zip(&grads.layers) {
        for (w, d) in l
            .weight
            .as_mut_slice()
            .iter_mut()
            .zip(g.weight_grad.as_slice())
        {
            *w -= lr * d;
        }
        for (b, d) in l.bias.iter_mut().zip(&g.bias_grad) {
            *b -= lr * d;
        }
    }
    Ok(out)
}

/// Recover the label of a single-example gradient from the sign of the output
/// bias gradient (softmax minus one-hot is negative only at the true class).
pub fn infer_label_from_grads(grads: &GradSet) -> Result<usize> {
    let last = grads.layers.last().ok_or(Error::Undetermined)?;
    let mut neg = last
        .bias_grad
        .iter()
        .enumerate()
        .filter(|(_, &g)| g < 0.0)
        .map(|(i, _)| i);
    match (neg.next(), neg.next()) {
        (Some(i), None) => Ok(i),
        _ => Err(Error::Undetermined),
    }
}
