//! Dense embedding network `f(x)` with tanh hidden layers, an identity final
//! affine layer and L2 normalisation of the output.
//!
//! Weights of layer `l` are stored row-major with shape `fan_in x fan_out`,
//! so the pre-activation is `z_j = sum_i a_i * w[i * fan_out + j] + b_j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vecmath::{dot, norm};
use crate::{Error, Result};

/// Inputs whose pre-normalisation norm is at or below this map to `e1`.
pub const NORM_EPS: f64 = 1e-12;

/// A feature vector with an optional category label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub label: Option<usize>,
}

impl Sample {
    pub fn new(id: impl Into<String>, features: Vec<f64>, label: Option<usize>) -> Self {
        Self { id: id.into(), features, label }
    }

    pub fn unlabeled(id: impl Into<String>, features: Vec<f64>) -> Self {
        Self::new(id, features, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn tag(self) -> u32 {
        match self {
            Activation::Tanh => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { fan_in, fan_out, weights: vec![0.0; fan_in * fan_out], bias: vec![0.0; fan_out] }
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &a) in input.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.fan_out..(i + 1) * self.fan_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    activation: Activation,
    seed: u64,
}

/// Per-layer gradients, shape-matched to the [`Network`] they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Layer>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l]` feeds layer `l`.
    activations: Vec<Vec<f64>>,
    pre_norm_len: f64,
    pub output: Vec<f64>,
}

/// `v / |v|`, or `e1` when `|v| <= 1e-12`.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > NORM_EPS {
        v.iter().map(|x| x / n).collect()
    } else {
        let mut e = vec![0.0; v.len()];
        if let Some(first) = e.first_mut() {
            *first = 1.0;
        }
        e
    }
}

pub fn init_network(layer_dims: &[usize], seed: u64) -> Result<Network> {
    Network::new(layer_dims, seed)
}

impl Network {
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::config(format!(
                "network needs at least 2 layer dims, got {}",
                layer_dims.len()
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::config("layer dims must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let mut layer = Layer::zeros(fan_in, fan_out);
                for v in &mut layer.weights {
                    *v = rng.random_range(-scale..scale);
                }
                layer
            })
            .collect();
        Ok(Self { layer_dims: layer_dims.to_vec(), layers, activation: Activation::Tanh, seed })
    }

    /// Rebuilds a network from raw parts (checkpoint loading).
    pub fn from_parts(
        layer_dims: Vec<usize>,
        activation: Activation,
        seed: u64,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layers.len() != layer_dims.len() - 1 {
            return Err(Error::config("layer count does not match layer dims"));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (fi, fo) = (layer_dims[l], layer_dims[l + 1]);
            if layer.fan_in != fi
                || layer.fan_out != fo
                || layer.weights.len() != fi * fo
                || layer.bias.len() != fo
            {
                return Err(Error::config(format!("layer {l} shape mismatch")));
            }
        }
        Ok(Self { layer_dims, layers, activation, seed })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two dims")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::input(format!(
                "expected {} input features, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        let mut pre_norm = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&activations[l]);
            if l == last {
                pre_norm = z;
            } else {
                activations.push(z.into_iter().map(f64::tanh).collect());
            }
        }
        let pre_norm_len = norm(&pre_norm);
        let output = l2_normalize(&pre_norm);
        Ok(ForwardTrace { activations, pre_norm_len, output })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.output)
    }

    pub fn forward_sample(&self, x: &Sample) -> Result<Vec<f64>> {
        self.forward(&x.features)
    }

    pub fn zero_grads(&self) -> GradientSet {
        GradientSet { layers: self.layers.iter().map(|l| Layer::zeros(l.fan_in, l.fan_out)).collect() }
    }

    /// Accumulates into `grads` the gradient of `upstream . f(x)` with respect to
    /// every parameter, given a trace of `f(x)`.
    pub fn accumulate_backward(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        grads: &mut GradientSet,
    ) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(Error::input(format!(
                "upstream gradient has {} entries, embedding has {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if trace.pre_norm_len <= NORM_EPS {
            // f is the constant e1 here.
            return Ok(());
        }
        // d/dz of z/|z| applied to upstream: (g - f (f.g)) / |z|
        let f = &trace.output;
        let fg = dot(f, upstream);
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(f)
            .map(|(g, fi)| (g - fi * fg) / trace.pre_norm_len)
            .collect();

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.activations[l];
            let g = &mut grads.layers[l];
            for (i, &a) in input.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &mut g.weights[i * layer.fan_out..(i + 1) * layer.fan_out];
                for (w, d) in row.iter_mut().zip(&delta) {
                    *w += a * d;
                }
            }
            for (b, d) in g.bias.iter_mut().zip(&delta) {
                *b += d;
            }
            if l == 0 {
                break;
            }
            // propagate through W^T and the tanh derivative of layer l-1
            let mut prev = vec![0.0; layer.fan_in];
            for (i, p) in prev.iter_mut().enumerate() {
                let row = &layer.weights[i * layer.fan_out..(i + 1) * layer.fan_out];
                *p = dot(row, &delta) * (1.0 - input[i] * input[i]);
            }
            delta = prev;
        }
        Ok(())
    }

    /// Gradient of `sum_b upstream[b] . f(x_b)` over the batch.
    pub fn backward(&self, batch: &[&[f64]], upstream: &[Vec<f64>]) -> Result<GradientSet> {
        if batch.len() != upstream.len() {
            return Err(Error::input(format!(
                "{} inputs but {} upstream gradients",
                batch.len(),
                upstream.len()
            )));
        }
        let mut grads = self.zero_grads();
        for (x, g) in batch.iter().zip(upstream) {
            let trace = self.trace(x)?;
            self.accumulate_backward(&trace, g, &mut grads)?;
        }
        Ok(grads)
    }

    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !grads.matches(self) {
            return Err(Error::input("gradient shapes do not match network"));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        Ok(())
    }
}

/// `theta <- theta - lr * g`, returning the updated network.
pub fn sgd_step(net: &Network, grads: &GradientSet, lr: f64) -> Result<Network> {
    let mut next = net.clone();
    next.sgd_step(grads, lr)?;
    Ok(next)
}

impl GradientSet {
    pub fn matches(&self, net: &Network) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    /// Flattened view in parameter order: per layer, weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|v| *v == 0.0)
    }
}

/// Affine classification head `logits = f . W + b` (`W` is `embed_dim x N`),
/// attached only for the softmax baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    pub layer: Layer,
}

impl SoftmaxHead {
    pub fn new(embed_dim: usize, n_categories: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 || n_categories == 0 {
            return Err(Error::config("softmax head dims must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (embed_dim as f64).sqrt();
        let mut layer = Layer::zeros(embed_dim, n_categories);
        for v in &mut layer.weights {
            *v = rng.random_range(-scale..scale);
        }
        Ok(Self { layer })
    }

    pub fn n_categories(&self) -> usize {
        self.layer.fan_out
    }

    pub fn logits(&self, embedding: &[f64]) -> Vec<f64> {
        self.layer.affine(embedding)
    }

    pub fn probabilities(&self, embedding: &[f64]) -> Vec<f64> {
        softmax(&self.logits(embedding))
    }

    pub fn zero_grads(&self) -> Layer {
        Layer::zeros(self.layer.fan_in, self.layer.fan_out)
    }

    pub fn sgd_step(&mut self, grads: &Layer, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        for (w, g) in self.layer.weights.iter_mut().zip(&grads.weights) {
            *w -= lr * g;
        }
        for (b, g) in self.layer.bias.iter_mut().zip(&grads.bias) {
            *b -= lr * g;
        }
        Ok(())
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of the softmax head on one labeled sample, with gradients
/// for both the backbone and the head.
pub fn softmax_head_loss(
    net: &Network,
    head: &SoftmaxHead,
    x: &Sample,
) -> Result<(f64, GradientSet, Layer)> {
    let mut grads = net.zero_grads();
    let mut head_grads = head.zero_grads();
    let loss = accumulate_softmax_head(net, head, x, 1.0, &mut grads, &mut head_grads)?;
    Ok((loss, grads, head_grads))
}

pub(crate) fn accumulate_softmax_head(
    net: &Network,
    head: &SoftmaxHead,
    x: &Sample,
    weight: f64,
    grads: &mut GradientSet,
    head_grads: &mut Layer,
) -> Result<f64> {
    let label = x
        .label
        .ok_or_else(|| Error::input(format!("sample {} has no label", x.id)))?;
    let n = head.n_categories();
    if label >= n {
        return Err(Error::input(format!("label {label} out of range for {n} categories")));
    }
    let trace = net.trace(&x.features)?;
    let logits = head.logits(&trace.output);
    let lse = crate::vecmath::log_sum_exp(&logits);
    let loss = lse - logits[label];

    let mut dlogits = softmax(&logits);
    dlogits[label] -= 1.0;
    dlogits.iter_mut().for_each(|d| *d *= weight);

    let dim = head.layer.fan_in;
    let mut df = vec![0.0; dim];
    for i in 0..dim {
        let row = &head.layer.weights[i * n..(i + 1) * n];
        df[i] = dot(row, &dlogits);
        let grow = &mut head_grads.weights[i * n..(i + 1) * n];
        for (g, d) in grow.iter_mut().zip(&dlogits) {
            *g += trace.output[i] * d;
        }
    }
    for (b, d) in head_grads.bias.iter_mut().zip(&dlogits) {
        *b += d;
    }
    net.accumulate_backward(&trace, &df, grads)?;
    Ok(loss)
}
