//! Small reverse-mode differentiation core for dense networks.
//!
//! Networks here are tiny (tens of units), so everything is plain `Vec<f64>`
//! and per-sample loops. Gradients accumulate into [`ParamTensor::grad`] until
//! [`Mlp::zero_grads`] is called.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A parameter block with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = checked_len(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            values: vec![0.0; len],
            grad: vec![0.0; len],
        })
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let len = checked_len(shape)?;
        if values.len() != len {
            return Err(Error::Config(format!(
                "tensor of shape {shape:?} needs {len} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            grad: vec![0.0; len],
            values,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().chain(&self.grad).all(|v| v.is_finite())
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Config(format!(
            "tensor shape {shape:?} must be non-empty with positive extents"
        )));
    }
    Ok(shape.iter().product())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative with respect to the pre-activation `pre`, given `post = apply(pre)`.
    pub fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - post * post,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Softplus => sigmoid(pre),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer `act(W x + b)` with `W` stored row-major as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: ParamTensor, bias: ParamTensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Config(format!(
                "dense layer needs weight [out, in] and bias [out]; got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    last_trace: Option<Trace>,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Config(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            last_trace: None,
        })
    }

    /// Glorot-uniform weights, zero biases. `sizes` lists every width from
    /// input to output; hidden layers use `hidden`, the last layer `output`.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config("MLP sizes need an input and an output".into()));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (k, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let values = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let activation = if k + 2 == sizes.len() { output } else { hidden };
            layers.push(Dense::new(
                ParamTensor::from_values(&[fan_out, fan_in], values)?,
                ParamTensor::zeros(&[fan_out])?,
                activation,
            )?);
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Multiplies the last layer's weights by `factor` (small initial outputs).
    pub fn scale_output_layer(&mut self, factor: f64) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.values.iter_mut().for_each(|w| *w *= factor);
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Config(format!(
                "network expects input width {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Forward pass without recording anything.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut current = x.to_vec();
        for layer in &self.layers {
            current = affine(layer, &current)
                .into_iter()
                .map(|p| layer.activation.apply(p))
                .collect();
        }
        Ok(current)
    }

    /// Forward pass returning the activations needed by [`Mlp::backward_trace`].
    pub fn forward_trace(&self, x: &[f64]) -> Result<(Vec<f64>, Trace)> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut trace = Trace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
        };
        let mut current = x.to_vec();
        for layer in &self.layers {
            let pre = affine(layer, &current);
            let post: Vec<f64> = pre.iter().map(|&p| layer.activation.apply(p)).collect();
            trace.inputs.push(current);
            trace.pre.push(pre);
            current = post.clone();
            trace.post.push(post);
        }
        Ok((current, trace))
    }

    /// Forward pass that remembers its activations for a following [`Mlp::backward`].
    pub fn forward(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let (out, trace) = self.forward_trace(x)?;
        self.last_trace = Some(trace);
        Ok(out)
    }

    /// Backpropagates `output_grad` through the last recorded forward pass.
    /// Parameter gradients are accumulated; the input gradient is returned.
    pub fn backward(&mut self, output_grad: &[f64]) -> Result<Vec<f64>> {
        let trace = self
            .last_trace
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        self.backward_trace(&trace, output_grad)
    }

    pub fn backward_trace(&mut self, trace: &Trace, output_grad: &[f64]) -> Result<Vec<f64>> {
        if trace.pre.len() != self.layers.len() {
            return Err(Error::State("trace does not belong to this network".into()));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::Config(format!(
                "output gradient has width {}, network outputs {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        let mut upstream = output_grad.to_vec();
        for (k, layer) in self.layers.iter_mut().enumerate().rev() {
            let (pre, post, input) = (&trace.pre[k], &trace.post[k], &trace.inputs[k]);
            let n_in = input.len();
            let delta: Vec<f64> = upstream
                .iter()
                .zip(pre.iter().zip(post))
                .map(|(&g, (&p, &q))| g * layer.activation.derivative(p, q))
                .collect();
            let mut next = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                layer.bias.grad[o] += d;
                if d == 0.0 {
                    continue;
                }
                let row = o * n_in;
                for i in 0..n_in {
                    layer.weight.grad[row + i] += d * input[i];
                    next[i] += d * layer.weight.values[row + i];
                }
            }
            upstream = next;
        }
        Ok(upstream)
    }

    /// Directional derivative of the output with respect to the parameters,
    /// along `tangent` (flat layout of [`Mlp::params_flat`]), at the recorded input.
    pub fn jvp(&self, trace: &Trace, tangent: &[f64]) -> Result<Vec<f64>> {
        if tangent.len() != self.num_params() {
            return Err(Error::Config(format!(
                "tangent has {} entries, network has {} parameters",
                tangent.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        let mut d_input = vec![0.0; self.input_dim()];
        for (k, layer) in self.layers.iter().enumerate() {
            let (n_out, n_in) = (layer.output_dim(), layer.input_dim());
            let d_weight = &tangent[offset..offset + n_out * n_in];
            let d_bias = &tangent[offset + n_out * n_in..offset + n_out * n_in + n_out];
            offset += n_out * n_in + n_out;
            let input = &trace.inputs[k];
            let mut d_out = vec![0.0; n_out];
            for o in 0..n_out {
                let row = o * n_in;
                let mut acc = d_bias[o];
                for i in 0..n_in {
                    acc += d_weight[row + i] * input[i] + layer.weight.values[row + i] * d_input[i];
                }
                d_out[o] = acc * layer.activation.derivative(trace.pre[k][o], trace.post[k][o]);
            }
            d_input = d_out;
        }
        Ok(d_input)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weight.values);
            out.extend_from_slice(&layer.bias.values);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for t in [&mut layer.weight, &mut layer.bias] {
                let n = t.len();
                t.values.copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weight.grad);
            out.extend_from_slice(&layer.bias.grad);
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.weight.zero_grad();
            layer.bias.zero_grad();
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}

fn affine(layer: &Dense, x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    (0..layer.output_dim())
        .map(|o| {
            let row = &layer.weight.values[o * n_in..(o + 1) * n_in];
            layer.bias.values[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

/// Compares an analytic gradient with central finite differences.
///
/// `f` returns the value and the analytic gradient at a point. The result is
/// `max_i |g_analytic_i - g_numeric_i| / max(1, |g_numeric_i|)`.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let (value, analytic) = f(x);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("f(x) = {value} is not finite")));
    }
    if analytic.len() != x.len() {
        return Err(Error::Config(format!(
            "analytic gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let (plus, _) = f(&probe);
        probe[i] = x[i] - step;
        let (minus, _) = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("f is not finite near coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Adam moment estimates for a fixed set of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self::with_hyperparameters(n_params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update over `params` (in order), using their `grad`.
pub fn adam_step(params: &mut [&mut ParamTensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    let total: usize = params.iter().map(|p| p.len()).sum();
    if total != state.len() {
        return Err(Error::Config(format!(
            "Adam state tracks {} parameters, got {total}",
            state.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - state.beta1.powi(t);
    let correction2 = 1.0 - state.beta2.powi(t);
    let mut k = 0;
    for tensor in params.iter_mut() {
        for (value, &g) in tensor.values.iter_mut().zip(&tensor.grad) {
            state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
            state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
            let m_hat = state.m[k] / correction1;
            let v_hat = state.v[k] / correction2;
            *value -= lr * m_hat / (v_hat.sqrt() + state.eps);
            k += 1;
        }
    }
    Ok(())
}

/// Magic line opening every parameter checkpoint.
pub const CHECKPOINT_MAGIC: &str = "QNAVCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    shape: [usize; 2],
    activation: Activation,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetHeader {
    name: String,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VectorHeader {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    seed: u64,
    nets: Vec<NetHeader>,
    vectors: Vec<VectorHeader>,
}

/// Named networks and vectors persisted together.
///
/// Text layout: the magic line, one JSON header line (seed, layer shapes and
/// activations, vector names and lengths), then one line of space-separated
/// values per tensor: each net's layers in order (weight row-major, then
/// bias), followed by each vector. Values use shortest round-trip notation.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub nets: Vec<(String, Mlp)>,
    pub vectors: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            nets: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn with_net(mut self, name: &str, net: &Mlp) -> Self {
        self.nets.push((name.to_string(), net.clone()));
        self
    }

    pub fn with_vector(mut self, name: &str, values: &[f64]) -> Self {
        self.vectors.push((name.to_string(), values.to_vec()));
        self
    }

    pub fn net(&self, name: &str) -> Option<&Mlp> {
        self.nets.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn vector(&self, name: &str) -> Option<&[f64]> {
        self.vectors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_text(&self) -> String {
        let header = CheckpointHeader {
            seed: self.seed,
            nets: self
                .nets
                .iter()
                .map(|(name, net)| NetHeader {
                    name: name.clone(),
                    layers: net
                        .layers()
                        .iter()
                        .map(|l| LayerHeader {
                            shape: [l.output_dim(), l.input_dim()],
                            activation: l.activation,
                        })
                        .collect(),
                })
                .collect(),
            vectors: self
                .vectors
                .iter()
                .map(|(name, v)| VectorHeader {
                    name: name.clone(),
                    len: v.len(),
                })
                .collect(),
        };
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        let mut push_line = |values: &[f64]| {
            let mut first = true;
            for v in values {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{v:e}").expect("write to string");
            }
            out.push('\n');
        };
        for (_, net) in &self.nets {
            for layer in net.layers() {
                push_line(&layer.weight.values);
                push_line(&layer.bias.values);
            }
        }
        for (_, values) in &self.vectors {
            push_line(values);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ctx = "checkpoint";
        let mut lines = text.lines();
        match lines.next() {
            Some(CHECKPOINT_MAGIC) => {}
            other => {
                return Err(Error::parse(
                    ctx,
                    format!("expected magic {CHECKPOINT_MAGIC:?}, found {other:?}"),
                ))
            }
        }
        let header: CheckpointHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::parse(ctx, "missing header line"))?,
        )
        .map_err(|e| Error::parse(ctx, e))?;
        let mut next_values = |expected: usize| -> Result<Vec<f64>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(ctx, "truncated tensor data"))?;
            let values = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>().map_err(|e| Error::parse(ctx, e)))
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != expected {
                return Err(Error::parse(
                    ctx,
                    format!("expected {expected} values, found {}", values.len()),
                ));
            }
            Ok(values)
        };
        let mut nets = Vec::with_capacity(header.nets.len());
        for net in &header.nets {
            let mut layers = Vec::with_capacity(net.layers.len());
            for layer in &net.layers {
                let [out, inp] = layer.shape;
                let weight = ParamTensor::from_values(&[out, inp], next_values(out * inp)?)?;
                let bias = ParamTensor::from_values(&[out], next_values(out)?)?;
                layers.push(Dense::new(weight, bias, layer.activation)?);
            }
            nets.push((net.name.clone(), Mlp::new(layers)?));
        }
        let mut vectors = Vec::with_capacity(header.vectors.len());
        for v in &header.vectors {
            vectors.push((v.name.clone(), next_values(v.len)?));
        }
        Ok(Self {
            seed: header.seed,
            nets,
            vectors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn single_layer(weights: Vec<f64>, bias: Vec<f64>, n_out: usize, act: Activation) -> Mlp {
        let n_in = weights.len() / n_out;
        Mlp::new(vec![Dense::new(
            ParamTensor::from_values(&[n_out, n_in], weights).unwrap(),
            ParamTensor::from_values(&[n_out], bias).unwrap(),
            act,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = single_layer(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, Activation::Identity);
        assert_eq!(net.forward(&[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn diagonal_layer_matches_hand_product() {
        let net = single_layer(vec![2.0, 0.0, 0.0, 3.0], vec![1.0, 1.0], 2, Activation::Identity);
        assert_eq!(net.eval(&[1.0, 1.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let net = single_layer(vec![0.3, -0.7, 1.1, 0.2], vec![0.0, 0.0], 2, Activation::Tanh);
        assert_eq!(net.eval(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let net = single_layer(vec![1.0, 0.0], vec![0.0], 1, Activation::Identity);
        assert!(matches!(net.eval(&[1.0]), Err(Error::Config(_))));
        let a = Dense::new(
            ParamTensor::zeros(&[3, 2]).unwrap(),
            ParamTensor::zeros(&[3]).unwrap(),
            Activation::Tanh,
        )
        .unwrap();
        let b = Dense::new(
            ParamTensor::zeros(&[1, 4]).unwrap(),
            ParamTensor::zeros(&[1]).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        assert!(matches!(Mlp::new(vec![a, b]), Err(Error::Config(_))));
    }

    #[test]
    fn linear_scalar_backward() {
        let mut net = single_layer(vec![3.0], vec![0.0], 1, Activation::Identity);
        net.forward(&[2.5]).unwrap();
        let dx = net.backward(&[1.0]).unwrap();
        assert_eq!(dx, vec![3.0]);
        assert_eq!(net.layers()[0].weight.grad, vec![2.5]);
        assert_eq!(net.layers()[0].bias.grad, vec![1.0]);
    }

    #[test]
    fn tanh_slope_at_origin_is_one() {
        let mut net = single_layer(vec![1.0], vec![0.0], 1, Activation::Tanh);
        net.forward(&[0.0]).unwrap();
        assert_eq!(net.backward(&[1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let mut net = single_layer(vec![1.0], vec![0.0], 1, Activation::Tanh);
        assert!(matches!(net.backward(&[1.0]), Err(Error::State(_))));
        net.forward(&[0.5]).unwrap();
        net.backward(&[1.0]).unwrap();
        assert!(matches!(net.backward(&[1.0]), Err(Error::State(_))));
    }

    /// Gradient of `sum(out * probe)` with respect to all parameters, vs. finite differences.
    fn param_gradient_error(net: &Mlp, x: &[f64], probe: &[f64]) -> f64 {
        let base = net.clone();
        let theta = base.params_flat();
        finite_diff_check(
            |p| {
                let mut n = base.clone();
                n.set_params_flat(p).unwrap();
                n.zero_grads();
                let out = n.forward(x).unwrap();
                let value = out.iter().zip(probe).map(|(a, b)| a * b).sum();
                n.backward(probe).unwrap();
                (value, n.grads_flat())
            },
            &theta,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn random_two_layer_nets_match_finite_differences() {
        let mut rng = rng::stream(11, "diffmath-test");
        for act in [Activation::Tanh, Activation::Softplus, Activation::Identity] {
            for _ in 0..5 {
                let net = Mlp::init(&[4, 6, 3], act, Activation::Identity, &mut rng).unwrap();
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let probe: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let err = param_gradient_error(&net, &x, &probe);
                assert!(err < 1e-4, "{act:?}: relative error {err}");
                // input gradient
                let err_in = finite_diff_check(
                    |xi| {
                        let mut n = net.clone();
                        let out = n.forward(xi).unwrap();
                        let v = out.iter().zip(&probe).map(|(a, b)| a * b).sum();
                        (v, n.backward(&probe).unwrap())
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err_in < 1e-4, "{act:?}: input relative error {err_in}");
            }
        }
    }

    #[test]
    fn jvp_matches_directional_finite_difference() {
        let mut rng = rng::stream(5, "jvp-test");
        let net = Mlp::init(&[3, 5, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = [0.2, -0.4, 0.9];
        let tangent: Vec<f64> = (0..net.num_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (_, trace) = net.forward_trace(&x).unwrap();
        let jv = net.jvp(&trace, &tangent).unwrap();
        let theta = net.params_flat();
        let h = 1e-6;
        let shifted = |sign: f64| {
            let mut n = net.clone();
            let p: Vec<f64> = theta.iter().zip(&tangent).map(|(a, t)| a + sign * h * t).collect();
            n.set_params_flat(&p).unwrap();
            n.eval(&x).unwrap()
        };
        let (plus, minus) = (shifted(1.0), shifted(-1.0));
        for k in 0..2 {
            let numeric = (plus[k] - minus[k]) / (2.0 * h);
            assert!((numeric - jv[k]).abs() < 1e-7, "{numeric} vs {}", jv[k]);
        }
    }

    #[test]
    fn finite_diff_check_reference_functions() {
        let sum_sq = |x: &[f64]| (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect());
        assert!(finite_diff_check(sum_sq, &[1.0, 2.0], 1e-5).unwrap() < 1e-6);
        let constant = |x: &[f64]| (4.2, vec![0.0; x.len()]);
        assert_eq!(finite_diff_check(constant, &[1.0, -3.0], 1e-5).unwrap(), 0.0);
        let nan = |x: &[f64]| (f64::NAN, vec![0.0; x.len()]);
        assert!(matches!(finite_diff_check(nan, &[1.0], 1e-5), Err(Error::Numeric(_))));
        assert!(matches!(finite_diff_check(constant, &[1.0], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut t = ParamTensor::from_values(&[2], vec![0.5, -1.0]).unwrap();
        let mut state = AdamState::new(2);
        adam_step(&mut [&mut t], &mut state, 1e-3).unwrap();
        assert_eq!(t.values, vec![0.5, -1.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut t = ParamTensor::from_values(&[1], vec![0.0]).unwrap();
        t.grad[0] = 1.0;
        let mut state = AdamState::new(1);
        adam_step(&mut [&mut t], &mut state, 1e-4).unwrap();
        assert!((t.values[0] + 1e-4).abs() < 1e-12);
    }

    #[test]
    fn adam_descends_under_constant_gradient() {
        let mut t = ParamTensor::from_values(&[1], vec![0.0]).unwrap();
        let mut state = AdamState::new(1);
        for _ in 0..50 {
            t.grad[0] = -2.0;
            adam_step(&mut [&mut t], &mut state, 1e-2).unwrap();
        }
        assert!(t.values[0] > 0.0);
        assert!(matches!(
            adam_step(&mut [&mut t], &mut state, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_is_bit_deterministic_and_finite_for_large_weights() {
        let mut rng = rng::stream(3, "det-test");
        let mut net = Mlp::init(&[5, 8, 8, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, 0.5];
        assert_eq!(net.eval(&x).unwrap(), net.eval(&x).unwrap());
        let big: Vec<f64> = net.params_flat().iter().map(|v| v.signum() * 1e3).collect();
        net.set_params_flat(&big).unwrap();
        assert!(net.eval(&[1e3; 5]).unwrap().iter().all(|v| v.is_finite()));
        for act in [Activation::Relu, Activation::Softplus] {
            let mut n = Mlp::init(&[5, 4, 1], act, Activation::Identity, &mut rng).unwrap();
            n.set_params_flat(&vec![1e3; n.num_params()]).unwrap();
            let out = n.forward(&[1e3; 5]).unwrap();
            assert!(out[0].is_finite());
            assert!(n.backward(&[1.0]).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = rng::stream(9, "ckpt-test");
        let net = Mlp::init(&[3, 4, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let ckpt = Checkpoint::new(42)
            .with_net("policy", &net)
            .with_vector("log_std", &[-0.5, 1e-300]);
        let text = ckpt.to_text();
        assert!(text.starts_with("QNAVCKPT1\n"));
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_text(), text);
        assert!(Checkpoint::from_text("QNAVCKPT0\n{}").is_err());
    }
}
