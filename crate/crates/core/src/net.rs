//! Small fully connected classifier with hand-written backpropagation.
//!
//! Layout for `layer_sizes = [d, h1, ..., e, K]`: every layer but the last
//! is affine followed by the activation; the last is affine only and
//! produces the `K` logits. The output of the last hidden layer (width `e`)
//! is the retrieval embedding. Dropout, when active, masks the embedding
//! before the logits layer with inverted scaling `1/(1-rate)`, so evaluation
//! uses the embedding unchanged.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::Logits;

const CHECKPOINT_MAGIC: &str = "mprl-params";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// Row-major `outputs x inputs` weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// `W^T delta`
    fn transpose_apply(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (row, d) in self.weights.chunks_exact(self.inputs).zip(delta) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * d;
            }
        }
        out
    }

    fn add_scaled(&mut self, other: &Dense, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }

    fn norm_sq(&self) -> f64 {
        self.weights.iter().chain(&self.bias).map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    layers: Vec<Dense>,
    activation: Activation,
    // bumped on every in-place update; forward caches remember it
    generation: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.activation == other.activation && self.layers == other.layers
    }
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::dim("need at least an input and an output width"));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::dim(format!(
            "layer widths must be positive: {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl ModelParams {
    /// Weights ~ Normal(0, (scale / sqrt(fan_in))^2), biases zero.
    pub fn init(
        layer_sizes: &[usize],
        activation: Activation,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        check_sizes(layer_sizes)?;
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::InvalidValue(format!(
                "init scale must be >= 0, got {scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let mut layer = Dense::zeros(w[0], w[1]);
                let std = scale / (w[0] as f64).sqrt();
                for v in &mut layer.weights {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = std * z;
                }
                layer
            })
            .collect();
        Ok(ModelParams {
            layers,
            activation,
            generation: 0,
        })
    }

    /// Builds parameters from explicit layers; adjacent widths must chain.
    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::dim(format!(
                    "layer output width {} does not feed input width {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        Ok(ModelParams {
            layers,
            activation,
            generation: 0,
        })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].inputs];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// Width of the logits head.
    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.inputs)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Direct mutable access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, features: &[f64], mode: ForwardMode) -> Result<Forward> {
        if features.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "feature length {} does not match input width {}",
                features.len(),
                self.input_dim()
            )));
        }
        let n_hidden = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(n_hidden);
        let mut current = features.to_vec();
        for layer in &self.layers[..n_hidden] {
            let z = layer.affine(&current);
            let a: Vec<f64> = z.iter().map(|&v| self.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut current, a));
            pre.push(z);
        }
        let embedding = current;

        let mask = match mode {
            ForwardMode::Train { dropout_rate, seed } if dropout_rate > 0.0 => {
                if !(0.0..1.0).contains(&dropout_rate) {
                    return Err(Error::InvalidValue(format!(
                        "dropout rate must be in [0, 1), got {dropout_rate}"
                    )));
                }
                let keep = 1.0 - dropout_rate;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some(
                    (0..embedding.len())
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        let head_input = match &mask {
            Some(m) => embedding.iter().zip(m).map(|(e, m)| e * m).collect(),
            None => embedding.clone(),
        };
        let logits = Logits::new(self.layers[n_hidden].affine(&head_input))?;
        inputs.push(head_input);
        Ok(Forward {
            logits,
            embedding,
            cache: ForwardCache {
                inputs,
                pre,
                mask,
                generation: self.generation,
            },
        })
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, features: &[f64]) -> Result<Logits> {
        Ok(self.forward(features, ForwardMode::Eval)?.logits)
    }

    /// Evaluation-mode embedding (last hidden activation).
    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(features, ForwardMode::Eval)?.embedding)
    }

    /// Parameter gradients of a scalar loss given its gradient at the logits.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<Gradients> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(Error::InvalidState(
                "forward cache does not belong to these parameters".into(),
            ));
        }
        if grad_logits.len() != self.classes() {
            return Err(Error::dim(format!(
                "logit gradient has {} entries, head width is {}",
                grad_logits.len(),
                self.classes()
            )));
        }
        let mut grads: Vec<Dense> = self
            .layers
            .iter()
            .map(|l| Dense::zeros(l.inputs, l.outputs))
            .collect();

        let last = self.layers.len() - 1;
        let mut delta = grad_logits.to_vec();
        for idx in (0..=last).rev() {
            let layer = &self.layers[idx];
            if idx < last {
                // delta currently holds d/d(activation output)
                for (d, z) in delta.iter_mut().zip(&cache.pre[idx]) {
                    *d *= self.activation.derivative(*z);
                }
            }
            let input = &cache.inputs[idx];
            let g = &mut grads[idx];
            for ((row, d), gb) in g
                .weights
                .chunks_exact_mut(layer.inputs)
                .zip(&delta)
                .zip(g.bias.iter_mut())
            {
                *gb = *d;
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw = d * x;
                }
            }
            if idx > 0 {
                let mut upstream = layer.transpose_apply(&delta);
                if idx == last {
                    if let Some(mask) = &cache.mask {
                        upstream.iter_mut().zip(mask).for_each(|(u, m)| *u *= m);
                    }
                }
                delta = upstream;
            }
        }
        Ok(Gradients { layers: grads })
    }

    /// Text checkpoint; every value is written with 17 significant digits,
    /// which reloads bit-exactly.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(out, "activation {}", self.activation.name())?;
        let sizes: Vec<String> = self.layer_sizes().iter().map(|s| s.to_string()).collect();
        writeln!(out, "layers {}", sizes.join(" "))?;
        for layer in &self.layers {
            writeln!(out, "weights")?;
            for row in layer.weights.chunks_exact(layer.inputs) {
                writeln!(out, "{}", join_floats(row))?;
            }
            writeln!(out, "bias")?;
            writeln!(out, "{}", join_floats(&layer.bias))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::parse(
                    0,
                    format!("unexpected end of checkpoint, expected {what}"),
                )),
            }
        };

        let (n, header) = next("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::parse(n, "not a parameter checkpoint"));
        }
        match parts.next().and_then(|v| v.parse::<u32>().ok()) {
            Some(CHECKPOINT_VERSION) => {}
            other => return Err(Error::parse(n, format!("unsupported version {other:?}"))),
        }

        let (n, line) = next("activation")?;
        let activation = match line.strip_prefix("activation ").map(str::trim) {
            Some("relu") => Activation::Relu,
            Some("tanh") => Activation::Tanh,
            _ => return Err(Error::parse(n, format!("bad activation line: {line}"))),
        };

        let (n, line) = next("layer sizes")?;
        let sizes = line
            .strip_prefix("layers ")
            .ok_or_else(|| Error::parse(n, "expected layer sizes"))?
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|e| Error::parse(n, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        check_sizes(&sizes).map_err(|e| Error::parse(n, e.to_string()))?;

        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let mut layer = Dense::zeros(w[0], w[1]);
            let (n, line) = next("weights")?;
            if line.trim() != "weights" {
                return Err(Error::parse(n, "expected 'weights'"));
            }
            for r in 0..w[1] {
                let (n, line) = next("weight row")?;
                let row = parse_floats(&line, w[0], n)?;
                layer.weights[r * w[0]..(r + 1) * w[0]].copy_from_slice(&row);
            }
            let (n, line) = next("bias")?;
            if line.trim() != "bias" {
                return Err(Error::parse(n, "expected 'bias'"));
            }
            let (n, line) = next("bias values")?;
            layer.bias = parse_floats(&line, w[1], n)?;
            layers.push(layer);
        }
        ModelParams::from_layers(layers, activation)
    }
}

pub(crate) fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.16e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub(crate) fn parse_floats(line: &str, expected: usize, line_no: usize) -> Result<Vec<f64>> {
    let values = line
        .split_whitespace()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| Error::parse(line_no, format!("bad number {s:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(Error::parse(
            line_no,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    Eval,
    Train { dropout_rate: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    // input to every layer; the last one is the (masked) embedding
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    mask: Option<Vec<f64>>,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Logits,
    pub embedding: Vec<f64>,
    pub cache: ForwardCache,
}

/// Parameter-shaped gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        self.check_shape(&other.layers)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(b, scale);
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().map(Dense::norm_sq).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| *v == 0.0))
    }

    fn check_shape(&self, other: &[Dense]) -> Result<()> {
        let same = self.layers.len() == other.len()
            && self
                .layers
                .iter()
                .zip(other)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs);
        if same {
            Ok(())
        } else {
            Err(Error::dim("gradient shapes do not match"))
        }
    }
}

/// Classical momentum SGD: `v <- momentum * v - lr * g; w <- w + v`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Gradients,
    learning_rate: f64,
    momentum: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidValue(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(OptimizerState {
            velocity: Gradients::zeros_like(params),
            learning_rate,
            momentum,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }
}

pub fn sgd_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    grads.check_shape(&params.layers)?;
    state.velocity.check_shape(&params.layers)?;
    let (lr, mu) = (state.learning_rate, state.momentum);
    for ((w, g), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity.layers)
    {
        for ((wi, gi), vi) in w
            .weights
            .iter_mut()
            .chain(w.bias.iter_mut())
            .zip(g.weights.iter().chain(&g.bias))
            .zip(v.weights.iter_mut().chain(v.bias.iter_mut()))
        {
            *vi = mu * *vi - lr * gi;
            *wi += *vi;
        }
    }
    params.generation += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::real_ce_loss;

    fn flat(params: &ModelParams) -> Vec<f64> {
        params
            .layers()
            .iter()
            .flat_map(|l| l.weights().iter().chain(l.bias()).copied())
            .collect()
    }

    fn flat_grads(g: &Gradients) -> Vec<f64> {
        g.layers()
            .iter()
            .flat_map(|l| l.weights().iter().chain(l.bias()).copied())
            .collect()
    }

    fn set_param(params: &mut ModelParams, mut index: usize, value: f64) {
        for layer in params.layers_mut() {
            let nw = layer.weights.len();
            if index < nw {
                layer.weights[index] = value;
                return;
            }
            index -= nw;
            if index < layer.bias.len() {
                layer.bias[index] = value;
                return;
            }
            index -= layer.bias.len();
        }
        panic!("index out of range");
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = ModelParams::init(&[2, 8, 4, 3], Activation::Relu, 11, 1.0).unwrap();
        let b = ModelParams::init(&[2, 8, 4, 3], Activation::Relu, 11, 1.0).unwrap();
        let fa = flat(&a);
        let fb = flat(&b);
        assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.logits(&[0.3, -0.2]).unwrap().len(), 3);
        assert_eq!(a.embedding_dim(), 4);
        assert_eq!(a.embed(&[1.0, 1.0]).unwrap().len(), 4);
        let c = ModelParams::init(&[2, 8, 4, 3], Activation::Relu, 12, 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(
            ModelParams::init(&[4], Activation::Relu, 0, 1.0),
            Err(Error::InvalidDimension(_))
        ));
        assert!(ModelParams::init(&[4, 0, 2], Activation::Relu, 0, 1.0).is_err());
    }

    #[test]
    fn zero_scale_gives_bias_only_output() {
        let mut p = ModelParams::init(&[3, 5, 2], Activation::Relu, 1, 0.0).unwrap();
        assert!(flat(&p).iter().all(|v| *v == 0.0));
        assert_eq!(p.logits(&[1.0, 2.0, 3.0]).unwrap().as_slice(), &[0.0, 0.0]);
        p.layers_mut()[1].bias_mut().copy_from_slice(&[0.5, -1.0]);
        assert_eq!(p.logits(&[9.0, 9.0, 9.0]).unwrap().as_slice(), &[0.5, -1.0]);
    }

    #[test]
    fn no_dropout_train_equals_eval() {
        let p = ModelParams::init(&[3, 6, 4, 2], Activation::Tanh, 5, 1.0).unwrap();
        let x = [0.1, -0.4, 2.0];
        let a = p.forward(&x, ForwardMode::Eval).unwrap();
        let b = p
            .forward(
                &x,
                ForwardMode::Train {
                    dropout_rate: 0.0,
                    seed: 99,
                },
            )
            .unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.embedding, b.embedding);
    }

    #[test]
    fn dropout_masks_are_seeded() {
        let p = ModelParams::init(&[3, 16, 2], Activation::Relu, 5, 1.0).unwrap();
        let x = [0.1, -0.4, 2.0];
        let mode = ForwardMode::Train {
            dropout_rate: 0.5,
            seed: 3,
        };
        let a = p.forward(&x, mode).unwrap();
        let b = p.forward(&x, mode).unwrap();
        assert_eq!(a.logits, b.logits);
        let mask = a.cache.mask.as_ref().unwrap();
        assert!(mask.iter().all(|m| *m == 0.0 || *m == 2.0));
        assert!(p
            .forward(
                &x,
                ForwardMode::Train {
                    dropout_rate: 1.0,
                    seed: 0
                }
            )
            .is_err());
    }

    #[test]
    fn linear_net_matches_matrix_product() {
        // [2, 2, 3] with identity activation emulated through a wide positive regime
        let l1 = Dense {
            inputs: 2,
            outputs: 2,
            weights: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
        };
        let l2 = Dense {
            inputs: 2,
            outputs: 3,
            weights: vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0],
            bias: vec![0.1, 0.2, 0.3],
        };
        let p = ModelParams::from_layers(vec![l1, l2], Activation::Relu).unwrap();
        let x = [1.0, 2.0];
        // oracle: explicit W2 * (I * x) + b2
        let w2 = [[1.0, 2.0], [-1.0, 0.5], [3.0, -2.0]];
        let b2 = [0.1, 0.2, 0.3];
        let expected: Vec<f64> = (0..3)
            .map(|r| w2[r][0] * x[0] + w2[r][1] * x[1] + b2[r])
            .collect();
        assert_eq!(p.logits(&x).unwrap().as_slice(), expected.as_slice());
        assert_eq!(p.embed(&x).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn chained_layers_must_match() {
        let a = Dense::zeros(2, 3);
        let b = Dense::zeros(4, 1);
        assert!(matches!(
            ModelParams::from_layers(vec![a, b], Activation::Relu),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let p = ModelParams::init(&[3, 5, 4, 2], Activation::Relu, 2, 1.0).unwrap();
        let f = p.forward(&[0.3, 0.1, -0.2], ForwardMode::Eval).unwrap();
        let g = p.backward(&f.cache, &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn single_linear_layer_squared_error_closed_form() {
        // loss = 0.5 * ||W x + b - t||^2 -> dW = r x^T, db = r
        let p = ModelParams::init(&[3, 2], Activation::Relu, 4, 1.0).unwrap();
        let x = [0.5, -1.0, 2.0];
        let t = [1.0, -2.0];
        let f = p.forward(&x, ForwardMode::Eval).unwrap();
        let r: Vec<f64> = f
            .logits
            .as_slice()
            .iter()
            .zip(&t)
            .map(|(y, t)| y - t)
            .collect();
        let g = p.backward(&f.cache, &r).unwrap();
        let layer = &g.layers()[0];
        for (i, ri) in r.iter().enumerate() {
            for (j, xj) in x.iter().enumerate() {
                assert_eq!(layer.weights()[i * 3 + j], ri * xj);
            }
            assert_eq!(layer.bias()[i], *ri);
        }
    }

    fn fd_check(activation: Activation, dropout: f64, seed: u64) {
        let mut p = ModelParams::init(&[4, 7, 5, 3], activation, seed, 1.2).unwrap();
        let x = [0.7, -0.3, 1.1, -1.6];
        let mode = ForwardMode::Train {
            dropout_rate: dropout,
            seed: seed + 100,
        };
        let class = (seed % 3) as usize;
        let loss = |p: &ModelParams| {
            let f = p.forward(&x, mode).unwrap();
            real_ce_loss(&f.logits, class).unwrap().value
        };
        let f = p.forward(&x, mode).unwrap();
        let out = real_ce_loss(&f.logits, class).unwrap();
        let analytic = flat_grads(&p.backward(&f.cache, &out.grad_logits).unwrap());
        let base = flat(&p);
        let h = 1e-6;
        for i in 0..base.len() {
            set_param(&mut p, i, base[i] + h);
            let up = loss(&p);
            set_param(&mut p, i, base[i] - h);
            let down = loss(&p);
            set_param(&mut p, i, base[i]);
            let numeric = (up - down) / (2.0 * h);
            let err =
                (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
            assert!(err < 1e-5, "param {i}: {} vs {numeric}", analytic[i]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..4 {
            fd_check(Activation::Tanh, 0.0, seed);
            fd_check(Activation::Tanh, 0.4, seed);
            fd_check(Activation::Relu, 0.3, seed);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = ModelParams::init(&[2, 3, 2], Activation::Relu, 0, 1.0).unwrap();
        let f = p.forward(&[1.0, 1.0], ForwardMode::Eval).unwrap();
        let g = Gradients::zeros_like(&p);
        let mut opt = OptimizerState::new(&p, 0.1, 0.9).unwrap();
        sgd_step(&mut p, &g, &mut opt).unwrap();
        assert!(matches!(
            p.backward(&f.cache, &[0.0, 0.0]),
            Err(Error::InvalidState(_))
        ));
        let other = ModelParams::init(&[2, 3, 3, 2], Activation::Relu, 0, 1.0).unwrap();
        let f = other.forward(&[1.0, 1.0], ForwardMode::Eval).unwrap();
        assert!(p.backward(&f.cache, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = ModelParams::init(&[2, 2], Activation::Relu, 3, 1.0).unwrap();
        let w0 = flat(&p);
        let f = p.forward(&[1.0, -2.0], ForwardMode::Eval).unwrap();
        let g = p.backward(&f.cache, &[0.5, -0.25]).unwrap();
        let gf = flat_grads(&g);
        let mut opt = OptimizerState::new(&p, 0.1, 0.9).unwrap();
        sgd_step(&mut p, &g, &mut opt).unwrap();
        let w1 = flat(&p);
        for i in 0..w0.len() {
            assert!((w1[i] - (w0[i] - 0.1 * gf[i])).abs() < 1e-15);
        }
        sgd_step(&mut p, &g, &mut opt).unwrap();
        let w2 = flat(&p);
        for i in 0..w0.len() {
            assert!((w2[i] - (w0[i] - 0.29 * gf[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn plain_sgd_and_zero_gradient() {
        let mut p = ModelParams::init(&[2, 3], Activation::Relu, 3, 1.0).unwrap();
        let w0 = flat(&p);
        let zero = Gradients::zeros_like(&p);
        let mut opt = OptimizerState::new(&p, 0.1, 0.9).unwrap();
        for _ in 0..5 {
            sgd_step(&mut p, &zero, &mut opt).unwrap();
        }
        assert_eq!(flat(&p), w0);

        let f = p.forward(&[1.0, 1.0], ForwardMode::Eval).unwrap();
        let g = p.backward(&f.cache, &[1.0, 0.0, -1.0]).unwrap();
        let mut plain = OptimizerState::new(&p, 0.5, 0.0).unwrap();
        sgd_step(&mut p, &g, &mut plain).unwrap();
        sgd_step(&mut p, &g, &mut plain).unwrap();
        let gf = flat_grads(&g);
        for (i, w) in flat(&p).iter().enumerate() {
            assert!((w - (w0[i] - 1.0 * gf[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn optimizer_validation() {
        let p = ModelParams::init(&[2, 3], Activation::Relu, 3, 1.0).unwrap();
        assert!(OptimizerState::new(&p, 0.0, 0.9).is_err());
        assert!(OptimizerState::new(&p, 0.1, 1.0).is_err());
        let mut q = ModelParams::init(&[2, 4], Activation::Relu, 3, 1.0).unwrap();
        let mut opt = OptimizerState::new(&p, 0.1, 0.9).unwrap();
        let g = Gradients::zeros_like(&p);
        assert!(matches!(
            sgd_step(&mut q, &g, &mut opt),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ModelParams::init(&[5, 9, 4, 3], Activation::Tanh, 77, 1.3).unwrap();
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        let q = ModelParams::load(buf.as_slice()).unwrap();
        assert_eq!(q.layer_sizes(), p.layer_sizes());
        assert_eq!(q.activation(), Activation::Tanh);
        for (a, b) in flat(&p).iter().zip(flat(&q)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut again = Vec::new();
        q.save(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn checkpoint_errors_carry_line_numbers() {
        let text = "mprl-params 1\nactivation relu\nlayers 2 1\nweights\n1.0 oops\nbias\n0\n";
        match ModelParams::load(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ModelParams::load("mprl-params 9\n".as_bytes()).is_err());
    }
}
