//! Dense feed-forward networks with a small reverse-mode tape.
//!
//! Two networks live here: the set predictor, which maps covariates to the
//! raw parameters of an ellipsoid (center, Cholesky entries, scale), and the
//! coverage regressor, a sigmoid-headed classifier estimating the probability
//! that a realization falls inside its set.
//!
//! The tape records only the operations these networks need (affine layers
//! and elementwise activations). Gradients of any scalar built on top of the
//! network outputs are obtained by seeding [`backward`] with the gradient of
//! that scalar with respect to the outputs.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named block inside a [`ParamVector`], stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage with a layout of disjoint named slices covering it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<ParamSlice>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    len: usize,
    layout: Vec<ParamSlice>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl ParamVector {
    /// Builds a zero vector. The slices must tile `0..total` without gaps.
    pub fn zeros(layout: Vec<ParamSlice>) -> Result<Self> {
        let mut expected = 0;
        for s in &layout {
            if s.offset != expected {
                return Err(Error::input(format!(
                    "parameter slice {} starts at {} but {} was expected",
                    s.name, s.offset, expected
                )));
            }
            expected += s.len();
        }
        Ok(Self {
            values: vec![0.0; expected],
            layout,
        })
    }

    pub fn from_values(layout: Vec<ParamSlice>, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(layout)?;
        if values.len() != p.values.len() {
            return Err(Error::input(format!(
                "parameter vector has {} values but its layout needs {}",
                values.len(),
                p.values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[ParamSlice] {
        &self.layout
    }

    pub fn slice(&self, name: &str) -> Option<&ParamSlice> {
        self.layout.iter().find(|s| s.name == name)
    }

    /// A zero vector with the same layout, used for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    /// Little-endian f64 blob.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(layout: Vec<ParamSlice>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(Error::input("parameter blob length is not a multiple of 8"));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_values(layout, values)
    }

    /// Writes `<stem>.bin` (raw values) and `<stem>.json` (layout header plus
    /// caller metadata).
    pub fn save(&self, stem: &Path, meta: serde_json::Value) -> Result<()> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        std::fs::write(&bin, self.to_le_bytes()).map_err(|e| Error::io(&bin, e))?;
        let header = ParamHeader {
            len: self.len(),
            layout: self.layout.clone(),
            meta,
        };
        let text = serde_json::to_string_pretty(&header)?;
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamVector::save`], returning the
    /// parameters and the metadata stored in the header.
    pub fn load(stem: &Path) -> Result<(Self, serde_json::Value)> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let header: ParamHeader = serde_json::from_str(&text)?;
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let p = Self::from_le_bytes(header.layout, &bytes)?;
        if p.len() != header.len {
            return Err(Error::input(format!(
                "checkpoint {} declares {} values but holds {}",
                json.display(),
                header.len,
                p.len()
            )));
        }
        Ok((p, header.meta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Affine {
        input: usize,
        weight: usize,
        bias: usize,
        rows: usize,
        cols: usize,
    },
    Activate {
        input: usize,
        act: Activation,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Recorded forward pass. Borrows the parameters it was run with so the
/// backward pass can reuse the weights without copying them.
#[derive(Debug, Clone, Default)]
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn input(&mut self, x: &[f64]) -> usize {
        self.push(Op::Input, x.to_vec())
    }

    /// `W x + b` with `W` stored row-major at `weight` and `b` at `bias`.
    pub fn affine(&mut self, input: usize, weight: &ParamSlice, bias: &ParamSlice) -> Result<usize> {
        let x = &self.nodes[input].value;
        if weight.cols != x.len() || bias.len() != weight.rows {
            return Err(Error::input(format!(
                "affine layer {} expects input of length {} but got {}",
                weight.name,
                weight.cols,
                x.len()
            )));
        }
        let w = &self.params[weight.range()];
        let b = &self.params[bias.range()];
        let out: Vec<f64> = (0..weight.rows)
            .map(|r| {
                let row = &w[r * weight.cols..(r + 1) * weight.cols];
                b[r] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect();
        Ok(self.push(
            Op::Affine {
                input,
                weight: weight.offset,
                bias: bias.offset,
                rows: weight.rows,
                cols: weight.cols,
            },
            out,
        ))
    }

    pub fn activate(&mut self, input: usize, act: Activation) -> usize {
        let out = self.nodes[input].value.iter().map(|&v| act.apply(v)).collect();
        self.push(Op::Activate { input, act }, out)
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> usize {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of the last recorded node.
    pub fn output(&self) -> &[f64] {
        self.nodes.last().map(|n| n.value.as_slice()).unwrap_or(&[])
    }

    pub fn value(&self, node: usize) -> &[f64] {
        &self.nodes[node].value
    }
}

/// Gradient of `seed · output` with respect to every parameter.
pub fn backward(tape: &Tape<'_>, seed: &[f64]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; tape.params.len()];
    backward_into(tape, seed, &mut grad)?;
    Ok(grad)
}

/// Same as [`backward`] but accumulates into `grad`.
pub fn backward_into(tape: &Tape<'_>, seed: &[f64], grad: &mut [f64]) -> Result<()> {
    if tape.nodes.is_empty() {
        return Err(Error::State("backward called before any forward pass".into()));
    }
    if grad.len() != tape.params.len() {
        return Err(Error::input(format!(
            "gradient buffer has length {} but the tape has {} parameters",
            grad.len(),
            tape.params.len()
        )));
    }
    let last = tape.nodes.len() - 1;
    if seed.len() != tape.nodes[last].value.len() {
        return Err(Error::input(format!(
            "seed has length {} but the output has length {}",
            seed.len(),
            tape.nodes[last].value.len()
        )));
    }
    let mut adj: Vec<Vec<f64>> = tape.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
    adj[last].copy_from_slice(seed);
    for idx in (0..tape.nodes.len()).rev() {
        let node_adj = std::mem::take(&mut adj[idx]);
        if node_adj.iter().all(|&a| a == 0.0) {
            continue;
        }
        match tape.nodes[idx].op {
            Op::Input => {}
            Op::Activate { input, act } => {
                let x = &tape.nodes[input].value;
                let y = &tape.nodes[idx].value;
                for i in 0..y.len() {
                    adj[input][i] += node_adj[i] * act.derivative_from_output(x[i], y[i]);
                }
            }
            Op::Affine {
                input,
                weight,
                bias,
                rows,
                cols,
            } => {
                let x = &tape.nodes[input].value;
                let w = &tape.params[weight..weight + rows * cols];
                for r in 0..rows {
                    let a = node_adj[r];
                    if a == 0.0 {
                        continue;
                    }
                    grad[bias + r] += a;
                    let gw = &mut grad[weight + r * cols..weight + (r + 1) * cols];
                    for c in 0..cols {
                        gw[c] += a * x[c];
                        adj[input][c] += a * w[r * cols + c];
                    }
                }
            }
        }
    }
    Ok(())
}

/// Fully connected network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Mlp {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Identity,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn layout(&self) -> Vec<ParamSlice> {
        let widths = self.widths();
        let mut out = Vec::new();
        let mut offset = 0;
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            out.push(ParamSlice {
                name: format!("layer{l}.weight"),
                offset,
                rows: fan_out,
                cols: fan_in,
            });
            offset += fan_in * fan_out;
            out.push(ParamSlice {
                name: format!("layer{l}.bias"),
                offset,
                rows: fan_out,
                cols: 1,
            });
            offset += fan_out;
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(ParamSlice::len).sum()
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases. The
    /// final layer is multiplied by `final_gain`.
    pub fn init_into<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R, final_gain: f64) {
        let layout = self.layout();
        let n_layers = layout.len() / 2;
        for (l, pair) in layout.chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            let bound = 1.0 / (w.cols.max(1) as f64).sqrt();
            let gain = if l + 1 == n_layers { final_gain } else { 1.0 };
            for v in &mut params[w.range()] {
                *v = gain * rng.random_range(-bound..=bound);
            }
            for v in &mut params[b.range()] {
                *v = 0.0;
            }
        }
    }

    /// Records a forward pass. `params` may be longer than the network (extra
    /// trailing slices belong to the caller).
    pub fn forward<'p>(&self, params: &'p [f64], input: &[f64]) -> Result<Tape<'p>> {
        if input.len() != self.input_dim {
            return Err(Error::input(format!(
                "network expects {} inputs but got {}",
                self.input_dim,
                input.len()
            )));
        }
        let layout = self.layout();
        let needed: usize = layout.iter().map(ParamSlice::len).sum();
        if params.len() < needed {
            return Err(Error::input(format!(
                "network needs {needed} parameters but got {}",
                params.len()
            )));
        }
        let mut tape = Tape::new(params);
        let mut node = tape.input(input);
        let n_layers = layout.len() / 2;
        for (l, pair) in layout.chunks(2).enumerate() {
            node = tape.affine(node, &pair[0], &pair[1])?;
            let act = if l + 1 == n_layers {
                self.output_activation
            } else {
                self.hidden_activation
            };
            if act != Activation::Identity {
                node = tape.activate(node, act);
            }
        }
        Ok(tape)
    }
}

/// Raw outputs of the set predictor for one covariate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SetPredictorOutput {
    pub mu: Vec<f64>,
    /// Lower triangle of the Cholesky factor, row-major, diagonal still in
    /// log space.
    pub l_raw: Vec<f64>,
    pub r_raw: f64,
}

/// Gradient of a scalar with respect to a [`SetPredictorOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct SetPredictorGrad {
    pub mu: Vec<f64>,
    pub l_raw: Vec<f64>,
    pub r_raw: f64,
}

impl SetPredictorGrad {
    pub fn zeros(m: usize) -> Self {
        Self {
            mu: vec![0.0; m],
            l_raw: vec![0.0; m * (m + 1) / 2],
            r_raw: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetPredictorConfig {
    pub covariate_dim: usize,
    pub uncertainty_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// When false the scale is a single learned scalar shared by every
    /// covariate value.
    pub psi_dependent_radius: bool,
    pub final_gain: f64,
    pub init_log_radius: f64,
}

impl SetPredictorConfig {
    pub fn new(covariate_dim: usize, uncertainty_dim: usize) -> Self {
        Self {
            covariate_dim,
            uncertainty_dim,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            psi_dependent_radius: false,
            final_gain: 0.1,
            init_log_radius: 0.0,
        }
    }
}

/// Network mapping covariates to ellipsoid parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SetPredictor {
    pub config: SetPredictorConfig,
    mlp: Mlp,
}

pub const RADIUS_SLICE: &str = "radius";

impl SetPredictor {
    pub fn new(config: SetPredictorConfig) -> Self {
        let m = config.uncertainty_dim;
        let out = m + m * (m + 1) / 2 + usize::from(config.psi_dependent_radius);
        let mut mlp = Mlp::new(config.covariate_dim, config.hidden.clone(), out);
        mlp.hidden_activation = config.activation;
        Self { config, mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn layout(&self) -> Vec<ParamSlice> {
        let mut layout = self.mlp.layout();
        if !self.config.psi_dependent_radius {
            layout.push(ParamSlice {
                name: RADIUS_SLICE.into(),
                offset: self.mlp.num_params(),
                rows: 1,
                cols: 1,
            });
        }
        layout
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(self.layout()).expect("layout is contiguous")
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut p = self.zeros();
        self.mlp.init_into(p.values_mut(), rng, self.config.final_gain);
        if self.config.psi_dependent_radius {
            // last output of the final bias carries the log-scale
            let bias = self.mlp.layout().pop().expect("at least one layer");
            p.values_mut()[bias.range().end - 1] = self.config.init_log_radius;
        } else {
            let n = self.mlp.num_params();
            p.values_mut()[n] = self.config.init_log_radius;
        }
        p
    }

    fn check(&self, theta: &ParamVector) -> Result<()> {
        if theta.layout() != self.layout().as_slice() {
            return Err(Error::input("parameter layout does not match the set predictor"));
        }
        Ok(())
    }

    /// Forward pass; the tape is kept for [`SetPredictor::backward_into`].
    pub fn forward<'p>(&self, theta: &'p ParamVector, psi: &[f64]) -> Result<(SetPredictorOutput, Tape<'p>)> {
        self.check(theta)?;
        let tape = self.mlp.forward(theta.values(), psi)?;
        let out = tape.output();
        let m = self.config.uncertainty_dim;
        let nl = m * (m + 1) / 2;
        let r_raw = if self.config.psi_dependent_radius {
            out[m + nl]
        } else {
            theta.values()[self.mlp.num_params()]
        };
        let res = SetPredictorOutput {
            mu: out[..m].to_vec(),
            l_raw: out[m..m + nl].to_vec(),
            r_raw,
        };
        if res.mu.iter().chain(&res.l_raw).any(|v| !v.is_finite()) || !r_raw.is_finite() {
            return Err(Error::numeric("set predictor produced a non-finite output"));
        }
        Ok((res, tape))
    }

    /// Accumulates the parameter gradient for an output-space gradient.
    pub fn backward_into(&self, tape: &Tape<'_>, seed: &SetPredictorGrad, grad: &mut [f64]) -> Result<()> {
        let mut s = Vec::with_capacity(self.mlp.output_dim);
        s.extend(&seed.mu);
        s.extend(&seed.l_raw);
        if self.config.psi_dependent_radius {
            s.push(seed.r_raw);
        } else {
            grad[self.mlp.num_params()] += seed.r_raw;
        }
        backward_into(tape, &s, grad)
    }
}

/// Convenience form of [`SetPredictor::forward`] without the tape.
pub fn forward_set_predictor(predictor: &SetPredictor, theta: &ParamVector, psi: &[f64]) -> Result<SetPredictorOutput> {
    predictor.forward(theta, psi).map(|(o, _)| o)
}

/// Sigmoid-headed classifier g(ψ) ∈ (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticNet {
    mlp: Mlp,
}

impl LogisticNet {
    /// `hidden = []` gives plain logistic regression; `input_dim = 0` gives an
    /// intercept-only model.
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            mlp: Mlp::new(input_dim, hidden, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim
    }

    /// True when the score is affine in the parameters.
    pub fn is_linear(&self) -> bool {
        self.mlp.hidden.is_empty()
    }

    pub fn layout(&self) -> Vec<ParamSlice> {
        self.mlp.layout()
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(self.layout()).expect("layout is contiguous")
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut p = self.zeros();
        self.mlp.init_into(p.values_mut(), rng, 1.0);
        p
    }

    /// Pre-sigmoid score and its tape.
    pub fn logit_tape<'p>(&self, phi: &'p [f64], psi: &[f64]) -> Result<(f64, Tape<'p>)> {
        let tape = self.mlp.forward(phi, psi)?;
        let z = tape.output()[0];
        Ok((z, tape))
    }

    pub fn logit(&self, phi: &[f64], psi: &[f64]) -> Result<f64> {
        self.logit_tape(phi, psi).map(|(z, _)| z)
    }

    /// Score and its gradient with respect to the parameters.
    pub fn logit_grad(&self, phi: &[f64], psi: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (z, tape) = self.logit_tape(phi, psi)?;
        Ok((z, backward(&tape, &[1.0])?))
    }
}

pub fn forward_logistic(net: &LogisticNet, phi: &ParamVector, psi: &[f64]) -> Result<f64> {
    if phi.len() != net.num_params() {
        return Err(Error::input(format!(
            "regressor expects {} parameters but got {}",
            net.num_params(),
            phi.len()
        )));
    }
    Ok(sigmoid(net.logit(phi.values(), psi)?))
}

/// First-order update rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Descent step: `params ← params − lr · direction(grad)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Momentum { beta } => {
                for i in 0..params.len() {
                    self.m[i] = beta * self.m[i] + grad[i];
                    params[i] -= self.lr * self.m[i];
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    params[i] -= self.lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}
