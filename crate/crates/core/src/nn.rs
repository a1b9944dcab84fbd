//! Small feedforward networks, Adam and weight EMA.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Graph, Gradients, Node, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("network needs at least two positive layer sizes, got {0:?}")]
    BadDims(Vec<usize>),
    #[error("input has {got} columns, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("non-finite gradient in {term}")]
    NonFiniteGradient { term: String },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Weights and biases of an MLP with SeLU hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl MlpParams {
    /// LeCun-normal weights (variance `1/fan_in`) and zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        Self::init_with_output_gain(dims, seed, 1.0)
    }

    /// As [`MlpParams::init`], with the output layer's weights scaled by
    /// `gain`. A small gain starts the network close to the zero function.
    pub fn init_with_output_gain(dims: &[usize], seed: u64, gain: f64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::BadDims(dims.to_vec()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (1.0 / fan_in as f64).sqrt() * if l + 1 == layers { gain } else { 1.0 };
            let normal = Normal::new(0.0, std).expect("positive std");
            let w = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            weights.push(Tensor::matrix(fan_out, fan_in, w)?);
            biases.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds a network from explicit layers (`weights[l]` is `out x in`).
    pub fn from_layers(weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        let mut dims = Vec::new();
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(NnError::BadDims(dims));
        }
        dims.push(weights[0].cols());
        for (w, b) in weights.iter().zip(&biases) {
            if w.cols() != *dims.last().unwrap() || b.shape() != [1, w.rows()] {
                return Err(NnError::Layout(format!(
                    "layer {:?} with bias {:?} after width {}",
                    w.shape(),
                    b.shape(),
                    dims.last().unwrap()
                )));
            }
            dims.push(w.rows());
        }
        Ok(Self {
            dims,
            weights,
            biases,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    /// All parameters flattened in [`MlpParams::tensors`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(NnError::Layout(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Places the parameters on `g` as gradient-carrying leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            weights: self.weights.iter().map(|w| g.param(w.clone())).collect(),
            biases: self.biases.iter().map(|b| g.param(b.clone())).collect(),
        }
    }

    /// Graph-free forward pass.
    pub fn eval(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape().len() != 2 || input.cols() != self.input_dim() {
            return Err(NnError::InputDim {
                expected: self.input_dim(),
                got: input.cols(),
            });
        }
        let last = self.weights.len() - 1;
        let mut h = input.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = autodiff::affine(&h, w, b);
            if l < last {
                h.data_mut().iter_mut().for_each(|v| *v = autodiff::selu(*v));
            }
        }
        if let Some(index) = h.first_non_finite() {
            return Err(AutodiffError::NonFinite {
                op: autodiff::OpKind::Linear,
                index,
            }
            .into());
        }
        Ok(h)
    }
}

/// Parameter leaves of an [`MlpParams`] on a particular graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    weights: Vec<Node>,
    biases: Vec<Node>,
}

impl BoundMlp {
    /// Batched affine/SeLU chain with an identity output layer.
    pub fn forward(&self, g: &mut Graph, input: Node) -> Result<Node> {
        let expected = g.value(self.weights[0]).cols();
        let got = g.value(input).cols();
        if got != expected || g.value(input).shape().len() != 2 {
            return Err(NnError::InputDim { expected, got });
        }
        let last = self.weights.len() - 1;
        let mut h = input;
        for (l, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = g.linear(h, w, b)?;
            if l < last {
                h = g.selu(h)?;
            }
        }
        Ok(h)
    }

    /// Leaves in [`MlpParams::tensors`] order.
    pub fn nodes(&self) -> Vec<Node> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }

    /// Collects this network's gradients in parameter order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.nodes().into_iter().map(|n| grads.get(n)).collect()
    }
}

/// Graph-building forward pass on freshly bound parameters.
pub fn mlp_forward(g: &mut Graph, params: &MlpParams, input: Node) -> Result<(Node, BoundMlp)> {
    let bound = params.bind(g);
    let out = bound.forward(g, input)?;
    Ok((out, bound))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.tensors().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Errors unless `other` holds moments shaped like `self`.
    pub fn check_layout(&self, other: &AdamState) -> Result<()> {
        let shape = |s: &AdamState| s.m.iter().map(Vec::len).collect::<Vec<_>>();
        let vshape = |s: &AdamState| s.v.iter().map(Vec::len).collect::<Vec<_>>();
        if shape(self) != shape(other) || vshape(self) != vshape(other) {
            return Err(NnError::Layout("optimizer moments do not match the network".into()));
        }
        Ok(())
    }

    /// Applies one update. `term` names the loss the gradients came from and
    /// is reported if any gradient entry is not finite; no parameter is
    /// touched in that case.
    pub fn step(&mut self, params: &mut MlpParams, grads: &[Tensor], term: &str) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(NnError::Layout(format!(
                "{} gradients for {} tensors",
                grads.len(),
                self.m.len()
            )));
        }
        for (g, m) in grads.iter().zip(&self.m) {
            if g.len() != m.len() {
                return Err(NnError::Layout(format!("gradient {:?}", g.shape())));
            }
            if g.first_non_finite().is_some() {
                return Err(NnError::NonFiniteGradient { term: term.into() });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *p);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: MlpParams,
}

impl EmaState {
    pub fn new(params: &MlpParams, decay: f64) -> Self {
        Self {
            decay,
            shadow: params.clone(),
        }
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &MlpParams) -> Result<()> {
        if params.dims() != self.shadow.dims() {
            return Err(NnError::Layout(format!(
                "ema shadow {:?} vs params {:?}",
                self.shadow.dims(),
                params.dims()
            )));
        }
        let d = self.decay;
        for (s, p) in self.shadow.tensors_mut().zip(params.tensors()) {
            for (s, &p) in s.data_mut().iter_mut().zip(p.data()) {
                *s = d * *s + (1.0 - d) * p;
            }
        }
        Ok(())
    }
}
