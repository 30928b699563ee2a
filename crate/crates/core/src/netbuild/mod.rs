//! Instantiates genomes as executable, differentiable networks at random
//! initialization, and exposes the intermediate quantities the metrics need:
//! input-embedding gradients, per-layer hidden states, per-head attention
//! outputs and softmax maps, and binarized activation codes.

mod codes;
mod rnn;
mod transformer;

pub use codes::ActivationCodes;
pub use rnn::{build_rnn, RnnEval, RnnNetwork};
pub use transformer::{
    build_transformer, HeadCapture, MixingMatrix, MixingSource, TransformerEval,
    TransformerNetwork,
};

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::{Error, Result};
use rand::Rng;

/// Sentinel in `Minibatch::targets` for positions that are not scored.
pub const IGNORE_TARGET: u32 = u32::MAX;

/// A batch of token sequences with per-position targets: next-token ids for
/// the RNN space, original ids at masked positions (and [`IGNORE_TARGET`]
/// elsewhere) for the transformer space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    tokens: Vec<u32>,
    targets: Vec<u32>,
    n: usize,
    t: usize,
}

impl Minibatch {
    pub fn new(tokens: Vec<u32>, targets: Vec<u32>, n: usize, t: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Contract(format!(
                "correlation metrics need at least 2 inputs, got batch size {n}"
            )));
        }
        if tokens.len() != n * t || targets.len() != n * t || t == 0 {
            return Err(Error::Dimension(format!(
                "batch of {n}x{t} needs {} tokens and targets, got {} and {}",
                n * t,
                tokens.len(),
                targets.len()
            )));
        }
        Ok(Minibatch { tokens, targets, n, t })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seq_len(&self) -> usize {
        self.t
    }

    pub fn token(&self, n: usize, t: usize) -> u32 {
        self.tokens[n * self.t + t]
    }

    pub fn target(&self, n: usize, t: usize) -> u32 {
        self.targets[n * self.t + t]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn targets(&self) -> &[u32] {
        &self.targets
    }

    /// Check every token id (and every scored target) against the vocabulary.
    pub fn validate_ids(&self, vocab: usize) -> Result<()> {
        if let Some(&bad) = self.tokens.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Index(format!("token id {bad} out of range for vocab {vocab}")));
        }
        if let Some(&bad) = self
            .targets
            .iter()
            .find(|&&id| id != IGNORE_TARGET && id as usize >= vocab)
        {
            return Err(Error::Index(format!("target id {bad} out of range for vocab {vocab}")));
        }
        Ok(())
    }
}

/// Optional forward-pass perturbations used by the noise metrics and the
/// finite-difference oracles.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts<'a> {
    /// Additive perturbation of the embedded inputs, laid out
    /// `[(n * T + t) * width + j]`.
    pub embed_noise: Option<&'a [f64]>,
    /// Scale one head's output by a factor (head masking/sensitivity).
    pub head_scale: Option<HeadScale>,
    /// Nudge a single entry of one head's output (finite differences).
    pub head_nudge: Option<HeadNudge>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadScale {
    pub layer: usize,
    pub head: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadNudge {
    pub layer: usize,
    pub head: usize,
    pub entry: usize,
    pub delta: f64,
}

/// A sign-binarized activation output: entries above the threshold become 1.
#[derive(Debug, Clone, Copy)]
pub struct ActivationCapture {
    pub id: TensorId,
    pub threshold: f64,
}

/// Named parameter tensor; `tensor` always has `requires_grad` set.
#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered parameter registry. Order is creation order and is part of the
/// determinism contract.
#[derive(Debug, Clone, Default)]
pub(crate) struct ParamSet {
    items: Vec<NamedParam>,
}

impl ParamSet {
    fn push(&mut self, name: String, tensor: Tensor) {
        debug_assert!(
            !self.items.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.items.push(NamedParam { name, tensor: tensor.with_grad() });
    }

    /// Uniform init in [-bound, +bound].
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: Vec<usize>, bound: f64, rng: &mut impl Rng) {
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.push(name.into(), Tensor::from_values(shape, values).expect("static shapes"));
    }

    pub fn add_constant(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) {
        let numel: usize = shape.iter().product();
        self.push(name.into(), Tensor::from_values(shape, vec![value; numel]).expect("static shapes"));
    }

    pub fn count(&self) -> u64 {
        self.items.iter().map(|p| p.tensor.numel() as u64).sum()
    }

    pub fn items(&self) -> &[NamedParam] {
        &self.items
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.items.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.items.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Copy every parameter onto a fresh tape, in registry order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<(String, TensorId)> {
        self.items
            .iter()
            .map(|p| (p.name.clone(), tape.leaf(p.tensor.clone())))
            .collect()
    }
}

/// Find a bound parameter id by name.
pub fn bound_param(params: &[(String, TensorId)], name: &str) -> Option<TensorId> {
    params.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
}
