//! Architectural units and their parameter containers.
//!
//! Parameter structs are generic over the leaf type: `T = Tensor` for stored
//! weights, `T = Var` once they have been recorded on a tape for a forward
//! pass. [`ParamSet`] gives every container a stable, dotted naming scheme
//! used by the optimizer, gradient checks and checkpoints.

mod attention;
mod embed;
mod gcn;
mod iga;
mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use attention::{attention_g2a, multi_head_attention, AttentionParams};
pub use embed::{patch_embed, regress_head, EmbedParams};
pub use gcn::{gcn_forward, GcnBlockParams, GcnLayerParams};
pub use iga::{a2g_inject, iga_forward, A2gSource, IgaBlockParams, IgaOptions};
pub use mlp::{mlp_forward, umlp_forward, MlpParams, UmlpOutput, UmlpParams};

/// Nonlinearity used inside graph convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// A named tree of parameter leaves.
pub trait ParamSet<T> {
    type Mapped<U>;

    /// Rebuilds the container with every leaf transformed, visiting leaves in
    /// a fixed order with their dotted names.
    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        let _ = self.map_leaves(prefix, &mut |name, t| f(name, t));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Records every tensor of a parameter container as a trainable leaf.
pub fn bind<P: ParamSet<Tensor>>(tape: &mut Tape, params: &P) -> P::Mapped<Var> {
    params.map_leaves("", &mut |_, t| tape.leaf(t.clone()))
}

/// Records every tensor as a detached constant (inference only).
pub fn bind_constant<P: ParamSet<Tensor>>(tape: &mut Tape, params: &P) -> P::Mapped<Var> {
    params.map_leaves("", &mut |_, t| tape.constant(t.clone()))
}

/// Same structure with every tensor replaced by zeros.
pub fn zeros_like<P: ParamSet<Tensor>>(params: &P) -> P::Mapped<Tensor> {
    params.map_leaves("", &mut |_, t| Tensor::zeros(t.shape()))
}

/// `x · weight (+ bias)` with `weight: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: Option<T>,
}

impl Linear<Tensor> {
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        Self { weight: Tensor::xavier_uniform(fan_in, fan_out, rng), bias: bias.then(|| Tensor::zeros([fan_out])) }
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

impl<T> ParamSet<T> for Linear<T> {
    type Mapped<U> = Linear<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&join(prefix, "bias"), b)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: T,
    pub beta: T,
}

impl LayerNormParams<Tensor> {
    pub fn init(channels: usize) -> Self {
        Self { gamma: Tensor::ones([channels]), beta: Tensor::zeros([channels]) }
    }
}

impl LayerNormParams<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta)
    }
}

impl<T> ParamSet<T> for LayerNormParams<T> {
    type Mapped<U> = LayerNormParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LayerNormParams<U> {
        LayerNormParams { gamma: f(&join(prefix, "gamma"), &self.gamma), beta: f(&join(prefix, "beta"), &self.beta) }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Inverted dropout applied to residual branches during training.
pub struct Dropout {
    pub rate: f64,
    pub rng: rand_chacha::ChaCha8Rng,
}

impl Dropout {
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let rng = &mut self.rng;
        let mask =
            Tensor::from_fn(tape.shape(x).to_vec(), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

pub(crate) fn maybe_dropout(tape: &mut Tape, x: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_names_and_visit_order() {
        let l = Linear { weight: Tensor::zeros([2, 3]), bias: Some(Tensor::zeros([3])) };
        let mut names = Vec::new();
        l.visit("head", &mut |n, _| names.push(n.to_string()));
        assert_eq!(names, ["head.weight", "head.bias"]);
    }
}
