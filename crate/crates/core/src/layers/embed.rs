use rand::Rng;

use super::{join, Linear, ParamSet};
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-joint linear lift of 2D coordinates plus a learned positional row per
/// joint.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams<T> {
    /// `[2, C]`
    pub weight: T,
    /// `[J, C]`
    pub pos: T,
}

impl EmbedParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(joints: usize, channels: usize, rng: &mut R) -> Self {
        Self { weight: Tensor::xavier_uniform(2, channels, rng), pos: Tensor::normal([joints, channels], 0.02, rng) }
    }
}

impl<T> ParamSet<T> for EmbedParams<T> {
    type Mapped<U> = EmbedParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> EmbedParams<U> {
        EmbedParams { weight: f(&join(prefix, "weight"), &self.weight), pos: f(&join(prefix, "pos"), &self.pos) }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "pos"), &mut self.pos);
    }
}

/// `[..., J, 2] → [..., J, C]`
pub fn patch_embed(tape: &mut Tape, pose2d: Var, params: &EmbedParams<Var>) -> Result<Var> {
    let lifted = tape.matmul(pose2d, params.weight)?;
    tape.add_trailing(lifted, params.pos)
}

/// `[..., J, C] → [..., J, 3]`
pub fn regress_head(tape: &mut Tape, x: Var, head: &Linear<Var>) -> Result<Var> {
    head.forward(tape, x)
}
