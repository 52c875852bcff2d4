use rand::Rng;

use super::{join, Linear, ParamSet};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Multi-head self-attention weights. Query/key/value projections carry no
/// bias; the output projection (`proj`) is a full linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    /// `[C, d_model]`
    pub wq: T,
    pub wk: T,
    pub wv: T,
    /// `[d_model, C]` plus bias.
    pub proj: Linear<T>,
    pub heads: usize,
}

impl AttentionParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("channel count {channels} is not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Tensor::xavier_uniform(channels, channels, rng),
            wk: Tensor::xavier_uniform(channels, channels, rng),
            wv: Tensor::xavier_uniform(channels, channels, rng),
            proj: Linear::init(channels, channels, true, rng),
            heads,
        })
    }
}

impl<T> ParamSet<T> for AttentionParams<T> {
    type Mapped<U> = AttentionParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            wq: f(&join(prefix, "wq"), &self.wq),
            wk: f(&join(prefix, "wk"), &self.wk),
            wv: f(&join(prefix, "wv"), &self.wv),
            proj: self.proj.map_leaves(&join(prefix, "proj"), f),
            heads: self.heads,
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// `Softmax(QKᵀ/√d)V` per head, heads merged back to `[..., J, d_model]`.
/// The output projection is not applied.
pub fn multi_head_attention(tape: &mut Tape, x: Var, params: &AttentionParams<Var>) -> Result<Var> {
    let q = tape.matmul(x, params.wq)?;
    let k = tape.matmul(x, params.wk)?;
    let v = tape.matmul(x, params.wv)?;
    let d_model = *tape.shape(q).last().unwrap_or(&0);
    if params.heads == 0 || !d_model.is_multiple_of(params.heads) {
        return Err(Error::dim("multi_head_attention", tape.shape(q), &[params.heads]));
    }
    let head_dim = d_model / params.heads;

    let q = tape.split_heads(q, params.heads)?;
    let k = tape.split_heads(k, params.heads)?;
    let v = tape.split_heads(v, params.heads)?;
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let weights = tape.softmax_lastdim(scores)?;
    let context = tape.matmul(weights, v)?;
    tape.merge_heads(context)
}

/// Graph-to-attention guidance: multi-head attention plus `s · f_graph`.
pub fn attention_g2a(tape: &mut Tape, x: Var, f_graph: Var, params: &AttentionParams<Var>, s_g2a: Var) -> Result<Var> {
    let attended = multi_head_attention(tape, x, params)?;
    if tape.shape(attended) != tape.shape(f_graph) {
        return Err(Error::dim("attention_g2a", tape.shape(attended), tape.shape(f_graph)));
    }
    let injected = tape.scale_by(f_graph, s_g2a)?;
    tape.add(attended, injected)
}
