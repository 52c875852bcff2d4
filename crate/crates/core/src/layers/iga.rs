use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    attention_g2a, gcn_forward, join, maybe_dropout, multi_head_attention, Activation, AttentionParams, Dropout,
    GcnBlockParams, LayerNormParams, ParamSet,
};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which attention output is fed back into the GCN path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum A2gSource {
    /// The attention output after the graph features were injected.
    #[default]
    PostInjection,
    /// The plain multi-head attention output.
    PreInjection,
}

/// Interleaved graph/attention block. `gcn` is `None` for the attention-only
/// ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct IgaBlockParams<T> {
    pub norm: LayerNormParams<T>,
    pub gcn: Option<GcnBlockParams<T>>,
    pub attn: AttentionParams<T>,
}

impl IgaBlockParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(channels: usize, heads: usize, use_gcn: bool, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm: LayerNormParams::init(channels),
            gcn: use_gcn.then(|| GcnBlockParams::init(channels, rng)),
            attn: AttentionParams::init(channels, heads, rng)?,
        })
    }
}

impl<T> ParamSet<T> for IgaBlockParams<T> {
    type Mapped<U> = IgaBlockParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> IgaBlockParams<U> {
        IgaBlockParams {
            norm: self.norm.map_leaves(&join(prefix, "norm"), f),
            gcn: self.gcn.as_ref().map(|g| g.map_leaves(&join(prefix, "gcn"), f)),
            attn: self.attn.map_leaves(&join(prefix, "attn"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        if let Some(g) = &mut self.gcn {
            g.visit_mut(&join(prefix, "gcn"), f);
        }
        self.attn.visit_mut(&join(prefix, "attn"), f);
    }
}

/// Per-call switches for one IGA block.
pub struct IgaOptions<'a> {
    /// One-element tensors; they may be leaves when their gradient is wanted.
    pub s_g2a: Var,
    pub s_a2g: Var,
    pub use_g2a: bool,
    pub use_a2g: bool,
    pub a2g_source: A2gSource,
    pub activation: Activation,
    pub dropout: Option<&'a mut Dropout>,
}

/// Attention-to-graph guidance: `G1 + s · f_global`.
pub fn a2g_inject(tape: &mut Tape, g1: Var, f_global: Var, s_a2g: Var) -> Result<Var> {
    if tape.shape(g1) != tape.shape(f_global) {
        return Err(Error::dim("a2g_inject", tape.shape(g1), tape.shape(f_global)));
    }
    let injected = tape.scale_by(f_global, s_a2g)?;
    tape.add(g1, injected)
}

/// One IGA block on `x: [..., J, C]`:
///
/// ```text
/// Xn     = LN(X)
/// G1     = σ(gcn1(Xn))
/// X_G2A  = MHA(Xn) + s_g2a · G1
/// X_A2G  = G1 + s_a2g · X_G2A
/// X_IGA  = X + gcn2(X_A2G) + Proj(X_G2A)
/// ```
///
/// Without a GCN path the block reduces to `X + Proj(MHA(Xn))`. Disabled
/// guidance directions are skipped entirely rather than scaled by zero.
pub fn iga_forward(
    tape: &mut Tape,
    x: Var,
    params: &IgaBlockParams<Var>,
    adjacency: Var,
    opts: IgaOptions<'_>,
) -> Result<Var> {
    let xn = params.norm.forward(tape, x)?;
    let branch = match &params.gcn {
        None => {
            let attended = multi_head_attention(tape, xn, &params.attn)?;
            params.attn.proj.forward(tape, attended)?
        }
        Some(gcn) => {
            let g1 = gcn_forward(tape, xn, &gcn.first, adjacency, Some(opts.activation))?;
            let (plain, x_g2a) = match (opts.use_g2a, opts.a2g_source) {
                (true, A2gSource::PostInjection) => (None, attention_g2a(tape, xn, g1, &params.attn, opts.s_g2a)?),
                (true, A2gSource::PreInjection) => {
                    let plain = multi_head_attention(tape, xn, &params.attn)?;
                    let injected = tape.scale_by(g1, opts.s_g2a)?;
                    (Some(plain), tape.add(plain, injected)?)
                }
                (false, _) => {
                    let plain = multi_head_attention(tape, xn, &params.attn)?;
                    (Some(plain), plain)
                }
            };
            let x_a2g = if opts.use_a2g {
                let f_global = match opts.a2g_source {
                    A2gSource::PostInjection => x_g2a,
                    A2gSource::PreInjection => plain.unwrap_or(x_g2a),
                };
                a2g_inject(tape, g1, f_global, opts.s_a2g)?
            } else {
                g1
            };
            let graph_out = gcn_forward(tape, x_a2g, &gcn.second, adjacency, None)?;
            let attn_out = params.attn.proj.forward(tape, x_g2a)?;
            tape.add(graph_out, attn_out)?
        }
    };
    let branch = maybe_dropout(tape, branch, opts.dropout)?;
    tape.add(x, branch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{bind, zeros_like};
    use crate::skeleton::SkeletonGraph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn opts(tape: &mut Tape, s1: f64, s2: f64) -> IgaOptions<'static> {
        IgaOptions {
            s_g2a: tape.constant(Tensor::scalar(s1)),
            s_a2g: tape.constant(Tensor::scalar(s2)),
            use_g2a: true,
            use_a2g: true,
            a2g_source: A2gSource::PostInjection,
            activation: Activation::Gelu,
            dropout: None,
        }
    }

    #[test]
    fn a2g_reductions() {
        let mut tape = Tape::new();
        let g1 = tape.constant(Tensor::ones([3, 2]));
        let f = tape.constant(Tensor::ones([3, 2]));
        let s = tape.constant(Tensor::scalar(0.8));
        let out = a2g_inject(&mut tape, g1, f, s).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 1.8));

        let zero = tape.constant(Tensor::scalar(0.0));
        let out = a2g_inject(&mut tape, g1, f, zero).unwrap();
        assert_eq!(tape.value(out), tape.value(g1));

        let fz = tape.constant(Tensor::zeros([3, 2]));
        let out = a2g_inject(&mut tape, g1, fz, s).unwrap();
        assert_eq!(tape.value(out), tape.value(g1));

        let bad = tape.constant(Tensor::zeros([2, 3]));
        assert!(a2g_inject(&mut tape, g1, bad, s).is_err());
    }

    #[test]
    fn zero_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = SkeletonGraph::h36m_17();
        let p = zeros_like(&IgaBlockParams::init(8, 2, true, &mut rng).unwrap());
        let mut tape = Tape::new();
        let pv = bind(&mut tape, &p);
        let x = Tensor::uniform([2, 17, 8], -1.0, 1.0, &mut rng);
        let xv = tape.constant(x.clone());
        let adj = tape.constant(g.adjacency().clone());
        let o = opts(&mut tape, 0.5, 0.8);
        let y = iga_forward(&mut tape, xv, &pv, adj, o).unwrap();
        assert_eq!(tape.value(y), &x);
    }
}
