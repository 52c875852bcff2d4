use rand::Rng;

use super::{join, Activation, ParamSet};
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One vanilla graph convolution: `σ(Ã · X · W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayerParams<T> {
    /// `[C_in, C_out]`
    pub weight: T,
    /// `[C_out]`
    pub bias: T,
}

impl GcnLayerParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self { weight: Tensor::xavier_uniform(c_in, c_out, rng), bias: Tensor::zeros([c_out]) }
    }
}

impl<T> ParamSet<T> for GcnLayerParams<T> {
    type Mapped<U> = GcnLayerParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> GcnLayerParams<U> {
        GcnLayerParams { weight: f(&join(prefix, "weight"), &self.weight), bias: f(&join(prefix, "bias"), &self.bias) }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// The two-layer GCN path of an IGA block.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnBlockParams<T> {
    pub first: GcnLayerParams<T>,
    pub second: GcnLayerParams<T>,
}

impl GcnBlockParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            first: GcnLayerParams::init(channels, channels, rng),
            second: GcnLayerParams::init(channels, channels, rng),
        }
    }
}

impl<T> ParamSet<T> for GcnBlockParams<T> {
    type Mapped<U> = GcnBlockParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> GcnBlockParams<U> {
        GcnBlockParams {
            first: self.first.map_leaves(&join(prefix, "first"), f),
            second: self.second.map_leaves(&join(prefix, "second"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
    }
}

/// Graph convolution over `x: [..., J, C_in]` with the normalized adjacency
/// `adjacency: [J, J]`. Returns the pre-activation when `activation` is `None`.
pub fn gcn_forward(
    tape: &mut Tape,
    x: Var,
    params: &GcnLayerParams<Var>,
    adjacency: Var,
    activation: Option<Activation>,
) -> Result<Var> {
    let aggregated = tape.matmul(adjacency, x)?;
    let lifted = tape.linear(aggregated, params.weight, Some(params.bias))?;
    Ok(match activation {
        Some(act) => act.apply(tape, lifted),
        None => lifted,
    })
}
