use rand::Rng;

use super::{join, maybe_dropout, Dropout, LayerNormParams, Linear, ParamSet};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// U-shaped MLP: a channel bottleneck `C → C_b → C_b → C` with shortcuts
/// around the middle layer and around the whole unit.
#[derive(Clone, Debug, PartialEq)]
pub struct UmlpParams<T> {
    pub norm: LayerNormParams<T>,
    pub down: Linear<T>,
    pub mid: Linear<T>,
    pub up: Linear<T>,
}

impl UmlpParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(channels: usize, bottleneck: usize, rng: &mut R) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= channels {
            return Err(Error::Config(format!("uMLP bottleneck {bottleneck} must be in 1..{channels}")));
        }
        Ok(Self {
            norm: LayerNormParams::init(channels),
            down: Linear::init(channels, bottleneck, true, rng),
            mid: Linear::init(bottleneck, bottleneck, true, rng),
            up: Linear::init(bottleneck, channels, true, rng),
        })
    }
}

impl<T> ParamSet<T> for UmlpParams<T> {
    type Mapped<U> = UmlpParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> UmlpParams<U> {
        UmlpParams {
            norm: self.norm.map_leaves(&join(prefix, "norm"), f),
            down: self.down.map_leaves(&join(prefix, "down"), f),
            mid: self.mid.map_leaves(&join(prefix, "mid"), f),
            up: self.up.map_leaves(&join(prefix, "up"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
        self.mid.visit_mut(&join(prefix, "mid"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}

/// Intermediate values of one uMLP evaluation.
#[derive(Clone, Copy, Debug)]
pub struct UmlpOutput {
    pub down: Var,
    pub mid: Var,
    pub out: Var,
}

/// ```text
/// X_down = GELU(LN(X) · W_down + b_down)
/// X_mid  = GELU(X_down · W_mid + b_mid) + X_down
/// X_up   = X_mid · W_up + b_up + X
/// ```
pub fn umlp_forward(
    tape: &mut Tape,
    x: Var,
    params: &UmlpParams<Var>,
    dropout: Option<&mut Dropout>,
) -> Result<UmlpOutput> {
    let xn = params.norm.forward(tape, x)?;
    let down = params.down.forward(tape, xn)?;
    let down = tape.gelu(down);
    let mid = params.mid.forward(tape, down)?;
    let mid = tape.gelu(mid);
    let mid = tape.add(mid, down)?;
    let up = params.up.forward(tape, mid)?;
    let up = maybe_dropout(tape, up, dropout)?;
    let out = tape.add(up, x)?;
    Ok(UmlpOutput { down, mid, out })
}

/// The conventional transformer MLP (`C → H → C`, `H > C`), used when the
/// uMLP is ablated away.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    pub norm: LayerNormParams<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl MlpParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNormParams::init(channels),
            fc1: Linear::init(channels, hidden, true, rng),
            fc2: Linear::init(hidden, channels, true, rng),
        }
    }
}

impl<T> ParamSet<T> for MlpParams<T> {
    type Mapped<U> = MlpParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> MlpParams<U> {
        MlpParams {
            norm: self.norm.map_leaves(&join(prefix, "norm"), f),
            fc1: self.fc1.map_leaves(&join(prefix, "fc1"), f),
            fc2: self.fc2.map_leaves(&join(prefix, "fc2"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// `X + fc2(GELU(fc1(LN(X))))`
pub fn mlp_forward(tape: &mut Tape, x: Var, params: &MlpParams<Var>, dropout: Option<&mut Dropout>) -> Result<Var> {
    let xn = params.norm.forward(tape, x)?;
    let h = params.fc1.forward(tape, xn)?;
    let h = tape.gelu(h);
    let h = params.fc2.forward(tape, h)?;
    let h = maybe_dropout(tape, h, dropout)?;
    tape.add(x, h)
}
