use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::tensor::Tensor;

/// Adam moments for a flat list of parameter tensors (in visiting order).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    /// Zero moments shaped like `params`, `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn new<P: ParamSet<Tensor>>(params: &P, lr: f64) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(Tensor::zeros(t.shape())));
        Self { v: m.clone(), m, t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update:
///
/// ```text
/// t += 1
/// m = β1·m + (1 − β1)·g
/// v = β2·v + (1 − β2)·g²
/// p -= lr · (m / (1 − β1^t)) / (sqrt(v / (1 − β2^t)) + ε)
/// ```
///
/// Gradients are checked first; a non-finite entry aborts the step before
/// anything is modified.
pub fn adam_step<P: ParamSet<Tensor>>(params: &mut P, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    let mut problem = None;
    let mut i = 0;
    params.visit("", &mut |name, p| {
        if problem.is_none() {
            problem = match grads.get(i) {
                None => Some(Error::Contract(format!("no gradient for `{name}`"))),
                Some(g) if g.shape() != p.shape() => Some(Error::ShapeMismatch {
                    field: name.to_string(),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                }),
                Some(g) if !g.is_finite() => Some(Error::NonFiniteGradient { param: name.to_string() }),
                Some(_) => None,
            };
        }
        i += 1;
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if i != grads.len() || i != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            i,
            grads.len(),
            state.m.len()
        )));
    }

    state.t += 1;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let mut k = 0;
    params.visit_mut("", &mut |_, p| {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((p, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        k += 1;
    });
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
