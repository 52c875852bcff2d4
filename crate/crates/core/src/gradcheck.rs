//! Central finite-difference checks of every tape-differentiated operation,
//! every layer and the end-to-end model.
//!
//! The error of a parameter group is normwise:
//! `max|analytic − numeric| / max(max|analytic|, max|numeric|)`.
//! Layer outputs that are not scalar are reduced with a fixed random
//! projection `Σ out ⊙ R`, which exercises the full Jacobian.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{
    a2g_inject, attention_g2a, gcn_forward, iga_forward, mlp_forward, multi_head_attention, patch_embed, regress_head,
    umlp_forward, Activation, AttentionParams, EmbedParams, GcnLayerParams, IgaBlockParams, IgaOptions,
    LayerNormParams, Linear, MlpParams, ParamSet, UmlpParams,
};
use crate::model::{forward, unflatten, ForwardCtx, ModelConfig, ModelParams};
use crate::skeleton::SkeletonGraph;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::pose_loss;

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-4;

type BuildFn<'a, P> = dyn Fn(&mut Tape, &[Var], &<P as ParamSet<Tensor>>::Mapped<Var>) -> Result<Var> + 'a;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_error: f64,
    pub numel: usize,
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Compares the tape gradient of the scalar `build(inputs)` against central
/// differences with step `eps`, one report per input tensor.
pub fn check_gradients(names: &[String], inputs: &[Tensor], eps: f64, build: &Build<'_>) -> Result<Vec<GroupReport>> {
    if names.len() != inputs.len() {
        return Err(Error::Contract("one name per input is required".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> =
        vars.iter().map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))).collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };
    let mut work = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, name) in names.iter().enumerate() {
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        for k in 0..inputs[i].numel() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        reports.push(GroupReport {
            group: name.clone(),
            max_rel_error: relative_error(analytic[i].data(), &numeric),
            numel: numeric.len(),
        });
    }
    Ok(reports)
}

/// `Σ out ⊙ R` with `R` uniform in `[-1, 1]` drawn from `seed`.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::uniform(tape.shape(out).to_vec(), -1.0, 1.0, &mut rng);
    let r = tape.constant(r);
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

fn named<P: ParamSet<Tensor>>(prefix: &str, p: &P) -> (Vec<String>, Vec<Tensor>) {
    let (mut names, mut tensors) = (Vec::new(), Vec::new());
    p.visit(prefix, &mut |n, t| {
        names.push(n.to_string());
        tensors.push(t.clone());
    });
    (names, tensors)
}

struct Suite {
    eps: f64,
    seed: u64,
    reports: Vec<GroupReport>,
}

impl Suite {
    fn run(&mut self, op: &str, names: &[&str], inputs: Vec<Tensor>, build: &Build<'_>) -> Result<()> {
        let names: Vec<String> = names.iter().map(|n| format!("{op}/{n}")).collect();
        self.reports.extend(check_gradients(&names, &inputs, self.eps, build)?);
        Ok(())
    }

    /// Checks a parameter container plus extra leading inputs.
    fn run_params<P: ParamSet<Tensor>>(
        &mut self,
        op: &str,
        extra_names: &[&str],
        extra: Vec<Tensor>,
        params: &P,
        build: &BuildFn<'_, P>,
    ) -> Result<()> {
        let (pnames, ptensors) = named("", params);
        let mut names: Vec<String> = extra_names.iter().map(|n| format!("{op}/{n}")).collect();
        names.extend(pnames.iter().map(|n| format!("{op}/{n}")));
        let k = extra.len();
        let mut inputs = extra;
        inputs.extend(ptensors);
        let reports = check_gradients(&names, &inputs, self.eps, &|tape, vars| {
            let p = unflatten(params, &vars[k..]);
            build(tape, &vars[..k], &p)
        })?;
        self.reports.extend(reports);
        Ok(())
    }

    fn next_seed(&mut self) -> u64 {
        self.seed = self.seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.seed
    }
}

/// Every primitive and layer, sized by `config`.
pub fn layer_suite(config: &ModelConfig, graph: &SkeletonGraph, seed: u64, eps: f64) -> Result<Vec<GroupReport>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (j, c, h) = (graph.num_joints(), config.channels, config.heads);
    let mut s = Suite { eps, seed, reports: Vec::new() };
    let u = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng);
    let adj = graph.with_norm(config.adjacency_norm).adjacency().clone();

    let ps = s.next_seed();
    s.run("matmul", &["a", "b"], vec![u(&[2, 3, 4], &mut rng), u(&[4, 5], &mut rng)], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, ps)
    })?;
    let ps = s.next_seed();
    s.run("batched_matmul", &["a", "b"], vec![u(&[2, 3, 4], &mut rng), u(&[2, 4, 5], &mut rng)], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, ps)
    })?;
    let ps = s.next_seed();
    s.run("transpose", &["x"], vec![u(&[2, 3, 4], &mut rng)], &|t, v| {
        let y = t.transpose_last2(v[0])?;
        project(t, y, ps)
    })?;
    let ps = s.next_seed();
    s.run("softmax", &["x"], vec![u(&[3, 5], &mut rng).map(|x| 3.0 * x)], &|t, v| {
        let y = t.softmax_lastdim(v[0])?;
        project(t, y, ps)
    })?;
    let ps = s.next_seed();
    s.run("gelu", &["x"], vec![u(&[4, 5], &mut rng).map(|x| 3.0 * x)], &|t, v| {
        let y = t.gelu(v[0]);
        project(t, y, ps)
    })?;
    // Keep ReLU inputs away from the kink at zero.
    let ps = s.next_seed();
    let relu_in = u(&[4, 5], &mut rng).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 });
    s.run("relu", &["x"], vec![relu_in], &|t, v| {
        let y = t.relu(v[0]);
        project(t, y, ps)
    })?;
    let ps = s.next_seed();
    s.run(
        "layer_norm",
        &["x", "gamma", "beta"],
        vec![u(&[j, c], &mut rng), u(&[c], &mut rng), u(&[c], &mut rng)],
        &|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            project(t, y, ps)
        },
    )?;
    let ps = s.next_seed();
    s.run(
        "linear",
        &["x", "weight", "bias"],
        vec![u(&[2, j, c], &mut rng), u(&[c, 3], &mut rng), u(&[3], &mut rng)],
        &|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, ps)
        },
    )?;
    let ps = s.next_seed();
    s.run("add_trailing", &["x", "y"], vec![u(&[2, j, 3], &mut rng), u(&[j, 3], &mut rng)], &|t, v| {
        let y = t.add_trailing(v[0], v[1])?;
        project(t, y, ps)
    })?;
    let ps = s.next_seed();
    s.run("scale_by", &["x", "s"], vec![u(&[j, 3], &mut rng), u(&[1], &mut rng)], &|t, v| {
        let y = t.scale_by(v[0], v[1])?;
        project(t, y, ps)
    })?;
    let ps = s.next_seed();
    s.run("heads", &["x"], vec![u(&[2, j, c], &mut rng)], &|t, v| {
        let y = t.split_heads(v[0], h)?;
        let y = t.scale(y, 2.0);
        let y = t.merge_heads(y)?;
        project(t, y, ps)
    })?;
    let ps = s.next_seed();
    let positive = u(&[j, 3], &mut rng).map(|x| x + 1.5);
    s.run("sum_sqrt", &["x"], vec![positive], &|t, v| {
        let y = t.sum_lastdim(v[0])?;
        let y = t.sqrt(y)?;
        project(t, y, ps)
    })?;
    s.run("mean", &["x"], vec![u(&[j, 3], &mut rng)], &|t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.mean(y))
    })?;

    let ps = s.next_seed();
    let gcn = GcnLayerParams::init(c, c, &mut rng);
    for act in [Activation::Gelu, Activation::Relu] {
        let name = match act {
            Activation::Gelu => "gcn",
            Activation::Relu => "gcn_relu",
        };
        // ReLU is checked on a small input scale with the bias pushed away
        // from the kink.
        let mut p = gcn.clone();
        if act == Activation::Relu {
            p.bias = Tensor::from_fn([c], |i| if i % 2 == 0 { 0.5 } else { -0.5 });
        }
        let x = u(&[j, c], &mut rng).map(|x| if act == Activation::Relu { 0.05 * x } else { x });
        s.run_params(name, &["x"], vec![x], &p, &|t, v, p| {
            let a = t.constant(adj.clone());
            let y = gcn_forward(t, v[0], p, a, Some(act))?;
            project(t, y, ps)
        })?;
    }

    let ps = s.next_seed();
    let attn = AttentionParams::init(c, h, &mut rng)?;
    s.run_params("attention", &["x"], vec![u(&[2, j, c], &mut rng)], &attn, &|t, v, p| {
        let y = multi_head_attention(t, v[0], p)?;
        project(t, y, ps)
    })?;
    let ps = s.next_seed();
    s.run_params(
        "attention_g2a",
        &["x", "f_graph", "s_g2a"],
        vec![u(&[j, c], &mut rng), u(&[j, c], &mut rng), Tensor::scalar(config.s_g2a)],
        &attn,
        &|t, v, p| {
            let y = attention_g2a(t, v[0], v[1], p, v[2])?;
            project(t, y, ps)
        },
    )?;
    let ps = s.next_seed();
    s.run(
        "a2g",
        &["g1", "f_global", "s_a2g"],
        vec![u(&[j, c], &mut rng), u(&[j, c], &mut rng), Tensor::scalar(config.s_a2g)],
        &|t, v| {
            let y = a2g_inject(t, v[0], v[1], v[2])?;
            project(t, y, ps)
        },
    )?;

    let mut iga = IgaBlockParams::init(c, h, true, &mut rng)?;
    iga.norm =
        LayerNormParams { gamma: u(&[c], &mut rng).map(|x| 1.0 + 0.5 * x), beta: u(&[c], &mut rng).map(|x| 0.1 * x) };
    for source in [crate::layers::A2gSource::PostInjection, crate::layers::A2gSource::PreInjection] {
        let ps = s.next_seed();
        let name = match source {
            crate::layers::A2gSource::PostInjection => "iga",
            crate::layers::A2gSource::PreInjection => "iga_pre_injection",
        };
        s.run_params(
            name,
            &["x", "s_g2a", "s_a2g"],
            vec![u(&[2, j, c], &mut rng), Tensor::scalar(config.s_g2a), Tensor::scalar(config.s_a2g)],
            &iga,
            &|t, v, p| {
                let a = t.constant(adj.clone());
                let opts = IgaOptions {
                    s_g2a: v[1],
                    s_a2g: v[2],
                    use_g2a: true,
                    use_a2g: true,
                    a2g_source: source,
                    activation: Activation::Gelu,
                    dropout: None,
                };
                let y = iga_forward(t, v[0], p, a, opts)?;
                project(t, y, ps)
            },
        )?;
    }

    let ps = s.next_seed();
    let cb = if (1..c).contains(&config.bottleneck) { config.bottleneck } else { (c / 2).max(1) };
    let umlp = UmlpParams::init(c, cb, &mut rng)?;
    s.run_params("umlp", &["x"], vec![u(&[2, j, c], &mut rng)], &umlp, &|t, v, p| {
        let y = umlp_forward(t, v[0], p, None)?.out;
        project(t, y, ps)
    })?;
    let ps = s.next_seed();
    let mlp = MlpParams::init(c, config.mlp_hidden, &mut rng);
    s.run_params("mlp", &["x"], vec![u(&[2, j, c], &mut rng)], &mlp, &|t, v, p| {
        let y = mlp_forward(t, v[0], p, None)?;
        project(t, y, ps)
    })?;
    let ps = s.next_seed();
    let embed = EmbedParams::init(j, c, &mut rng);
    s.run_params("embed", &["pose2d"], vec![u(&[2, j, 2], &mut rng)], &embed, &|t, v, p| {
        let y = patch_embed(t, v[0], p)?;
        project(t, y, ps)
    })?;
    let ps = s.next_seed();
    let mut head = Linear::init(c, 3, true, &mut rng);
    head.bias = Some(u(&[3], &mut rng));
    s.run_params("head", &["x"], vec![u(&[2, j, c], &mut rng)], &head, &|t, v, p| {
        let y = regress_head(t, v[0], p)?;
        project(t, y, ps)
    })?;
    let target = u(&[2, j, 3], &mut rng);
    s.run("loss", &["pred"], vec![u(&[2, j, 3], &mut rng)], &|t, v| {
        let y = t.constant(target.clone());
        pose_loss(t, v[0], y)
    })?;
    Ok(s.reports)
}

/// End-to-end check of the pose loss with respect to every model parameter
/// and both guidance scales.
pub fn model_suite(config: &ModelConfig, graph: &SkeletonGraph, seed: u64, eps: f64) -> Result<Vec<GroupReport>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let mut params = ModelParams::init(config, seed)?;
    // Move LayerNorm affine parameters and biases off their trivial
    // initial values so every path carries signal.
    params.visit_mut("", &mut |name, t| {
        if name.ends_with("gamma") {
            *t = Tensor::uniform(t.shape().to_vec(), 0.5, 1.5, &mut rng);
        } else if name.ends_with("beta") || name.ends_with("bias") {
            *t = Tensor::uniform(t.shape().to_vec(), -0.1, 0.1, &mut rng);
        }
    });
    let j = config.num_joints;
    let input = Tensor::uniform([2, j, 2], -1.0, 1.0, &mut rng);
    let target = Tensor::uniform([2, j, 3], -1.0, 1.0, &mut rng);
    let (mut names, mut tensors) = named("model", &params);
    names.push("model/s_g2a".into());
    names.push("model/s_a2g".into());
    for n in names.iter_mut().take(tensors.len()) {
        *n = n.replacen("model.", "model/", 1);
    }
    tensors.push(Tensor::scalar(config.s_g2a));
    tensors.push(Tensor::scalar(config.s_a2g));
    let k = tensors.len() - 2;
    check_gradients(&names, &tensors, eps, &|t, v| {
        let p = unflatten(&params, &v[..k]);
        let mut ctx = ForwardCtx::new(t, config, graph);
        ctx.s_g2a = v[k];
        ctx.s_a2g = v[k + 1];
        let x = t.constant(input.clone());
        let y = t.constant(target.clone());
        let pred = forward(t, x, &p, config, &mut ctx)?;
        pose_loss(t, pred, y)
    })
}

/// Layer suite followed by the end-to-end model check.
pub fn full_suite(config: &ModelConfig, graph: &SkeletonGraph, seed: u64, eps: f64) -> Result<Vec<GroupReport>> {
    if graph.num_joints() != config.num_joints {
        return Err(Error::ShapeMismatch {
            field: "num_joints".into(),
            expected: vec![graph.num_joints()],
            found: vec![config.num_joints],
        });
    }
    let mut reports = layer_suite(config, graph, seed, eps)?;
    reports.extend(model_suite(config, graph, seed, eps)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_normwise() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[2.0, 1e-9], &[2.0, 0.0]), 0.5e-9);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
