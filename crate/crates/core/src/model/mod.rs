//! The assembled network: patch embedding, `N` stacked (IGA + uMLP) blocks
//! and the regression head.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Pose2, Pose3};
use crate::error::{Error, Result};
use crate::layers::{
    self, iga_forward, join, mlp_forward, patch_embed, regress_head, umlp_forward, A2gSource, Activation, Dropout,
    EmbedParams, IgaBlockParams, IgaOptions, Linear, MlpParams, ParamSet, UmlpParams,
};
use crate::skeleton::{horizontal_flip, AdjacencyNorm, SkeletonGraph};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
///
/// Defaults: `N = 3` blocks, `s_g2a = 0.5`, `s_a2g = 0.8`, `C = 256`,
/// 8 heads, uMLP bottleneck `C/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_joints: usize,
    pub channels: usize,
    pub heads: usize,
    /// uMLP bottleneck width `C_b < C`.
    pub bottleneck: usize,
    /// Hidden width of the conventional MLP used when `use_umlp` is off.
    pub mlp_hidden: usize,
    pub blocks: usize,
    pub s_g2a: f64,
    pub s_a2g: f64,
    pub adjacency_norm: AdjacencyNorm,
    pub activation: Activation,
    pub a2g_source: A2gSource,
    pub use_gcn: bool,
    /// Ignored when `use_gcn` is off.
    pub use_g2a: bool,
    /// Ignored when `use_gcn` is off.
    pub use_a2g: bool,
    pub use_umlp: bool,
    /// Dropout on residual branches during training.
    pub dropout: f64,
    /// Millimetres per unit of raw network output. The default of 10 makes the
    /// network regress centimetres, which trains markedly faster than metres
    /// with the Xavier-initialized head.
    pub target_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_joints: 17,
            channels: 256,
            heads: 8,
            bottleneck: 128,
            mlp_hidden: 512,
            blocks: 3,
            s_g2a: 0.5,
            s_a2g: 0.8,
            adjacency_norm: AdjacencyNorm::Row,
            activation: Activation::Gelu,
            a2g_source: A2gSource::PostInjection,
            use_gcn: true,
            use_g2a: true,
            use_a2g: true,
            use_umlp: true,
            dropout: 0.0,
            target_scale: 10.0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: `C = 64`, 4 heads, `N = 3`.
    pub fn small() -> Self {
        Self { channels: 64, heads: 4, bottleneck: 32, mlp_hidden: 128, ..Self::default() }
    }

    /// The configuration used by gradient checks: `J = 17`, `C = 16`, `N = 2`.
    pub fn probe() -> Self {
        Self { channels: 16, heads: 4, bottleneck: 8, mlp_hidden: 32, blocks: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.blocks == 0 {
            return fail("at least one block is required".into());
        }
        if self.num_joints == 0 || self.channels == 0 {
            return fail("joint and channel counts must be positive".into());
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!("{} channels are not divisible by {} heads", self.channels, self.heads));
        }
        if self.use_umlp && (self.bottleneck == 0 || self.bottleneck >= self.channels) {
            return fail(format!("uMLP bottleneck {} must be in 1..{}", self.bottleneck, self.channels));
        }
        if !self.use_umlp && self.mlp_hidden == 0 {
            return fail("mlp_hidden must be positive".into());
        }
        if !self.s_g2a.is_finite() || !self.s_a2g.is_finite() {
            return fail("guidance scales must be finite".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.target_scale.is_finite() && self.target_scale > 0.0) {
            return fail("target_scale must be positive".into());
        }
        Ok(())
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.use_gcn = a.gcn;
        self.use_g2a = a.g2a;
        self.use_a2g = a.a2g;
        self.use_umlp = a.umlp;
        self
    }

    pub fn ablation(&self) -> Ablation {
        Ablation { gcn: self.use_gcn, g2a: self.use_g2a, a2g: self.use_a2g, umlp: self.use_umlp }
    }
}

/// One row of the component ablation grid. Attention is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub gcn: bool,
    pub g2a: bool,
    pub a2g: bool,
    pub umlp: bool,
}

impl Ablation {
    /// The seven designs compared in the component study, from the
    /// attention-only baseline to the full model.
    pub const GRID: [Ablation; 7] = [
        Ablation::new(false, false, false, false),
        Ablation::new(true, false, false, false),
        Ablation::new(true, true, false, false),
        Ablation::new(true, false, true, false),
        Ablation::new(true, true, false, true),
        Ablation::new(true, false, true, true),
        Ablation::new(true, true, true, true),
    ];

    pub const fn new(gcn: bool, g2a: bool, a2g: bool, umlp: bool) -> Self {
        Self { gcn, g2a, a2g, umlp }
    }
}

/// Position-wise feed-forward unit following each IGA block.
#[derive(Clone, Debug, PartialEq)]
pub enum FeedForward<T> {
    Umlp(UmlpParams<T>),
    Mlp(MlpParams<T>),
}

impl<T> ParamSet<T> for FeedForward<T> {
    type Mapped<U> = FeedForward<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> FeedForward<U> {
        match self {
            FeedForward::Umlp(p) => FeedForward::Umlp(p.map_leaves(&join(prefix, "umlp"), f)),
            FeedForward::Mlp(p) => FeedForward::Mlp(p.map_leaves(&join(prefix, "mlp"), f)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        match self {
            FeedForward::Umlp(p) => p.visit_mut(&join(prefix, "umlp"), f),
            FeedForward::Mlp(p) => p.visit_mut(&join(prefix, "mlp"), f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub iga: IgaBlockParams<T>,
    pub ffn: FeedForward<T>,
}

impl<T> ParamSet<T> for BlockParams<T> {
    type Mapped<U> = BlockParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BlockParams<U> {
        BlockParams { iga: self.iga.map_leaves(&join(prefix, "iga"), f), ffn: self.ffn.map_leaves(prefix, f) }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.iga.visit_mut(&join(prefix, "iga"), f);
        self.ffn.visit_mut(prefix, f);
    }
}

/// All learnable weights of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub embed: EmbedParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// `[C, 3]` plus bias.
    pub head: Linear<T>,
}

impl<T> ParamSet<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            embed: self.embed.map_leaves(&join(prefix, "embed"), f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_leaves(&join(prefix, &format!("blocks.{i}")), f))
                .collect(),
            head: self.head.map_leaves(&join(prefix, "head"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl ModelParams<Tensor> {
    /// Xavier-uniform weights, zero biases, `N(0, 0.02²)` positional rows.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let embed = EmbedParams::init(config.num_joints, c, &mut rng);
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let iga = IgaBlockParams::init(c, config.heads, config.use_gcn, &mut rng)?;
            let ffn = if config.use_umlp {
                FeedForward::Umlp(UmlpParams::init(c, config.bottleneck, &mut rng)?)
            } else {
                FeedForward::Mlp(MlpParams::init(c, config.mlp_hidden, &mut rng))
            };
            blocks.push(BlockParams { iga, ffn });
        }
        let head = Linear::init(c, 3, true, &mut rng);
        Ok(Self { embed, blocks, head })
    }

    /// Total number of scalar weights actually allocated.
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Leaves in visiting order.
    pub fn flatten(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t.clone()));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _| out.push(n.to_string()));
        out
    }

    /// Checks that the parameter tree has the structure `config` implies.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let expected = ModelParams::init(config, 0)?;
        let mut found = Vec::new();
        self.visit("", &mut |n, t| found.push((n.to_string(), t.shape().to_vec())));
        let mut i = 0;
        let mut result = Ok(());
        expected.visit("", &mut |name, t| {
            if result.is_err() {
                return;
            }
            match found.get(i) {
                Some((n, s)) if n == name && s.as_slice() == t.shape() => {}
                Some((n, s)) if n == name => {
                    result = Err(Error::ShapeMismatch {
                        field: name.to_string(),
                        expected: t.shape().to_vec(),
                        found: s.clone(),
                    })
                }
                _ => result = Err(Error::Config(format!("parameters do not match the configuration at `{name}`"))),
            }
            i += 1;
        });
        result?;
        if i != found.len() {
            return Err(Error::Config("parameters hold more tensors than the configuration implies".into()));
        }
        Ok(())
    }
}

/// Rebuilds a parameter structure over a flat list of tape variables given in
/// visiting order.
pub fn unflatten<P: ParamSet<Tensor>>(template: &P, vars: &[Var]) -> P::Mapped<Var> {
    let mut i = 0;
    template.map_leaves("", &mut |_, _| {
        let v = vars[i];
        i += 1;
        v
    })
}

/// Closed-form parameter count for a configuration. Accepts `blocks = 0`.
pub fn count_params(config: &ModelConfig) -> usize {
    let (j, c, cb, h) = (config.num_joints, config.channels, config.bottleneck, config.mlp_hidden);
    let embed = 2 * c + j * c;
    let head = 3 * c + 3;
    let norm = 2 * c;
    let gcn = if config.use_gcn { 2 * (c * c + c) } else { 0 };
    let attn = 4 * c * c + c;
    let ffn = if config.use_umlp {
        norm + (c * cb + cb) + (cb * cb + cb) + (cb * c + c)
    } else {
        norm + (c * h + h) + (h * c + c)
    };
    embed + head + config.blocks * (norm + gcn + attn + ffn)
}

/// Per-call inputs shared by every block.
pub struct ForwardCtx<'a> {
    pub adjacency: Var,
    pub s_g2a: Var,
    pub s_a2g: Var,
    pub dropout: Option<&'a mut Dropout>,
}

impl ForwardCtx<'_> {
    /// Records the graph adjacency and the configured guidance scales as
    /// constants.
    pub fn new(tape: &mut Tape, config: &ModelConfig, graph: &SkeletonGraph) -> Self {
        let adjacency = if graph.norm() == config.adjacency_norm {
            graph.adjacency().clone()
        } else {
            graph.with_norm(config.adjacency_norm).adjacency().clone()
        };
        Self {
            adjacency: tape.constant(adjacency),
            s_g2a: tape.constant(Tensor::scalar(config.s_g2a)),
            s_a2g: tape.constant(Tensor::scalar(config.s_a2g)),
            dropout: None,
        }
    }
}

/// Full network on `input: [B, J, 2]` (or `[J, 2]`), returning raw outputs of
/// shape `[B, J, 3]`. Multiply by `config.target_scale` for millimetres.
pub fn forward(
    tape: &mut Tape,
    input: Var,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let shape = tape.shape(input);
    if shape.len() < 2 || shape[shape.len() - 2] != config.num_joints || shape[shape.len() - 1] != 2 {
        return Err(Error::dim("forward", shape, &[config.num_joints, 2]));
    }
    if params.blocks.len() != config.blocks {
        return Err(Error::Config(format!(
            "config has {} blocks but parameters hold {}",
            config.blocks,
            params.blocks.len()
        )));
    }
    let mut x = patch_embed(tape, input, &params.embed)?;
    for (i, block) in params.blocks.iter().enumerate() {
        if block.iga.gcn.is_some() != config.use_gcn {
            return Err(Error::Config(format!("block {i}: GCN path does not match use_gcn")));
        }
        let opts = IgaOptions {
            s_g2a: ctx.s_g2a,
            s_a2g: ctx.s_a2g,
            use_g2a: config.use_g2a,
            use_a2g: config.use_a2g,
            a2g_source: config.a2g_source,
            activation: config.activation,
            dropout: ctx.dropout.as_deref_mut(),
        };
        x = iga_forward(tape, x, &block.iga, ctx.adjacency, opts)?;
        x = match (&block.ffn, config.use_umlp) {
            (FeedForward::Umlp(p), true) => umlp_forward(tape, x, p, ctx.dropout.as_deref_mut())?.out,
            (FeedForward::Mlp(p), false) => mlp_forward(tape, x, p, ctx.dropout.as_deref_mut())?,
            _ => return Err(Error::Config(format!("block {i}: feed-forward kind does not match use_umlp"))),
        };
    }
    regress_head(tape, x, &params.head)
}

fn stack_inputs(inputs: &[Pose2], joints: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(inputs.len() * joints * 2);
    for (i, p) in inputs.iter().enumerate() {
        if p.len() != joints {
            return Err(Error::Validation(format!("pose {i} has {} joints, expected {joints}", p.len())));
        }
        data.extend(p.iter().flatten());
    }
    Tensor::new([inputs.len(), joints, 2], data)
}

/// Inference in millimetres on a batch of 2D poses.
///
/// With `flip_merge`, each prediction is the average of the prediction on the
/// pose and the un-flipped prediction on its mirror image.
pub fn predict_mm(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SkeletonGraph,
    inputs: &[Pose2],
    flip_merge: bool,
) -> Result<Vec<Pose3>> {
    const CHUNK: usize = 256;
    let j = config.num_joints;
    if graph.num_joints() != j {
        return Err(Error::ShapeMismatch {
            field: "num_joints".into(),
            expected: vec![j],
            found: vec![graph.num_joints()],
        });
    }
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let direct = raw_predict(params, config, graph, &stack_inputs(chunk, j)?)?;
        let flipped_preds = if flip_merge {
            let mirrored: Vec<Pose2> = chunk.iter().map(|p| horizontal_flip(p, graph)).collect();
            Some(raw_predict(params, config, graph, &stack_inputs(&mirrored, j)?)?)
        } else {
            None
        };
        for b in 0..chunk.len() {
            let pose = to_pose3(&direct, b, j, config.target_scale);
            let pose = match &flipped_preds {
                Some(f) => {
                    let back = horizontal_flip(&to_pose3(f, b, j, config.target_scale), graph);
                    pose.iter()
                        .zip(&back)
                        .map(|(a, c)| [0.5 * (a[0] + c[0]), 0.5 * (a[1] + c[1]), 0.5 * (a[2] + c[2])])
                        .collect()
                }
                None => pose,
            };
            out.push(pose);
        }
    }
    Ok(out)
}

fn raw_predict(params: &ModelParams, config: &ModelConfig, graph: &SkeletonGraph, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = layers::bind_constant(&mut tape, params);
    let x = tape.constant(input.clone());
    let mut ctx = ForwardCtx::new(&mut tape, config, graph);
    let y = forward(&mut tape, x, &vars, config, &mut ctx)?;
    Ok(tape.value(y).clone())
}

fn to_pose3(t: &Tensor, b: usize, joints: usize, scale: f64) -> Pose3 {
    let d = &t.data()[b * joints * 3..(b + 1) * joints * 3];
    d.chunks(3).map(|c| [c[0] * scale, c[1] * scale, c[2] * scale]).collect()
}
