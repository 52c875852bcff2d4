//! Optimizer, schedule, training loop and evaluation.
//!
//! The loss is the mean per-joint Euclidean distance between prediction and
//! target, computed in model units (millimetres divided by
//! [`ModelConfig::target_scale`]). Logged losses are converted back to mm.

mod adam;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_flip, batch_tensors, Dataset, PoseSample};
use crate::error::{Error, Result};
use crate::layers::{bind, Dropout, ParamSet};
use crate::metrics::EvalReport;
use crate::model::{forward, predict_mm, ForwardCtx, ModelConfig, ModelParams};
use crate::skeleton::SkeletonGraph;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use adam::{adam_step, clip_global_norm, OptimState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    /// Probability of flipping each training sample.
    pub flip_prob: f64,
    /// Average with the mirrored prediction at evaluation time.
    pub flip_merge_eval: bool,
    /// Global gradient-norm bound; off when `None`.
    pub clip_norm: Option<f64>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Worker threads for data-parallel gradients. Results with more than one
    /// thread are deterministic for a fixed thread count but not bitwise equal
    /// to single-threaded runs.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            lr0: 0.001,
            lr_decay: 0.95,
            seed: 0,
            eval_every: 1,
            flip_prob: 0.5,
            flip_merge_eval: true,
            clip_norm: None,
            max_steps: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.threads == 0 {
            return fail("epochs, batch_size, eval_every and threads must be positive");
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return fail("lr0 must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail("flip_prob must be in [0, 1]");
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return fail("clip_norm must be positive");
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be positive");
        }
        Ok(())
    }
}

/// `lr0 · decay^epoch`
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch as i32)
}

/// Mean per-joint Euclidean distance between two `[..., J, 3]` tensors.
pub fn pose_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let dist2 = tape.sum_lastdim(sq)?;
    let dist = tape.sqrt(dist2)?;
    Ok(tape.mean(dist))
}

/// Loss (model units) and per-tensor gradients for one batch.
pub fn loss_and_grads(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SkeletonGraph,
    samples: &[PoseSample],
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let (x, y) = batch_tensors(samples, config.target_scale)?;
    let x = tape.constant(x);
    let y = tape.constant(y);
    let mut dropout = dropout_seed
        .filter(|_| config.dropout > 0.0)
        .map(|s| Dropout { rate: config.dropout, rng: ChaCha8Rng::seed_from_u64(s) });
    let mut ctx = ForwardCtx::new(&mut tape, config, graph);
    ctx.dropout = dropout.as_mut();
    let pred = forward(&mut tape, x, &vars, config, &mut ctx)?;
    let loss = pose_loss(&mut tape, pred, y)?;
    tape.backward(loss)?;
    let mut grads = Vec::new();
    vars.visit("", &mut |_, v| {
        grads.push(tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*v))));
    });
    Ok((tape.value(loss).data()[0], grads))
}

fn parallel_loss_and_grads(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SkeletonGraph,
    samples: &[PoseSample],
    threads: usize,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Tensor>)> {
    if threads <= 1 || samples.len() < 2 {
        return loss_and_grads(params, config, graph, samples, dropout_seed);
    }
    let shard = samples.len().div_ceil(threads);
    let results: Vec<Result<(usize, f64, Vec<Tensor>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(shard)
            .enumerate()
            .map(|(i, chunk)| {
                let seed = dropout_seed.map(|d| d.wrapping_add(i as u64));
                s.spawn(move || loss_and_grads(params, config, graph, chunk, seed).map(|(l, g)| (chunk.len(), l, g)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let total = samples.len() as f64;
    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for r in results {
        let (n, l, g) = r?;
        let w = n as f64 / total;
        loss += w * l;
        match &mut grads {
            None => {
                grads = Some(g.into_iter().map(|t| t.map(|v| v * w)).collect());
            }
            Some(acc) => {
                for (a, t) in acc.iter_mut().zip(g) {
                    a.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += w * b);
                }
            }
        }
    }
    Ok((loss, grads.unwrap_or_default()))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss over the epoch, in mm.
    pub train_loss: f64,
    /// `None` on epochs without evaluation.
    pub eval_mpjpe: Option<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest evaluation MPJPE (or train loss when no
    /// evaluation set is given).
    pub best: ModelParams,
    pub last: ModelParams,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

/// Trains from `init` (or a fresh seeded initialization).
///
/// `on_epoch` sees every log entry, together with the parameters whenever they
/// are the best so far; saving those gives a checkpoint that survives a later
/// divergence. A non-finite loss aborts with [`Error::Divergence`].
#[allow(clippy::too_many_arguments)]
pub fn train(
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    graph: &SkeletonGraph,
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    init: Option<ModelParams>,
    mut on_epoch: impl FnMut(&EpochLog, Option<&ModelParams>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    train_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    train_set.check_graph(graph)?;
    if let Some(e) = eval_set {
        e.check_graph(graph)?;
    }
    let mut params = match init {
        Some(p) => {
            p.check_against(config)?;
            p
        }
        None => ModelParams::init(config, train_cfg.seed)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x5eed_da7a);
    let mut state = OptimState::new(&params, train_cfg.lr0);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut steps = 0;

    'epochs: for epoch in 0..train_cfg.epochs {
        state.lr = lr_schedule(epoch, train_cfg);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let mut stop = false;
        for idx in order.chunks(train_cfg.batch_size) {
            if train_cfg.max_steps.is_some_and(|m| steps >= m) {
                stop = true;
                break;
            }
            let batch: Vec<PoseSample> = idx.iter().map(|&i| train_set.samples[i].clone()).collect();
            let batch = augment_flip(&batch, graph, train_cfg.flip_prob, &mut rng)?;
            let dropout_seed = (config.dropout > 0.0).then(|| rng.random::<u64>());
            let (loss, mut grads) =
                parallel_loss_and_grads(&params, config, graph, &batch, train_cfg.threads, dropout_seed)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step: steps, loss });
            }
            if let Some(c) = train_cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut params, &grads, &mut state)?;
            steps += 1;
            loss_sum += loss * config.target_scale;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let last_epoch = stop || epoch + 1 == train_cfg.epochs || train_cfg.max_steps.is_some_and(|m| steps >= m);
        let eval_mpjpe = match eval_set {
            Some(e) if !e.is_empty() && (last_epoch || (epoch + 1) % train_cfg.eval_every == 0) => {
                Some(evaluate(e, &params, config, graph, train_cfg.flip_merge_eval)?.mpjpe_mm)
            }
            _ => None,
        };
        let entry = EpochLog { epoch, lr: state.lr, train_loss: loss_sum / batches as f64, eval_mpjpe, steps };
        let score = match (eval_set, eval_mpjpe) {
            (Some(_), Some(m)) => Some(m),
            (Some(_), None) => None,
            (None, _) => Some(entry.train_loss),
        };
        let improved = score.is_some_and(|s| best.as_ref().is_none_or(|(b, _)| s < *b));
        if improved {
            best = Some((score.unwrap(), params.clone()));
        }
        log::info!(
            "epoch {epoch} lr {:.6} train_loss {:.4} mm eval_mpjpe {:?}",
            entry.lr,
            entry.train_loss,
            entry.eval_mpjpe
        );
        on_epoch(&entry, improved.then(|| &best.as_ref().unwrap().1))?;
        log.push(entry);
        if last_epoch {
            break 'epochs;
        }
    }
    let best = best.map_or_else(|| params.clone(), |(_, p)| p);
    Ok(TrainOutcome { best, last: params, log, steps })
}

/// Predicts every sample of `dataset` and scores it. Per-action results are
/// included when every sample carries an action label.
pub fn evaluate(
    dataset: &Dataset,
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SkeletonGraph,
    flip_merge: bool,
) -> Result<EvalReport> {
    dataset.check_graph(graph)?;
    let pred = predict_mm(params, config, graph, &dataset.inputs(), flip_merge)?;
    let labels: Option<Vec<String>> = dataset.samples.iter().map(|s| s.action.clone()).collect();
    EvalReport::compute(&pred, &dataset.targets(), labels.as_deref().filter(|l| !l.is_empty()))
}

/// MPJPE of predicting the root-relative zero pose for every sample.
pub fn zero_baseline_mpjpe(dataset: &Dataset) -> Result<f64> {
    let zeros: Vec<_> = dataset.samples.iter().map(|s| vec![[0.0; 3]; s.target3d.len()]).collect();
    crate::metrics::mpjpe(&zeros, &dataset.targets())
}
