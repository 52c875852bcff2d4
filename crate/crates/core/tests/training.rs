mod support;

use iganet::data::synth_generate;
use iganet::layers::{Linear, ParamSet};
use iganet::model::checkpoint;
use iganet::training::{
    adam_step, evaluate, loss_and_grads, lr_schedule, pose_loss, train, zero_baseline_mpjpe, OptimState, TrainConfig,
};
use iganet::{Error, ModelConfig, ModelParams, SkeletonGraph, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::NaiveAdam;

fn flat(p: &impl ParamSet<Tensor>) -> Vec<f64> {
    let mut v = Vec::new();
    p.visit("", &mut |_, t| v.extend_from_slice(t.data()));
    v
}

fn random_linear(seed: u64) -> Linear<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Linear {
        weight: Tensor::uniform([3, 4], -1.0, 1.0, &mut rng),
        bias: Some(Tensor::uniform([4], -1.0, 1.0, &mut rng)),
    }
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let mut p = random_linear(1);
    let before = p.clone();
    let mut s = OptimState::new(&p, 1e-3);
    let zeros = vec![Tensor::zeros([3, 4]), Tensor::zeros([4])];
    adam_step(&mut p, &zeros, &mut s).unwrap();
    assert_eq!(p, before);
    assert_eq!(s.t, 1);
}

#[test]
fn first_step_moves_by_the_learning_rate() {
    let mut p = Linear { weight: Tensor::scalar(2.0).reshape([1, 1]).unwrap(), bias: None };
    let mut s = OptimState::new(&p, 1e-3);
    adam_step(&mut p, &[Tensor::ones([1, 1])], &mut s).unwrap();
    let moved = 2.0 - p.weight.data()[0];
    // m̂ = v̂ = 1 at t = 1, so the step is lr / (1 + ε).
    assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{moved}");
}

#[test]
fn adam_matches_straight_line_oracle_bitwise() {
    let mut p = random_linear(2);
    let mut s = OptimState::new(&p, 3e-3);
    let mut flat_p = flat(&p);
    let mut oracle = NaiveAdam::new(flat_p.len());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for step in 0..5 {
        let g = vec![Tensor::uniform([3, 4], -2.0, 2.0, &mut rng), Tensor::uniform([4], -2.0, 2.0, &mut rng)];
        let grads = if step == 1 { vec![Tensor::zeros([3, 4]), Tensor::zeros([4])] } else { g };
        let flat_g: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
        adam_step(&mut p, &grads, &mut s).unwrap();
        oracle.step(&mut flat_p, &flat_g, 3e-3);
        let got = flat(&p);
        assert!(got.iter().zip(&flat_p).all(|(a, b)| a.to_bits() == b.to_bits()), "step {step}");
        let m: Vec<f64> = s.m.iter().flat_map(|t| t.data().to_vec()).collect();
        let v: Vec<f64> = s.v.iter().flat_map(|t| t.data().to_vec()).collect();
        assert_eq!(m, oracle.m);
        assert_eq!(v, oracle.v);
    }
}

#[test]
fn non_finite_gradient_aborts_before_mutation() {
    let mut p = random_linear(4);
    let before = p.clone();
    let mut s = OptimState::new(&p, 1e-3);
    let mut g = Tensor::zeros([3, 4]);
    g.data_mut()[7] = f64::INFINITY;
    match adam_step(&mut p, &[g, Tensor::zeros([4])], &mut s) {
        Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "weight"),
        other => panic!("{other:?}"),
    }
    assert_eq!(p, before);
    assert_eq!(s.t, 0);
    assert!(s.m.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn schedule_follows_the_recipe() {
    let c = TrainConfig::default();
    assert_eq!(lr_schedule(0, &c), 0.001);
    assert!((lr_schedule(1, &c) - 0.00095).abs() < 1e-18);
    // powi precision is unspecified, so compare against a plain product within a few ulp.
    let expect = (0..20).fold(0.001, |lr, _| lr * 0.95);
    assert!((lr_schedule(20, &c) - expect).abs() <= 1e-14 * expect);
}

#[test]
fn loss_is_the_mean_joint_distance() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new([1, 2, 3], vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let t = tape.constant(Tensor::zeros([1, 2, 3]));
    let l = pose_loss(&mut tape, p, t).unwrap();
    assert_eq!(tape.value(l).data(), &[2.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn loss_is_non_negative(v in prop::collection::vec(-1e3f64..1e3, 12)) {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new([2, 2, 3], v).unwrap());
        let t = tape.constant(Tensor::zeros([2, 2, 3]));
        let l = pose_loss(&mut tape, p, t).unwrap();
        prop_assert!(tape.value(l).data()[0] >= 0.0);
    }
}

fn quick_cfg(steps: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        epochs: 1_000_000,
        batch_size: batch,
        flip_prob: 0.0,
        max_steps: Some(steps),
        eval_every: 1_000_000,
        ..TrainConfig::default()
    }
}

#[test]
fn fixed_seed_training_is_bitwise_reproducible() {
    let g = SkeletonGraph::h36m_17();
    let d = synth_generate(24, 5, &g).unwrap();
    let cfg = ModelConfig::probe();
    let tc = TrainConfig { flip_prob: 0.5, ..quick_cfg(12, 8) };
    let a = train(&d, None, &g, &cfg, &tc, None, |_, _| Ok(())).unwrap();
    let b = train(&d, None, &g, &cfg, &tc, None, |_, _| Ok(())).unwrap();
    let bits =
        |o: &iganet::training::TrainOutcome| -> Vec<u64> { o.log.iter().map(|e| e.train_loss.to_bits()).collect() };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(checkpoint::to_bytes(&cfg, &a.last).unwrap(), checkpoint::to_bytes(&cfg, &b.last).unwrap());
    let other = train(&d, None, &g, &cfg, &TrainConfig { seed: 1, ..tc }, None, |_, _| Ok(())).unwrap();
    assert_ne!(other.last, a.last);
}

#[test]
fn multi_threaded_gradients_match_single_threaded_closely() {
    let g = SkeletonGraph::h36m_17();
    let d = synth_generate(16, 6, &g).unwrap();
    let cfg = ModelConfig::probe();
    let one = train(&d, None, &g, &cfg, &quick_cfg(4, 16), None, |_, _| Ok(())).unwrap();
    let two = train(&d, None, &g, &cfg, &TrainConfig { threads: 2, ..quick_cfg(4, 16) }, None, |_, _| Ok(())).unwrap();
    for (a, b) in flat(&one.last).iter().zip(flat(&two.last)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn divergence_is_reported() {
    let g = SkeletonGraph::h36m_17();
    let d = synth_generate(4, 7, &g).unwrap();
    let cfg = ModelConfig::probe();
    let mut p = ModelParams::init(&cfg, 0).unwrap();
    p.head.bias = Some(Tensor::full([3], f64::NAN));
    match train(&d, None, &g, &cfg, &quick_cfg(2, 4), Some(p), |_, _| Ok(())) {
        Err(Error::Divergence { step: 0, .. }) => {}
        other => panic!("{:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn gradients_cover_every_parameter() {
    let g = SkeletonGraph::h36m_17();
    let d = synth_generate(3, 8, &g).unwrap();
    let cfg = ModelConfig::probe();
    let p = ModelParams::init(&cfg, 0).unwrap();
    let (loss, grads) = loss_and_grads(&p, &cfg, &g, &d.samples, None).unwrap();
    assert!(loss > 0.0);
    assert_eq!(grads.len(), p.flatten().len());
    for (gr, t) in grads.iter().zip(p.flatten()) {
        assert_eq!(gr.shape(), t.shape());
    }
}

#[test]
fn best_checkpoint_is_reported_to_the_callback() {
    let g = SkeletonGraph::h36m_17();
    let d = synth_generate(16, 9, &g).unwrap();
    let e = synth_generate(8, 10, &g).unwrap();
    let cfg = ModelConfig::probe();
    let tc = TrainConfig { epochs: 3, batch_size: 8, flip_prob: 0.0, ..TrainConfig::default() };
    let mut saved = Vec::new();
    let out = train(&d, Some(&e), &g, &cfg, &tc, None, |entry, best| {
        assert!(entry.eval_mpjpe.is_some());
        if let Some(b) = best {
            saved.push((entry.eval_mpjpe.unwrap(), b.clone()));
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(out.log.len(), 3);
    let (best_score, best_params) = saved.last().unwrap();
    assert_eq!(*best_params, out.best);
    let min = out.log.iter().filter_map(|l| l.eval_mpjpe).fold(f64::INFINITY, f64::min);
    assert_eq!(*best_score, min);
    assert_eq!(evaluate(&e, &out.best, &cfg, &g, true).unwrap().mpjpe_mm, min);
    assert!(zero_baseline_mpjpe(&e).unwrap() > 0.0);
}

fn small_run(d: &iganet::data::Dataset, tc: &TrainConfig) -> iganet::training::TrainOutcome {
    train(d, None, &SkeletonGraph::h36m_17(), &ModelConfig::small(), tc, None, |_, _| Ok(())).unwrap()
}

#[test]
fn one_sample_is_memorized() {
    let g = SkeletonGraph::h36m_17();
    let d = synth_generate(1, 11, &g).unwrap();
    let tc = TrainConfig { lr0: 3e-3, lr_decay: 0.995, ..quick_cfg(3000, 1) };
    let out = small_run(&d, &tc);
    let r = evaluate(&d, &out.last, &ModelConfig::small(), &g, false).unwrap();
    assert!(r.mpjpe_mm < 1e-3, "{}", r.mpjpe_mm);
}

#[test]
fn one_sample_loss_decreases_monotonically_after_warmup() {
    let g = SkeletonGraph::h36m_17();
    for seed in 0..3 {
        let d = synth_generate(1, 20 + seed, &g).unwrap();
        // One sample per epoch, so the default per-epoch decay acts per step.
        let out = small_run(&d, &TrainConfig { seed, ..quick_cfg(300, 1) });
        let losses: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
        assert!(losses.iter().all(|&l| l >= 0.0));
        for (i, w) in losses.windows(2).enumerate().skip(50) {
            assert!(w[1] <= w[0], "seed {seed} step {i}: {} -> {}", w[0], w[1]);
        }
    }
}
