mod support;

use iganet::layers::{bind, bind_constant, patch_embed, regress_head, ParamSet};
use iganet::model::{checkpoint, count_params, forward, predict_mm, Ablation, ForwardCtx, ModelConfig, ModelParams};
use iganet::skeleton::H36M_JOINTS;
use iganet::{Error, SkeletonGraph, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(params: &ModelParams, cfg: &ModelConfig, graph: &SkeletonGraph, input: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let pv = bind_constant(&mut tape, params);
    let xv = tape.constant(input.clone());
    let mut ctx = ForwardCtx::new(&mut tape, cfg, graph);
    let y = forward(&mut tape, xv, &pv, cfg, &mut ctx).unwrap();
    tape.value(y).clone()
}

fn randomize_all(p: &mut ModelParams, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |_, t| *t = Tensor::uniform(t.shape(), -0.3, 0.3, rng));
}

#[test]
fn output_shape_is_joints_by_three() {
    let cfg = ModelConfig::probe();
    let g = SkeletonGraph::h36m_17();
    let p = ModelParams::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = run(&p, &cfg, &g, &Tensor::uniform([4, 17, 2], -1.0, 1.0, &mut rng));
    assert_eq!(y.shape(), &[4, 17, 3]);
    let y = run(&p, &cfg, &g, &Tensor::uniform([17, 2], -1.0, 1.0, &mut rng));
    assert_eq!(y.shape(), &[17, 3]);
}

#[test]
fn all_zero_model_outputs_head_bias() {
    let cfg = ModelConfig::probe();
    let g = SkeletonGraph::h36m_17();
    let mut p = ModelParams::init(&cfg, 1).unwrap();
    p.visit_mut("", &mut |_, t| *t = Tensor::zeros(t.shape()));
    let bias = [0.25, -1.5, 3.0];
    p.head.bias = Some(Tensor::new([3], bias.to_vec()).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = run(&p, &cfg, &g, &Tensor::uniform([3, 17, 2], -1.0, 1.0, &mut rng));
    assert!(y.data().chunks(3).all(|r| r == bias));
}

#[test]
fn zero_blocks_reduce_to_embed_then_head() {
    let g = SkeletonGraph::h36m_17();
    for a in Ablation::GRID {
        let cfg = ModelConfig::probe().with_ablation(a);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ModelParams::init(&cfg, 2).unwrap();
        randomize_all(&mut p, &mut rng);
        for b in &mut p.blocks {
            b.visit_mut("", &mut |_, t| *t = Tensor::zeros(t.shape()));
        }
        let x = Tensor::uniform([2, 17, 2], -1.0, 1.0, &mut rng);
        let y = run(&p, &cfg, &g, &x);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let ev = bind(&mut tape, &p.embed);
        let hv = bind(&mut tape, &p.head);
        let e = patch_embed(&mut tape, xv, &ev).unwrap();
        let direct = regress_head(&mut tape, e, &hv).unwrap();
        assert_eq!(&y, tape.value(direct), "{a:?}");
    }
}

/// Moves old joint `i` to index `perm[i]` in a `[J, D]` row-major tensor.
fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.shape()[t.rank() - 1];
    let j = perm.len();
    let lead = t.numel() / (j * d);
    let mut out = vec![0.0; t.numel()];
    for b in 0..lead {
        for (i, &p) in perm.iter().enumerate() {
            let src = (b * j + i) * d;
            let dst = (b * j + p) * d;
            out[dst..dst + d].copy_from_slice(&t.data()[src..src + d]);
        }
    }
    Tensor::new(t.shape(), out).unwrap()
}

fn equivariance_error(perm: &[usize], seed: u64, cfg: &ModelConfig) -> f64 {
    let g = SkeletonGraph::h36m_17();
    let gp = g.permuted(perm).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(cfg, seed).unwrap();
    randomize_all(&mut p, &mut rng);
    let mut pp = p.clone();
    pp.embed.pos = permute_rows(&p.embed.pos, perm);
    let x = Tensor::uniform([2, 17, 2], -1.0, 1.0, &mut rng);
    let y = run(&p, cfg, &g, &x);
    let yp = run(&pp, cfg, &gp, &permute_rows(&x, perm));
    permute_rows(&y, perm).max_abs_diff(&yp).unwrap()
}

#[test]
fn swapping_two_non_flip_joints_swaps_output_rows() {
    let a = H36M_JOINTS.iter().position(|&n| n == "spine").unwrap();
    let b = H36M_JOINTS.iter().position(|&n| n == "head").unwrap();
    let mut perm: Vec<usize> = (0..17).collect();
    perm.swap(a, b);
    for cfg in [ModelConfig::probe(), ModelConfig::probe().with_ablation(Ablation::GRID[0])] {
        assert!(equivariance_error(&perm, 3, &cfg) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..17).collect();
        for i in (1..17).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        prop_assert!(equivariance_error(&perm, seed, &ModelConfig::probe()) < 1e-12);
    }
}

#[test]
fn parameter_count_matches_allocation() {
    for base in [ModelConfig::default(), ModelConfig::small(), ModelConfig::probe()] {
        for a in Ablation::GRID {
            let cfg = base.clone().with_ablation(a);
            assert_eq!(count_params(&cfg), ModelParams::init(&cfg, 0).unwrap().num_params());
        }
    }
    let one = ModelConfig { blocks: 1, ..ModelConfig::default() };
    let two = ModelConfig { blocks: 2, ..ModelConfig::default() };
    let four = ModelConfig { blocks: 4, ..ModelConfig::default() };
    let per_block = count_params(&two) - count_params(&one);
    assert_eq!(count_params(&four) - count_params(&two), 2 * per_block);
    let base = count_params(&one) - per_block;
    let c = one.channels;
    assert_eq!(base, 2 * c + 17 * c + 3 * c + 3);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = ModelConfig::probe();
    let g = SkeletonGraph::h36m_17();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = ModelParams::init(&cfg, 4).unwrap();
    randomize_all(&mut p, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    checkpoint::save(&path, &cfg, &p).unwrap();
    let (cfg2, p2) = checkpoint::load(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(p2, p);
    let x = Tensor::uniform([3, 17, 2], -1.0, 1.0, &mut rng);
    let (a, b) = (run(&p, &cfg, &g, &x), run(&p2, &cfg2, &g, &x));
    assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    let bytes = checkpoint::to_bytes(&cfg, &p).unwrap();
    assert_eq!(&bytes[..8], checkpoint::MAGIC);
    assert_eq!(checkpoint::to_bytes(&cfg2, &p2).unwrap(), bytes);
}

#[test]
fn checkpoint_for_another_joint_count_is_rejected() {
    let cfg = ModelConfig { num_joints: 16, ..ModelConfig::probe() };
    let p = ModelParams::init(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    checkpoint::save(&path, &cfg, &p).unwrap();
    match checkpoint::load_for_graph(&path, &SkeletonGraph::h36m_17()) {
        Err(Error::ShapeMismatch { field, .. }) => assert_eq!(field, "num_joints"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn tampered_array_shape_names_the_parameter() {
    let cfg = ModelConfig::probe();
    let p = ModelParams::init(&cfg, 0).unwrap();
    let mut wrong = p.clone();
    wrong.head.weight = Tensor::zeros([cfg.channels + 1, 3]);
    let bytes = checkpoint::to_bytes(&cfg, &wrong);
    let err = match bytes {
        Err(e) => e,
        Ok(b) => checkpoint::from_bytes(&b).unwrap_err(),
    };
    match err {
        Error::ShapeMismatch { field, .. } => assert_eq!(field, "head.weight"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn future_version_is_rejected() {
    let cfg = ModelConfig::probe();
    let p = ModelParams::init(&cfg, 0).unwrap();
    let mut bytes = checkpoint::to_bytes(&cfg, &p).unwrap();
    bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(checkpoint::from_bytes(&bytes), Err(Error::Version { found: 2, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn truncated_checkpoint_is_corrupt(cut in 0.0f64..1.0) {
        let cfg = ModelConfig::probe();
        let p = ModelParams::init(&cfg, 0).unwrap();
        let bytes = checkpoint::to_bytes(&cfg, &p).unwrap();
        let n = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(n < bytes.len());
        let r = checkpoint::from_bytes(&bytes[..n]);
        prop_assert!(matches!(r, Err(Error::Corrupt(_))), "{:?}", r.err());
    }
}

#[test]
fn trailing_bytes_are_corrupt() {
    let cfg = ModelConfig::probe();
    let p = ModelParams::init(&cfg, 0).unwrap();
    let mut bytes = checkpoint::to_bytes(&cfg, &p).unwrap();
    bytes.push(0);
    assert!(matches!(checkpoint::from_bytes(&bytes), Err(Error::Corrupt(_))));
}

#[test]
fn predict_is_deterministic_and_checks_joint_count() {
    let cfg = ModelConfig::probe();
    let g = SkeletonGraph::h36m_17();
    let p = ModelParams::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs: Vec<Vec<[f64; 2]>> =
        (0..3).map(|_| (0..17).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()).collect();
    let plain = predict_mm(&p, &cfg, &g, &inputs, false).unwrap();
    let merged = predict_mm(&p, &cfg, &g, &inputs, true).unwrap();
    let again = predict_mm(&p, &cfg, &g, &inputs, true).unwrap();
    assert_eq!(merged, again);
    assert_eq!(plain.len(), merged.len());
    assert!(predict_mm(&p, &cfg, &g, &[vec![[0.0; 2]; 16]], false).is_err());
}
