use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use iganet::cli::{parse_grid, resolve_model, resolve_train, Cli, Command as Sub, EXIT_CHECK_FAILED, EXIT_USAGE};
use iganet::data::{load_dataset, read_pose_file};
use iganet::model::{Ablation, ModelConfig};
use iganet::training::TrainConfig;
use iganet::SkeletonGraph;

const TINY: &[&str] = &["--channels", "16", "--heads", "4", "--blocks", "1", "--batch", "8", "--epochs", "2"];

fn iganet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iganet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, n: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.join(name);
    let o = iganet(&["synth", "-n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    path
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    iganet(&args)
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let o = iganet(&["train", "--out", "m.ck"]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert!(stderr(&o).contains("--data"));
    assert_eq!(iganet(&["frobnicate"]).status.code(), Some(EXIT_USAGE));
}

#[test]
fn missing_data_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(&dir.path().join("nope.pose"), &dir.path().join("m.ck"), &[]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert!(stderr(&o).contains("nope.pose"));
}

#[test]
fn defaults_follow_the_reference_recipe() {
    let cli = Cli::try_parse_from(["iganet", "train", "--data", "d", "--out", "o"]).unwrap();
    let Sub::Train(c) = cli.command else { panic!() };
    let g = SkeletonGraph::h36m_17();
    assert_eq!(resolve_model(None, &c.model, &g).unwrap(), ModelConfig::default());
    assert_eq!(resolve_train(None, &c.train).unwrap(), TrainConfig::default());
    let m = ModelConfig::default();
    assert_eq!((m.blocks, m.s_g2a, m.s_a2g), (3, 0.5, 0.8));
    let t = TrainConfig::default();
    assert_eq!((t.epochs, t.batch_size, t.lr0, t.lr_decay), (20, 128, 0.001, 0.95));
}

#[test]
fn flags_override_the_config_file() {
    let cli = Cli::try_parse_from([
        "iganet",
        "train",
        "--data",
        "d",
        "--out",
        "o",
        "--channels",
        "32",
        "--no-gcn",
        "--lr",
        "0.01",
    ])
    .unwrap();
    let Sub::Train(c) = cli.command else { panic!() };
    let base = ModelConfig { s_g2a: 0.1, ..ModelConfig::default() };
    let m = resolve_model(Some(base), &c.model, &SkeletonGraph::h36m_17()).unwrap();
    assert_eq!((m.channels, m.bottleneck, m.mlp_hidden, m.s_g2a), (32, 16, 64, 0.1));
    assert!(!m.use_gcn && !m.use_g2a && !m.use_a2g && m.use_umlp);
    let base = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let t = resolve_train(Some(base), &c.train).unwrap();
    assert_eq!((t.epochs, t.lr0), (3, 0.01));
}

#[test]
fn gradcheck_passes_and_a_zero_tolerance_fails() {
    let o = iganet(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("groups, worst relative error"));
    let o = iganet(&["gradcheck", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(EXIT_CHECK_FAILED));
    assert!(stderr(&o).contains("gradient check failed for"));
}

#[test]
fn same_seed_writes_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.pose", 24, 1);
    let (a, b, c) = (dir.path().join("a.ck"), dir.path().join("b.ck"), dir.path().join("c.ck"));
    for out in [&a, &b] {
        let o = train(&data, out, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(train(&data, &c, &["--seed", "1"]).status.success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let log = fs::read_to_string(dir.path().join("a.ck.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn train_eval_and_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.pose", 24, 2);
    let held = synth(dir.path(), "e.pose", 8, 3);
    let ck = dir.path().join("m.ck");
    let o = train(&data, &ck, &["--eval-data", p(&held)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("eval_mpjpe"));

    let (report, csv) = (dir.path().join("r.json"), dir.path().join("r.csv"));
    let o = iganet(&["eval", "--data", p(&held), "--checkpoint", p(&ck), "--report", p(&report), "--csv", p(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("MPJPE "));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(doc["report"]["mpjpe_mm"].as_f64().unwrap() > 0.0);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 8);

    let o = iganet(&["-v", "eval", "--data", p(&held), "--checkpoint", p(&ck)]);
    assert!(stdout(&o).contains("flip-merge off"));

    let pred = dir.path().join("p.pose");
    let o = iganet(&["predict", "--input", p(&held), "--checkpoint", p(&ck), "--out", p(&pred)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, records) = read_pose_file(&pred).unwrap();
    assert_eq!(header.num_joints, 17);
    assert_eq!(records.len(), 8);
    assert!(records.iter().all(|(_, r)| r.output.as_ref().is_some_and(|p| p.len() == 17)));
}

#[test]
fn synth_writes_a_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), "s.pose", 5, 9);
    let loaded = load_dataset(&path, &SkeletonGraph::h36m_17()).unwrap();
    assert_eq!(loaded.dataset.len(), 5);
    assert!(loaded.warnings.is_empty());
}

#[test]
fn ablation_table_has_one_row_per_grid_entry() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.pose", 20, 4);
    let grid = dir.path().join("grid.json");
    let rows = [Ablation::GRID[0], Ablation::GRID[6]];
    fs::write(&grid, serde_json::to_string(&rows).unwrap()).unwrap();
    let out = dir.path().join("t.csv");
    let mut args = vec!["ablate", "--data", p(&data), "--grid", p(&grid), "--out", p(&out)];
    args.extend_from_slice(TINY);
    let o = iganet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1 + rows.len());
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1 + rows.len());
}

#[test]
fn empty_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.pose", 10, 5);
    let grid = dir.path().join("grid.json");
    fs::write(&grid, "[]").unwrap();
    let o = iganet(&["ablate", "--data", p(&data), "--grid", p(&grid), "--out", p(&dir.path().join("t.csv"))]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert!(parse_grid(p(&grid)).is_err());
    assert_eq!(parse_grid("full").unwrap().len(), 7);
}
