//! Command-line interface.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or input error, 3 training
//! divergence.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::data::{
    load_dataset, read_pose_file, save_dataset, synth_generate, write_pose_file, Dataset, PoseFileHeader, PoseRecord,
};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::layers::{A2gSource, Activation};
use crate::metrics::{ActionTable, AverageMode};
use crate::model::{checkpoint, count_params, predict_mm, Ablation, ModelConfig};
use crate::skeleton::{AdjacencyNorm, SkeletonGraph};
use crate::training::{evaluate, train, EpochLog, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "iganet",
    version,
    about = "2D-to-3D human pose lifting with interleaved graph convolution and attention"
)]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write the best checkpoint plus a JSON-lines log.
    Train(TrainCmd),
    /// Score a checkpoint on a labelled pose file.
    Eval(EvalCmd),
    /// Lift the 2D poses of a pose file to 3D.
    Predict(PredictCmd),
    /// Finite-difference gradient checks of every layer and the full model.
    Gradcheck(GradcheckCmd),
    /// Train one model per component combination and tabulate MPJPE.
    Ablate(AblateCmd),
    /// Write a synthetic pose file.
    Synth(SynthCmd),
}

/// Architecture flags. Unset flags fall back to `--config`, then to the
/// built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Joint graph as JSON (default: 17-joint Human3.6M skeleton).
    #[arg(long, value_name = "PATH")]
    pub graph: Option<PathBuf>,
    /// Start from the desk-scale preset (C=64, 4 heads, bottleneck 32).
    #[arg(long)]
    pub small: bool,
    /// Channel width C; also sets the bottleneck to C/2 and the MLP hidden width to 2C [default: 256].
    #[arg(long)]
    pub channels: Option<usize>,
    /// Attention heads [default: 8].
    #[arg(long)]
    pub heads: Option<usize>,
    /// uMLP bottleneck width [default: 128].
    #[arg(long)]
    pub bottleneck: Option<usize>,
    /// Number of stacked blocks N [default: 3].
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Graph-to-attention guidance scale [default: 0.5].
    #[arg(long)]
    pub s_g2a: Option<f64>,
    /// Attention-to-graph guidance scale [default: 0.8].
    #[arg(long)]
    pub s_a2g: Option<f64>,
    /// Adjacency normalization [default: row].
    #[arg(long, value_enum)]
    pub adjacency: Option<NormArg>,
    /// Graph-convolution nonlinearity [default: gelu].
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
    /// Feed the plain attention output (instead of the injected one) back into the graph path.
    #[arg(long)]
    pub a2g_pre_injection: bool,
    /// Drop the graph-convolution path (also disables both guidance paths).
    #[arg(long)]
    pub no_gcn: bool,
    /// Drop the graph-to-attention guidance.
    #[arg(long)]
    pub no_g2a: bool,
    /// Drop the attention-to-graph guidance.
    #[arg(long)]
    pub no_a2g: bool,
    /// Use a conventional MLP instead of the uMLP.
    #[arg(long)]
    pub no_umlp: bool,
    /// Residual-branch dropout during training [default: 0].
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormArg {
    Row,
    Symmetric,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActivationArg {
    Gelu,
    Relu,
}

/// Optimization flags. Unset flags fall back to `--config`, then to the
/// reference recipe.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Random seed for initialization, shuffling and augmentation [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs [default: 20].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size [default: 128].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Initial Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate decay per epoch [default: 0.95].
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Probability of flipping each training sample [default: 0.5].
    #[arg(long)]
    pub flip_prob: Option<f64>,
    /// Evaluate without averaging over the mirrored input.
    #[arg(long)]
    pub no_flip_merge: bool,
    /// Clip gradients to this global L2 norm [default: off].
    #[arg(long)]
    pub clip: Option<f64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Evaluate every N epochs [default: 1].
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Data-parallel gradient threads; more than one is not bitwise reproducible [default: 1].
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// Training pose file.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Held-out pose file used for model selection (default: training loss).
    #[arg(long, value_name = "PATH")]
    pub eval_data: Option<PathBuf>,
    /// JSON document with optional "model" and "train" sections.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Checkpoint to write (best by evaluation MPJPE).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// JSON-lines training log [default: <out>.log.jsonl].
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Joint graph as JSON (default: 17-joint Human3.6M skeleton).
    #[arg(long, value_name = "PATH")]
    pub graph: Option<PathBuf>,
    /// Evaluate without averaging over the mirrored input.
    #[arg(long)]
    pub no_flip_merge: bool,
    /// Averaging used for the per-action "Avg" row.
    #[arg(long, value_enum, default_value = "sample")]
    pub avg: AvgArg,
    /// Write the full report as JSON.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Write per-action (or per-sample) results as CSV.
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AvgArg {
    /// Pooled over all samples.
    Sample,
    /// Mean of the per-action rows.
    Row,
}

#[derive(Debug, Args)]
pub struct PredictCmd {
    /// Pose file; `out` fields are optional and ignored.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub graph: Option<PathBuf>,
    /// Predict without averaging over the mirrored input.
    #[arg(long)]
    pub no_flip_merge: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckCmd {
    /// Model configuration JSON [default: J=17, C=16, 4 heads, N=2].
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
    pub eps: f64,
    /// Largest accepted normwise relative error.
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, value_name = "PATH")]
    pub graph: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateCmd {
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Held-out pose file [default: the last 20% of --data].
    #[arg(long, value_name = "PATH")]
    pub eval_data: Option<PathBuf>,
    /// JSON list of {"gcn","g2a","a2g","umlp"} rows, or `full` for the built-in seven-row grid.
    #[arg(long, value_name = "PATH|full")]
    pub grid: String,
    /// CSV file for the comparison table; the aligned table goes to stdout.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// JSON document with optional "model" and "train" sections.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct SynthCmd {
    /// Number of samples.
    #[arg(long, short)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub graph: Option<PathBuf>,
}

/// Combined configuration document accepted by `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Applies flags on top of `base` (the config file section or defaults).
pub fn resolve_model(base: Option<ModelConfig>, args: &ModelArgs, graph: &SkeletonGraph) -> Result<ModelConfig> {
    let mut c = match base {
        Some(c) => c,
        None if args.small => ModelConfig::small(),
        None => ModelConfig::default(),
    };
    c.num_joints = graph.num_joints();
    if let Some(v) = args.channels {
        c.channels = v;
        if args.bottleneck.is_none() {
            c.bottleneck = v / 2;
        }
        c.mlp_hidden = 2 * v;
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { c.$field = v; })* };
    }
    set!(heads, bottleneck, blocks, s_g2a, s_a2g, dropout);
    if let Some(n) = args.adjacency {
        c.adjacency_norm = match n {
            NormArg::Row => AdjacencyNorm::Row,
            NormArg::Symmetric => AdjacencyNorm::Symmetric,
        };
    }
    if let Some(a) = args.activation {
        c.activation = match a {
            ActivationArg::Gelu => Activation::Gelu,
            ActivationArg::Relu => Activation::Relu,
        };
    }
    if args.a2g_pre_injection {
        c.a2g_source = A2gSource::PreInjection;
    }
    c.use_gcn &= !args.no_gcn;
    c.use_g2a &= !args.no_g2a && c.use_gcn;
    c.use_a2g &= !args.no_a2g && c.use_gcn;
    c.use_umlp &= !args.no_umlp;
    c.validate()?;
    Ok(c)
}

pub fn resolve_train(base: Option<TrainConfig>, args: &TrainArgs) -> Result<TrainConfig> {
    let mut c = base.unwrap_or_default();
    if let Some(v) = args.batch {
        c.batch_size = v;
    }
    if let Some(v) = args.lr {
        c.lr0 = v;
    }
    if let Some(v) = args.clip {
        c.clip_norm = Some(v);
    }
    if let Some(v) = args.max_steps {
        c.max_steps = Some(v);
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { c.$field = v; })* };
    }
    set!(seed, epochs, lr_decay, flip_prob, eval_every, threads);
    c.flip_merge_eval &= !args.no_flip_merge;
    c.validate()?;
    Ok(c)
}

fn load_graph(path: Option<&Path>) -> Result<SkeletonGraph> {
    match path {
        Some(p) => SkeletonGraph::from_json_file(p, AdjacencyNorm::Row),
        None => Ok(SkeletonGraph::h36m_17()),
    }
}

fn load_data(path: &Path, graph: &SkeletonGraph) -> Result<Dataset> {
    let loaded = load_dataset(path, graph)?;
    if !loaded.warnings.is_empty() {
        eprintln!("{}: {} warning(s) while loading", path.display(), loaded.warnings.len());
    }
    Ok(loaded.dataset)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } | Error::NonFiniteGradient { .. } => EXIT_DIVERGED,
        Error::Dimension { .. } | Error::Contract(_) => EXIT_CHECK_FAILED,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let result = match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Predict(c) => cmd_predict(&c),
        Command::Gradcheck(c) => cmd_gradcheck(&c),
        Command::Ablate(c) => cmd_ablate(&c),
        Command::Synth(c) => cmd_synth(&c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_train(c: &TrainCmd) -> Result<i32> {
    let file = read_config(c.config.as_deref())?;
    let graph = load_graph(c.model.graph.as_deref())?;
    let model_cfg = resolve_model(file.model, &c.model, &graph)?;
    let train_cfg = resolve_train(file.train, &c.train)?;
    let data = load_data(&c.data, &graph)?;
    let eval = c.eval_data.as_deref().map(|p| load_data(p, &graph)).transpose()?;
    let log_path = c.log.clone().unwrap_or_else(|| {
        let mut p = c.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(format!("creating {}", log_path.display()), e))?;
    eprintln!(
        "training {} parameters on {} samples ({} epochs, batch {}, lr {}, decay {})",
        count_params(&model_cfg),
        data.len(),
        train_cfg.epochs,
        train_cfg.batch_size,
        train_cfg.lr0,
        train_cfg.lr_decay
    );
    let outcome = train(&data, eval.as_ref(), &graph, &model_cfg, &train_cfg, None, |entry: &EpochLog, best| {
        let line = serde_json::to_string(entry)?;
        writeln!(log, "{line}").map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
        if let Some(p) = best {
            checkpoint::save(&c.out, &model_cfg, p)?;
        }
        Ok(())
    })?;
    if let Some(last) = outcome.log.last() {
        let eval = last.eval_mpjpe.map_or_else(|| "n/a".to_string(), |m| format!("{m:.2} mm"));
        println!(
            "epochs {} steps {} train_loss {:.2} mm eval_mpjpe {eval}",
            outcome.log.len(),
            outcome.steps,
            last.train_loss
        );
    }
    println!("checkpoint: {}", c.out.display());
    Ok(EXIT_OK)
}

pub fn cmd_eval(c: &EvalCmd) -> Result<i32> {
    let graph = load_graph(c.graph.as_deref())?;
    let (cfg, params) = checkpoint::load_for_graph(&c.checkpoint, &graph)?;
    let data = load_data(&c.data, &graph)?;
    let flip_merge = !c.no_flip_merge;
    let report = evaluate(&data, &params, &cfg, &graph, flip_merge)?;
    println!(
        "MPJPE {:.2} mm  PCK@150 {:.2}%  AUC {:.2}%  ({} samples, flip-merge {})",
        report.mpjpe_mm,
        report.pck_pct,
        report.auc_pct,
        data.len(),
        if flip_merge { "on" } else { "off" }
    );
    let mut other = None;
    if flip_merge && log::log_enabled!(log::Level::Info) {
        let r = evaluate(&data, &params, &cfg, &graph, false)?;
        println!("MPJPE {:.2} mm  PCK@150 {:.2}%  AUC {:.2}%  (flip-merge off)", r.mpjpe_mm, r.pck_pct, r.auc_pct);
        other = Some(r);
    }
    let mode = match c.avg {
        AvgArg::Sample => AverageMode::SampleWeighted,
        AvgArg::Row => AverageMode::RowMean,
    };
    let labels: Option<Vec<String>> = data.samples.iter().map(|s| s.action.clone()).collect();
    let table = match labels {
        Some(l) if !l.is_empty() => Some(ActionTable::build(&report.per_sample, &l, None)?),
        _ => None,
    };
    if let Some(t) = &table {
        print!("{}", t.to_text(mode));
    }
    if let Some(p) = &c.report {
        let mut doc = serde_json::json!({ "report": report });
        if let Some(t) = &table {
            doc["per_action_table"] = serde_json::to_value(t)?;
        }
        if let Some(r) = &other {
            doc["report_no_flip_merge"] = serde_json::to_value(r)?;
        }
        write_file(p, &serde_json::to_string_pretty(&doc)?)?;
    }
    if let Some(p) = &c.csv {
        let csv = match &table {
            Some(t) => t.to_csv(mode),
            None => {
                let mut s = String::from("sample,mpjpe_mm\n");
                for (i, v) in report.per_sample.iter().enumerate() {
                    let _ = writeln!(s, "{i},{v}");
                }
                s
            }
        };
        write_file(p, &csv)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_predict(c: &PredictCmd) -> Result<i32> {
    let graph = load_graph(c.graph.as_deref())?;
    let (cfg, params) = checkpoint::load_for_graph(&c.checkpoint, &graph)?;
    let (header, records) = read_pose_file(&c.input)?;
    if header.num_joints != graph.num_joints() {
        return Err(Error::Parse {
            path: c.input.clone(),
            line: 1,
            message: format!("file has J={}, model expects {}", header.num_joints, graph.num_joints()),
        });
    }
    let inputs: Vec<_> = records.iter().map(|(_, r)| r.input.clone()).collect();
    let preds = predict_mm(&params, &cfg, &graph, &inputs, !c.no_flip_merge)?;
    let out: Vec<PoseRecord> =
        records.into_iter().zip(preds).map(|((_, r), p)| PoseRecord { output: Some(p), ..r }).collect();
    write_pose_file(&c.out, &PoseFileHeader { num_joints: graph.num_joints(), graph: graph.name().to_string() }, &out)?;
    println!("wrote {} predictions to {}", out.len(), c.out.display());
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(c: &GradcheckCmd) -> Result<i32> {
    let graph = load_graph(c.graph.as_deref())?;
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            serde_json::from_str::<ModelConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ModelConfig::probe(),
    };
    cfg.num_joints = graph.num_joints();
    if c.eps.is_nan() || c.eps <= 0.0 || c.tol.is_nan() || c.tol < 0.0 {
        return Err(Error::Config("--eps must be positive and --tol non-negative".into()));
    }
    let reports = gradcheck::full_suite(&cfg, &graph, c.seed, c.eps)?;
    let width = reports.iter().map(|r| r.group.len()).max().unwrap_or(5);
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.max_rel_error < c.tol;
        println!("{:<width$}  {:>10.3e}  {}", r.group, r.max_rel_error, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(r.group.as_str());
        }
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("{} groups, worst relative error {worst:.3e}, tolerance {:e}", reports.len(), c.tol);
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(EXIT_CHECK_FAILED)
    }
}

/// One trained row of an ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub params: usize,
    pub mpjpe_mm: f64,
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        ""
    }
}

/// Aligned text in the component-study layout.
pub fn ablation_table_text(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:>3}  {:^5}  {:^5}  {:^5}  {:^5}  {:>9}  {:>10}\n",
        "#", "GCN", "G2A", "A2G", "uMLP", "Params", "MPJPE (mm)"
    );
    for (i, r) in rows.iter().enumerate() {
        let a = r.ablation;
        let _ = writeln!(
            s,
            "{:>3}  {:^5}  {:^5}  {:^5}  {:^5}  {:>9}  {:>10.2}",
            i + 1,
            mark(a.gcn),
            mark(a.g2a),
            mark(a.a2g),
            mark(a.umlp),
            r.params,
            r.mpjpe_mm
        );
    }
    s
}

pub fn ablation_table_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("row,gcn,g2a,a2g,umlp,params,mpjpe_mm\n");
    for (i, r) in rows.iter().enumerate() {
        let a = r.ablation;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", i + 1, a.gcn, a.g2a, a.a2g, a.umlp, r.params, r.mpjpe_mm);
    }
    s
}

pub fn parse_grid(spec: &str) -> Result<Vec<Ablation>> {
    let rows: Vec<Ablation> = if spec == "full" {
        Ablation::GRID.to_vec()
    } else {
        let text = fs::read_to_string(spec).map_err(|e| Error::io(format!("reading {spec}"), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{spec}: {e}")))?
    };
    if rows.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    Ok(rows)
}

/// Trains every grid row with the same seed and budget.
pub fn run_ablation(
    grid: &[Ablation],
    train_set: &Dataset,
    eval_set: &Dataset,
    graph: &SkeletonGraph,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for (i, &a) in grid.iter().enumerate() {
        let cfg = base.clone().with_ablation(a);
        let outcome = train(train_set, Some(eval_set), graph, &cfg, train_cfg, None, |_, _| Ok(()))?;
        let report = evaluate(eval_set, &outcome.best, &cfg, graph, train_cfg.flip_merge_eval)?;
        log::info!("ablation row {} {a:?}: {:.2} mm", i + 1, report.mpjpe_mm);
        rows.push(AblationRow { ablation: a, params: count_params(&cfg), mpjpe_mm: report.mpjpe_mm });
    }
    Ok(rows)
}

pub fn cmd_ablate(c: &AblateCmd) -> Result<i32> {
    let grid = parse_grid(&c.grid)?;
    let file = read_config(c.config.as_deref())?;
    let graph = load_graph(c.model.graph.as_deref())?;
    let base = resolve_model(file.model, &c.model, &graph)?;
    let train_cfg = resolve_train(file.train, &c.train)?;
    let mut data = load_data(&c.data, &graph)?;
    let eval = match &c.eval_data {
        Some(p) => load_data(p, &graph)?,
        None => {
            let keep = data.len() - data.len() / 5;
            if keep == 0 || keep == data.len() {
                return Err(Error::Validation("--data is too small to hold out an evaluation split".into()));
            }
            let held = data.samples.split_off(keep);
            Dataset { samples: held, ..data.clone() }
        }
    };
    let rows = run_ablation(&grid, &data, &eval, &graph, &base, &train_cfg)?;
    print!("{}", ablation_table_text(&rows));
    write_file(&c.out, &ablation_table_csv(&rows))?;
    Ok(EXIT_OK)
}

pub fn cmd_synth(c: &SynthCmd) -> Result<i32> {
    let graph = load_graph(c.graph.as_deref())?;
    let data = synth_generate(c.n, c.seed, &graph)?;
    save_dataset(&c.out, &data)?;
    println!("wrote {} samples to {}", data.len(), c.out.display());
    Ok(EXIT_OK)
}
