//! C ABI over the `iganet` library.
//!
//! Every fallible function returns an [`IganetStatus`]; on failure the message
//! is available from [`iganet_last_error_message`] on the same thread. Models
//! are opaque handles created by `iganet_model_new` or `iganet_model_load` and
//! released with `iganet_model_free`. Poses are flat row-major `double` arrays:
//! `batch * joints * 2` for 2D inputs and `batch * joints * 3` (millimetres)
//! for 3D poses.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use iganet::data::{Dataset, Pose2, Pose3, PoseSample};
use iganet::gradcheck::{full_suite, DEFAULT_EPS, DEFAULT_TOL};
use iganet::model::{checkpoint, predict_mm};
use iganet::skeleton::AdjacencyNorm;
use iganet::training::{train, TrainConfig};
use iganet::{metrics, Error, ModelConfig, ModelParams, SkeletonGraph};

/// Result of every fallible call. `IGANET_STATUS_OK` is zero.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IganetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    ShapeMismatch = 5,
    UnsupportedVersion = 6,
    CorruptCheckpoint = 7,
    Diverged = 8,
    CheckFailed = 9,
    Panic = 10,
}

/// A model configuration, its parameters and the joint graph they run on.
pub struct IganetModel {
    config: ModelConfig,
    params: ModelParams,
    graph: SkeletonGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

struct Failure(IganetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Validation(_) | Error::Config(_) | Error::Dimension { .. } | Error::Contract(_) => {
                IganetStatus::InvalidArgument
            }
            Error::ShapeMismatch { .. } => IganetStatus::ShapeMismatch,
            Error::Version { .. } => IganetStatus::UnsupportedVersion,
            Error::Corrupt(_) => IganetStatus::CorruptCheckpoint,
            Error::Parse { .. } | Error::Json(_) => IganetStatus::Parse,
            Error::Io { .. } => IganetStatus::Io,
            Error::Divergence { .. } | Error::NonFiniteGradient { .. } => IganetStatus::Diverged,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(IganetStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(IganetStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording the message of any failure or panic.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IganetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            IganetStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IganetStatus::Panic
        }
    }
}

unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p).to_str().map(Some).map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    opt_str(p, what)?.ok_or_else(|| null(what))
}

fn graph_from(json: Option<&str>) -> Result<SkeletonGraph, Failure> {
    match json {
        Some(text) => Ok(SkeletonGraph::from_json_str(text, AdjacencyNorm::Row)?),
        None => Ok(SkeletonGraph::h36m_17()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure(IganetStatus::Parse, format!("{what}: {e}")))
}

unsafe fn model_ref<'a>(m: *const IganetModel) -> Result<&'a IganetModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn doubles<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

fn element_count(batch: usize, joints: usize, dim: usize) -> Result<usize, Failure> {
    batch.checked_mul(joints).and_then(|n| n.checked_mul(dim)).ok_or_else(|| invalid("pose array size overflows"))
}

unsafe fn poses2(p: *const f64, batch: usize, joints: usize) -> Result<Vec<Pose2>, Failure> {
    let flat = doubles(p, element_count(batch, joints, 2)?, "2D pose array")?;
    Ok(flat.chunks_exact(joints * 2).map(|s| s.chunks_exact(2).map(|c| [c[0], c[1]]).collect()).collect())
}

unsafe fn poses3(p: *const f64, batch: usize, joints: usize, what: &str) -> Result<Vec<Pose3>, Failure> {
    let flat = doubles(p, element_count(batch, joints, 3)?, what)?;
    Ok(flat.chunks_exact(joints * 3).map(|s| s.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()).collect())
}

fn check_joints(joints: usize, expected: usize) -> Result<(), Failure> {
    if joints == 0 || joints != expected {
        return Err(Failure(IganetStatus::ShapeMismatch, format!("got {joints} joints, model expects {expected}")));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn iganet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn iganet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a freshly initialized model.
///
/// `config_json` is a model configuration document (null selects the
/// desk-scale preset) and `graph_json` a joint graph (null selects the
/// 17-joint Human3.6M skeleton). The joint count is taken from the graph.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn iganet_model_new(
    config_json: *const c_char,
    graph_json: *const c_char,
    seed: u64,
    out: *mut *mut IganetModel,
) -> IganetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let graph = graph_from(opt_str(graph_json, "graph_json")?)?;
        let mut config = match opt_str(config_json, "config_json")? {
            Some(text) => parse_json::<ModelConfig>(text, "config_json")?,
            None => ModelConfig::small(),
        };
        config.num_joints = graph.num_joints();
        config.validate()?;
        let params = ModelParams::init(&config, seed)?;
        *out = Box::into_raw(Box::new(IganetModel { config, params, graph }));
        Ok(())
    })
}

/// Loads a checkpoint. `graph_json` may be null for the Human3.6M skeleton.
///
/// # Safety
/// `path` must be NUL-terminated, `graph_json` null or NUL-terminated, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn iganet_model_load(
    path: *const c_char,
    graph_json: *const c_char,
    out: *mut *mut IganetModel,
) -> IganetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = req_str(path, "path")?;
        let graph = graph_from(opt_str(graph_json, "graph_json")?)?;
        let (config, params) = checkpoint::load_for_graph(path, &graph)?;
        *out = Box::into_raw(Box::new(IganetModel { config, params, graph }));
        Ok(())
    })
}

/// Writes the model as a checkpoint file.
///
/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn iganet_model_save(model: *const IganetModel, path: *const c_char) -> IganetStatus {
    guard(|| {
        let m = model_ref(model)?;
        checkpoint::save(req_str(path, "path")?, &m.config, &m.params)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn iganet_model_free(model: *mut IganetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Joint count of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iganet_model_num_joints(model: *const IganetModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.num_joints)
}

/// Number of trainable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iganet_model_param_count(model: *const IganetModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.num_params())
}

/// Lifts `batch` 2D poses to root-relative 3D poses in millimetres.
///
/// # Safety
/// `input2d` must hold `batch * joints * 2` doubles and `out3d` have room for
/// `batch * joints * 3`.
#[no_mangle]
pub unsafe extern "C" fn iganet_model_predict(
    model: *const IganetModel,
    input2d: *const f64,
    batch: usize,
    joints: usize,
    flip_merge: bool,
    out3d: *mut f64,
) -> IganetStatus {
    guard(|| {
        let m = model_ref(model)?;
        check_joints(joints, m.config.num_joints)?;
        if out3d.is_null() {
            return Err(null("out3d"));
        }
        let inputs = poses2(input2d, batch, joints)?;
        let preds = predict_mm(&m.params, &m.config, &m.graph, &inputs, flip_merge)?;
        let out = slice::from_raw_parts_mut(out3d, element_count(batch, joints, 3)?);
        for (dst, v) in out.iter_mut().zip(preds.iter().flatten().flatten()) {
            *dst = *v;
        }
        Ok(())
    })
}

/// Trains the model in place on `n` samples and replaces its parameters with
/// the best ones found (lowest training loss).
///
/// `train_config_json` is a training configuration document; null selects the
/// default recipe. `final_loss` (nullable) receives the last epoch's mean
/// training loss in millimetres.
///
/// # Safety
/// `input2d` must hold `n * joints * 2` doubles and `target3d` `n * joints * 3`;
/// `train_config_json` must be null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn iganet_model_train(
    model: *mut IganetModel,
    input2d: *const f64,
    target3d: *const f64,
    n: usize,
    joints: usize,
    train_config_json: *const c_char,
    final_loss: *mut f64,
) -> IganetStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        check_joints(joints, m.config.num_joints)?;
        let cfg = match opt_str(train_config_json, "train_config_json")? {
            Some(text) => parse_json::<TrainConfig>(text, "train_config_json")?,
            None => TrainConfig::default(),
        };
        let inputs = poses2(input2d, n, joints)?;
        let targets = poses3(target3d, n, joints, "target array")?;
        let samples = inputs
            .into_iter()
            .zip(targets)
            .map(|(input2d, target3d)| PoseSample { input2d, target3d, action: None, subject: None })
            .collect();
        let data = Dataset::new(&m.graph, samples)?;
        let outcome = train(&data, None, &m.graph, &m.config, &cfg, Some(m.params.clone()), |_, _| Ok(()))?;
        if let (Some(dst), Some(last)) = (final_loss.as_mut(), outcome.log.last()) {
            *dst = last.train_loss;
        }
        m.params = outcome.best;
        Ok(())
    })
}

type MetricFn<'a> = dyn Fn(&[Pose3], &[Pose3]) -> iganet::Result<f64> + 'a;

unsafe fn metric(
    pred: *const f64,
    gt: *const f64,
    batch: usize,
    joints: usize,
    out: *mut f64,
    f: &MetricFn<'_>,
) -> IganetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if joints == 0 {
            return Err(invalid("joints must be positive"));
        }
        let p = poses3(pred, batch, joints, "pred")?;
        let g = poses3(gt, batch, joints, "gt")?;
        *out = f(&p, &g)?;
        Ok(())
    })
}

/// Mean per-joint position error in the units of the inputs.
///
/// # Safety
/// `pred` and `gt` must each hold `batch * joints * 3` doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn iganet_mpjpe(
    pred: *const f64,
    gt: *const f64,
    batch: usize,
    joints: usize,
    out: *mut f64,
) -> IganetStatus {
    metric(pred, gt, batch, joints, out, &|p, g| metrics::mpjpe(p, g))
}

/// Percentage of joints within `threshold_mm` of the ground truth.
///
/// # Safety
/// As for [`iganet_mpjpe`].
#[no_mangle]
pub unsafe extern "C" fn iganet_pck(
    pred: *const f64,
    gt: *const f64,
    batch: usize,
    joints: usize,
    threshold_mm: f64,
    out: *mut f64,
) -> IganetStatus {
    metric(pred, gt, batch, joints, out, &|p, g| metrics::pck(p, g, threshold_mm))
}

/// Area under the PCK curve over thresholds 0..=150 mm, as a percentage.
///
/// # Safety
/// As for [`iganet_mpjpe`].
#[no_mangle]
pub unsafe extern "C" fn iganet_auc(
    pred: *const f64,
    gt: *const f64,
    batch: usize,
    joints: usize,
    out: *mut f64,
) -> IganetStatus {
    metric(pred, gt, batch, joints, out, &|p, g| metrics::auc(p, g))
}

/// Runs the finite-difference gradient suite and stores the worst relative
/// error in `worst` (nullable). Returns `IGANET_STATUS_CHECK_FAILED` when any
/// group reaches the default tolerance. A null `config_json` selects the
/// probe configuration.
///
/// # Safety
/// `config_json` must be null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn iganet_gradcheck(config_json: *const c_char, seed: u64, worst: *mut f64) -> IganetStatus {
    guard(|| {
        let graph = SkeletonGraph::h36m_17();
        let mut config = match opt_str(config_json, "config_json")? {
            Some(text) => parse_json::<ModelConfig>(text, "config_json")?,
            None => ModelConfig::probe(),
        };
        config.num_joints = graph.num_joints();
        let reports = full_suite(&config, &graph, seed, DEFAULT_EPS)?;
        let max = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        if let Some(w) = worst.as_mut() {
            *w = max;
        }
        let failing: Vec<&str> = reports
            .iter()
            .filter(|r| r.max_rel_error.is_nan() || r.max_rel_error >= DEFAULT_TOL)
            .map(|r| r.group.as_str())
            .collect();
        if !failing.is_empty() {
            return Err(Failure(
                IganetStatus::CheckFailed,
                format!("gradient check failed for: {}", failing.join(", ")),
            ));
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use std::ptr;

    use super::*;

    #[test]
    fn null_out_pointer_is_reported() {
        let s = unsafe { iganet_model_new(ptr::null(), ptr::null(), 0, ptr::null_mut()) };
        assert_eq!(s, IganetStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(iganet_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "out is null");
    }
}
