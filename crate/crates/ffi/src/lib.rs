//! C ABI over the `otta` library.
//!
//! Every function returns an [`OttaStatus`]; on failure the message of the
//! last error on the calling thread is available through
//! [`otta_last_error_message`]. Objects are opaque handles created by a
//! `*_load`/`*_run` function and released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use otta::diffmodel::RegressorState;
use otta::engine::{run_stream, RunOptions, RunReport, SplitStats};
use otta::harness::config::{resolve_mode, RunMode, Switches};
use otta::harness::{load_checkpoint, ExperimentConfig};
use otta::kinematics::{forward_kinematics, mpjpe, pa_mpjpe, Pose3D, PoseParams, SkeletonTemplate};
use otta::streamgen::read_stream;
use otta::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OttaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    MissingInput = 4,
    Io = 5,
    Parse = 6,
    Config = 7,
    Numeric = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Pipeline preset for [`otta_run_stream`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OttaMode {
    None = 0,
    Single = 1,
    PerVideo = 2,
    Full = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OttaSplit {
    All = 0,
    Confident = 1,
    NonConfident = 2,
}

/// Aggregate metrics over one split of a run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OttaSplitStats {
    pub frames: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub epe2d_px: f64,
}

/// Opaque regressor handle.
pub struct OttaModel {
    inner: RegressorState,
}

/// Opaque run-report handle.
pub struct OttaReport {
    inner: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> OttaStatus {
    match e {
        Error::InvalidInput(_) => OttaStatus::InvalidArgument,
        Error::DimensionMismatch { .. } => OttaStatus::DimensionMismatch,
        Error::MissingInput(_) => OttaStatus::MissingInput,
        Error::Io(_) => OttaStatus::Io,
        Error::Parse { .. } => OttaStatus::Parse,
        Error::Config(_) => OttaStatus::Config,
        _ => OttaStatus::Numeric,
    }
}

fn fail(status: OttaStatus, msg: impl Into<String>) -> OttaStatus {
    set_error(msg.into());
    status
}

/// Run `f`, converting errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), OttaStatus>>(f: F) -> OttaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OttaStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(OttaStatus::Panic, "internal panic"),
    }
}

fn lib<T>(r: otta::Result<T>) -> Result<T, OttaStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, OttaStatus> {
    if p.is_null() {
        return Err(fail(OttaStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(OttaStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], OttaStatus> {
    if p.is_null() {
        return Err(fail(OttaStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, needed: usize, what: &str) -> Result<&'a mut [f64], OttaStatus> {
    if p.is_null() {
        return Err(fail(OttaStatus::NullPointer, format!("{what} is null")));
    }
    if len < needed {
        return Err(fail(
            OttaStatus::BufferTooSmall,
            format!("{what} holds {len} values, {needed} needed"),
        ));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn pose_from_flat(v: &[f64]) -> Result<Pose3D, OttaStatus> {
    if !v.len().is_multiple_of(3) || v.is_empty() {
        return Err(fail(OttaStatus::DimensionMismatch, "pose length must be a positive multiple of 3"));
    }
    Ok(Pose3D {
        joints: v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

/// Copy the last error message on this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn otta_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Number of skeleton joints J.
#[no_mangle]
pub extern "C" fn otta_joint_count() -> usize {
    SkeletonTemplate::default().joint_count()
}

/// Length of a flat pose-parameter vector: 3J angles, 10 bone scales, 3 translation.
#[no_mangle]
pub extern "C" fn otta_param_dim() -> usize {
    SkeletonTemplate::default().param_dim()
}

/// Load a checkpoint written by `otta pretrain`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otta_model_load(path: *const c_char, out: *mut *mut OttaModel) -> OttaStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(OttaStatus::NullPointer, "out is null"));
        }
        let path = path_arg(path, "path")?;
        let inner = lib(load_checkpoint(&path))?;
        *out = Box::into_raw(Box::new(OttaModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`otta_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn otta_model_free(model: *mut OttaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn otta_model_input_dim(model: *const OttaModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// Predict flat pose parameters for one feature vector.
///
/// # Safety
/// `features` must hold `n_features` values and `out_params` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn otta_model_predict(
    model: *const OttaModel,
    features: *const f64,
    n_features: usize,
    out_params: *mut f64,
    out_len: usize,
) -> OttaStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(OttaStatus::NullPointer, "model is null"))?;
        let f = input(features, n_features, "features")?;
        let params = lib(m.inner.predict(f))?.to_flat();
        let out = output(out_params, out_len, params.len(), "out_params")?;
        out[..params.len()].copy_from_slice(&params);
        Ok(())
    })
}

/// Joint positions (meters, `x0,y0,z0,...`) of flat pose parameters.
///
/// # Safety
/// `params` must hold `n_params` values and `out_joints` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn otta_forward_kinematics(
    params: *const f64,
    n_params: usize,
    out_joints: *mut f64,
    out_len: usize,
) -> OttaStatus {
    guard(|| {
        let skel = SkeletonTemplate::default();
        let p = lib(PoseParams::from_flat(input(params, n_params, "params")?, skel.joint_count()))?;
        let pose = lib(forward_kinematics(&skel, &p))?;
        let out = output(out_joints, out_len, 3 * pose.joints.len(), "out_joints")?;
        for (o, j) in out.chunks_exact_mut(3).zip(&pose.joints) {
            o.copy_from_slice(j);
        }
        Ok(())
    })
}

unsafe fn pose_metric(
    pred: *const f64,
    gt: *const f64,
    n_joints: usize,
    out: *mut f64,
    metric: fn(&Pose3D, &Pose3D) -> otta::Result<f64>,
) -> OttaStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(OttaStatus::NullPointer, "out is null"));
        }
        let a = pose_from_flat(input(pred, 3 * n_joints, "pred")?)?;
        let b = pose_from_flat(input(gt, 3 * n_joints, "gt")?)?;
        *out = lib(metric(&a, &b))?;
        Ok(())
    })
}

/// Root-relative mean per-joint position error in millimeters.
///
/// # Safety
/// `pred` and `gt` must hold `3 * n_joints` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otta_mpjpe(pred: *const f64, gt: *const f64, n_joints: usize, out: *mut f64) -> OttaStatus {
    pose_metric(pred, gt, n_joints, out, mpjpe)
}

/// MPJPE after similarity alignment of `pred` onto `gt`.
///
/// # Safety
/// As [`otta_mpjpe`].
#[no_mangle]
pub unsafe extern "C" fn otta_pa_mpjpe(pred: *const f64, gt: *const f64, n_joints: usize, out: *mut f64) -> OttaStatus {
    pose_metric(pred, gt, n_joints, out, pa_mpjpe)
}

/// Adapt `model` (left unchanged) over the stream file at `streams_path`.
/// `config_path` may be null for the default engine settings.
///
/// # Safety
/// Paths must be null or NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otta_run_stream(
    model: *const OttaModel,
    streams_path: *const c_char,
    config_path: *const c_char,
    mode: OttaMode,
    seed: u64,
    out: *mut *mut OttaReport,
) -> OttaStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(OttaStatus::NullPointer, "model is null"))?;
        if out.is_null() {
            return Err(fail(OttaStatus::NullPointer, "out is null"));
        }
        let cfg = if config_path.is_null() {
            ExperimentConfig::default()
        } else {
            lib(ExperimentConfig::load(&path_arg(config_path, "config_path")?))?
        };
        let videos = lib(read_stream(&path_arg(streams_path, "streams_path")?))?;
        let run_mode = match mode {
            OttaMode::None => RunMode::None,
            OttaMode::Single => RunMode::Single,
            OttaMode::PerVideo => RunMode::PerVideo,
            OttaMode::Full => RunMode::Full,
        };
        let switches = if run_mode == cfg.mode { cfg.switches } else { Switches::default() };
        let (pm, engine) = resolve_mode(run_mode, &switches, &cfg.engine);
        let report = lib(run_stream(&pm, &videos, &m.inner, &engine, &RunOptions {
            seed,
            check_isolation: false,
        }))?;
        *out = Box::into_raw(Box::new(OttaReport { inner: report }));
        Ok(())
    })
}

/// # Safety
/// `report` must be null or a handle from [`otta_run_stream`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn otta_report_free(report: *mut OttaReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Number of scored frames.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn otta_report_frame_count(report: *const OttaReport) -> usize {
    report.as_ref().map_or(0, |r| r.inner.rows.len())
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otta_report_split(
    report: *const OttaReport,
    split: OttaSplit,
    out: *mut OttaSplitStats,
) -> OttaStatus {
    guard(|| {
        let r = report
            .as_ref()
            .ok_or_else(|| fail(OttaStatus::NullPointer, "report is null"))?;
        if out.is_null() {
            return Err(fail(OttaStatus::NullPointer, "out is null"));
        }
        let s: SplitStats = match split {
            OttaSplit::All => r.inner.all(),
            OttaSplit::Confident => r.inner.confident(),
            OttaSplit::NonConfident => r.inner.non_confident(),
        };
        *out = OttaSplitStats {
            frames: s.frames,
            mpjpe_mm: s.mpjpe_mm,
            pa_mpjpe_mm: s.pa_mpjpe_mm,
            epe2d_px: s.epe2d_px,
        };
        Ok(())
    })
}

/// Write the per-frame CSV (same format as `otta run`'s `frames.csv`).
///
/// # Safety
/// `report` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn otta_report_write_frames_csv(report: *const OttaReport, path: *const c_char) -> OttaStatus {
    guard(|| {
        let r = report
            .as_ref()
            .ok_or_else(|| fail(OttaStatus::NullPointer, "report is null"))?;
        let path = path_arg(path, "path")?;
        let file = std::fs::File::create(&path).map_err(|e| fail(OttaStatus::Io, format!("{}: {e}", path.display())))?;
        lib(r.inner.write_frames_csv(std::io::BufWriter::new(file)))
    })
}
