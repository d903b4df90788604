//! C ABI over the `l2c` library.
//!
//! Tensors cross the boundary as opaque [`L2cTensor`] handles. Every fallible
//! call returns an [`L2cStatus`]; on failure the message is kept per thread
//! and read back with [`l2c_last_error_message`]. Handles returned through
//! out-pointers are owned by the caller and released with
//! [`l2c_tensor_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use l2c::calibration::{apply_calibration, calibrate_search, calibrated_stats, CalibrationParams};
use l2c::distribution::{softmax, token_stats, LogitGrid, TargetStats};
use l2c::lcdm::{lcdm_pipeline, Codebook};
use l2c::otsu::{otsu_threshold, OtsuWeighting};
use l2c::tensor_io::{read_tensor, write_tensor, DType, StatsConfig, Tensor};
use l2c::{Error, Matrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L2cStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    NonFinite = 6,
    Panic = 7,
}

/// Opaque tensor handle.
pub struct L2cTensor {
    inner: Tensor,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2cCalibrationParams {
    pub scale: f64,
    pub bias: f64,
    pub temperature: f64,
    pub smoothing: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2cTargetStats {
    pub mean_entropy: f64,
    pub mean_conf: f64,
    pub p95_conf: f64,
    pub p95_entropy: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2cTokenStats {
    pub top1: f64,
    pub top2: f64,
    pub margin: f64,
    pub topk_mass: f64,
    pub tail_entropy: f64,
    pub norm_entropy: f64,
    pub support: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2cOtsuReport {
    pub threshold_prob: f64,
    pub threshold_rank: usize,
    pub head_mass: f64,
    pub between_class_variance: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2cCalibrationOutcome {
    pub params: L2cCalibrationParams,
    pub loss: f64,
    pub achieved: L2cTargetStats,
    /// 0 when the scale bisection never bracketed the target entropy.
    pub bracketed: u8,
}

/// Otsu class weights by element count.
pub const L2C_OTSU_COUNT: u32 = 0;
/// Otsu class weights by probability mass.
pub const L2C_OTSU_MASS: u32 = 1;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> L2cStatus {
    match err {
        Error::Io { .. } => L2cStatus::Io,
        Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::UnknownDtype(_)
        | Error::BadHeader(_)
        | Error::DimsOverflow(_)
        | Error::Parse(_) => L2cStatus::Format,
        Error::ShapeMismatch(_) => L2cStatus::ShapeMismatch,
        Error::NonFinite(_) => L2cStatus::NonFinite,
        Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::Empty(_) => L2cStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> L2cStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => L2cStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            L2cStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic".into());
            L2cStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Lib(Error::InvalidArgument("path is not UTF-8".into())))
}

unsafe fn put<T>(out: *mut T, v: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(v);
    Ok(())
}

fn boxed(t: Tensor) -> *mut L2cTensor {
    Box::into_raw(Box::new(L2cTensor { inner: t }))
}

fn params_of(p: &L2cCalibrationParams) -> Result<CalibrationParams, Error> {
    CalibrationParams::new(p.scale, p.bias, p.temperature, p.smoothing)
}

fn params_to_c(p: &CalibrationParams) -> L2cCalibrationParams {
    L2cCalibrationParams { scale: p.scale, bias: p.bias, temperature: p.temperature, smoothing: p.smoothing }
}

fn stats_to_c(s: &TargetStats) -> L2cTargetStats {
    L2cTargetStats {
        mean_entropy: s.mean_entropy,
        mean_conf: s.mean_conf,
        p95_conf: s.p95_conf,
        p95_entropy: s.p95_entropy,
    }
}

fn matrix_of(t: &L2cTensor) -> Result<Matrix, Error> {
    t.inner.clone().into_matrix()
}

fn logits_of(t: &L2cTensor) -> Result<LogitGrid, Error> {
    LogitGrid::new(matrix_of(t)?)
}

/// Message of the most recent failed call on this thread, or NULL. Valid
/// until the next failure on the same thread.
#[no_mangle]
pub extern "C" fn l2c_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copies `len` values into a new tensor of the given shape.
#[no_mangle]
pub unsafe extern "C" fn l2c_tensor_new(
    shape: *const usize,
    ndim: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut L2cTensor,
) -> L2cStatus {
    guard(|| {
        let shape = slice(shape, ndim, "shape")?.to_vec();
        let data = slice(data, len, "data")?.to_vec();
        let t = Tensor::new(shape, data)?;
        put(out, boxed(t), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn l2c_tensor_read(path: *const c_char, out: *mut *mut L2cTensor) -> L2cStatus {
    guard(|| {
        let t = read_tensor(path_arg(path)?)?;
        put(out, boxed(t), "out")
    })
}

/// `dtype`: 0 for f32, 1 for f64.
#[no_mangle]
pub unsafe extern "C" fn l2c_tensor_write(tensor: *const L2cTensor, path: *const c_char, dtype: u8) -> L2cStatus {
    guard(|| {
        let t = deref(tensor, "tensor")?;
        let dtype = DType::from_code(dtype)?;
        write_tensor(path_arg(path)?, &t.inner, dtype)?;
        Ok(())
    })
}

/// Releases a handle; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn l2c_tensor_free(tensor: *mut L2cTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// Rank of the tensor, 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn l2c_tensor_ndim(tensor: *const L2cTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.inner.shape().len())
}

/// Extent of `axis`, 0 when out of range or NULL.
#[no_mangle]
pub unsafe extern "C" fn l2c_tensor_dim(tensor: *const L2cTensor, axis: usize) -> usize {
    tensor.as_ref().and_then(|t| t.inner.shape().get(axis).copied()).unwrap_or(0)
}

/// Element count, 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn l2c_tensor_len(tensor: *const L2cTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.inner.len())
}

/// Row-major values, valid while the handle lives.
#[no_mangle]
pub unsafe extern "C" fn l2c_tensor_data(tensor: *const L2cTensor) -> *const f64 {
    tensor.as_ref().map_or(ptr::null(), |t| t.inner.data().as_ptr())
}

/// Tempered softmax of one row of `k` logits into `out`.
#[no_mangle]
pub unsafe extern "C" fn l2c_softmax(logits: *const f64, k: usize, temperature: f64, out: *mut f64) -> L2cStatus {
    guard(|| {
        let p = softmax(slice(logits, k, "logits")?, temperature)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(&p);
        Ok(())
    })
}

/// Statistics of one probability row.
#[no_mangle]
pub unsafe extern "C" fn l2c_token_stats(probs: *const f64, k: usize, out: *mut L2cTokenStats) -> L2cStatus {
    guard(|| {
        let s = token_stats(slice(probs, k, "probs")?)?;
        let c = L2cTokenStats {
            top1: s.top1,
            top2: s.top2,
            margin: s.margin,
            topk_mass: s.topk_mass,
            tail_entropy: s.tail_entropy,
            norm_entropy: s.norm_entropy,
            support: s.support,
        };
        put(out, c, "out")
    })
}

/// Otsu split of one probability row; `weighting` is `L2C_OTSU_COUNT` or
/// `L2C_OTSU_MASS`.
#[no_mangle]
pub unsafe extern "C" fn l2c_otsu_threshold(
    probs: *const f64,
    k: usize,
    weighting: u32,
    out: *mut L2cOtsuReport,
) -> L2cStatus {
    guard(|| {
        let w = match weighting {
            L2C_OTSU_COUNT => OtsuWeighting::Count,
            L2C_OTSU_MASS => OtsuWeighting::Mass,
            other => return Err(Error::InvalidArgument(format!("unknown weighting {other}")).into()),
        };
        let r = otsu_threshold(slice(probs, k, "probs")?, w)?;
        let c = L2cOtsuReport {
            threshold_prob: r.threshold_prob,
            threshold_rank: r.threshold_rank,
            head_mass: r.head_mass,
            between_class_variance: r.between_class_variance,
        };
        put(out, c, "out")
    })
}

/// Calibrated probabilities of an N×K logit tensor.
#[no_mangle]
pub unsafe extern "C" fn l2c_apply_calibration(
    logits: *const L2cTensor,
    params: *const L2cCalibrationParams,
    out: *mut *mut L2cTensor,
) -> L2cStatus {
    guard(|| {
        let grid = logits_of(deref(logits, "logits")?)?;
        let p = params_of(deref(params, "params")?)?;
        let probs = apply_calibration(&grid, &p)?;
        put(out, boxed(Tensor::from_matrix(probs.as_matrix())?), "out")
    })
}

/// Corpus statistics of an N×K logit tensor under `params`.
#[no_mangle]
pub unsafe extern "C" fn l2c_calibrated_stats(
    logits: *const L2cTensor,
    params: *const L2cCalibrationParams,
    out: *mut L2cTargetStats,
) -> L2cStatus {
    guard(|| {
        let grid = logits_of(deref(logits, "logits")?)?;
        let p = params_of(deref(params, "params")?)?;
        let s = calibrated_stats(std::slice::from_ref(&grid), &p)?;
        put(out, stats_to_c(&s), "out")
    })
}

/// Expected code vectors (N×D) and uncertainty features (N×4).
#[no_mangle]
pub unsafe extern "C" fn l2c_lcdm_map(
    logits: *const L2cTensor,
    codebook: *const L2cTensor,
    params: *const L2cCalibrationParams,
    out_codes: *mut *mut L2cTensor,
    out_uncertainty: *mut *mut L2cTensor,
) -> L2cStatus {
    guard(|| {
        if out_codes.is_null() || out_uncertainty.is_null() {
            return Err(Failure::Null("out"));
        }
        let grid = logits_of(deref(logits, "logits")?)?;
        let cb = Codebook::new(matrix_of(deref(codebook, "codebook")?)?)?;
        let p = params_of(deref(params, "params")?)?;
        let out = lcdm_pipeline(&grid, &cb, &p)?;
        let v = Tensor::from_matrix(&out.codes)?;
        let u = Tensor::from_matrix(&out.uncertainty)?;
        put(out_codes, boxed(v), "out_codes")?;
        put(out_uncertainty, boxed(u), "out_uncertainty")
    })
}

/// Statistic-matching search with default settings. A non-bracketed scale
/// search still succeeds and reports `bracketed = 0`.
#[no_mangle]
pub unsafe extern "C" fn l2c_calibrate(
    logits: *const L2cTensor,
    target: *const L2cTargetStats,
    out: *mut L2cCalibrationOutcome,
) -> L2cStatus {
    guard(|| {
        let grid = logits_of(deref(logits, "logits")?)?;
        let t = deref(target, "target")?;
        let target = TargetStats {
            mean_entropy: t.mean_entropy,
            mean_conf: t.mean_conf,
            p95_conf: t.p95_conf,
            p95_entropy: t.p95_entropy,
        };
        target.validate()?;
        let r = calibrate_search(std::slice::from_ref(&grid), &target, &StatsConfig::default())?;
        let c = L2cCalibrationOutcome {
            params: params_to_c(&r.params),
            loss: r.loss,
            achieved: stats_to_c(&r.achieved),
            bracketed: r.bisection.bracketed as u8,
        };
        put(out, c, "out")
    })
}
