//! C ABI over `foldctc`.
//!
//! Every fallible function returns a [`FoldctcStatus`]; on failure the
//! message is available from [`foldctc_last_error_message`] on the same
//! thread until the next call. Token outputs use caller-provided buffers:
//! when `capacity` is too small the call returns
//! `FOLDCTC_STATUS_BUFFER_TOO_SMALL` and still writes the required length.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use foldctc::checkpoint::Checkpoint;
use foldctc::ctc::{self, Posteriorgram, TokenSequence};
use foldctc::model::Model;
use foldctc::tensor::Tensor;
use foldctc::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldctcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Format = 5,
    Io = 6,
    Numerical = 7,
    InfeasibleTarget = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Opaque loaded model.
pub struct FoldctcModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> FoldctcStatus {
    match e {
        Error::Shape { .. } => FoldctcStatus::InvalidArgument,
        Error::InfeasibleTarget { .. } => FoldctcStatus::InfeasibleTarget,
        Error::GuardExceeded { .. } => FoldctcStatus::InvalidArgument,
        Error::Format { .. } => FoldctcStatus::Format,
        Error::Config(_) => FoldctcStatus::Config,
        Error::Data(_) => FoldctcStatus::Data,
        Error::Numerical(_) => FoldctcStatus::Numerical,
        Error::Io { .. } => FoldctcStatus::Io,
    }
}

struct Fail(FoldctcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FoldctcStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FoldctcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FoldctcStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FoldctcStatus::NullPointer, format!("{what} is null"))
}

/// Borrow `len` values, allowing a dangling pointer only when `len == 0`.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Tensor, Fail> {
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Fail(FoldctcStatus::InvalidArgument, format!("{what} too large")))?;
    if n == 0 {
        return Err(Fail(FoldctcStatus::InvalidArgument, format!("{what} is empty")));
    }
    let data = slice(p, n, what)?.to_vec();
    Ok(Tensor::matrix(rows, cols, data)?)
}

unsafe fn write_tokens(
    seq: &TokenSequence,
    out: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> Result<(), Fail> {
    if out_len.is_null() {
        return Err(null("out_len"));
    }
    *out_len = seq.len();
    if seq.len() > capacity {
        return Err(Fail(
            FoldctcStatus::BufferTooSmall,
            format!("need {} tokens, capacity {capacity}", seq.len()),
        ));
    }
    if seq.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("out_tokens"));
    }
    for (i, &t) in seq.ids().iter().enumerate() {
        *out.add(i) = t as u32;
    }
    Ok(())
}

/// Load a checkpoint file. On success `*out` owns a model that must be
/// released with [`foldctc_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn foldctc_model_load(path: *const c_char, out: *mut *mut FoldctcModel) -> FoldctcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(FoldctcStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = Checkpoint::read(Path::new(path))?;
        *out = Box::into_raw(Box::new(FoldctcModel { model: ck.model }));
        Ok(())
    })
}

/// Release a model; null is ignored.
///
/// # Safety
/// `model` must come from [`foldctc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn foldctc_model_free(model: *mut FoldctcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trainable scalars, each shared parameter counted once.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn foldctc_model_param_count(model: *const FoldctcModel, out: *mut u64) -> FoldctcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.count_params() as u64;
        Ok(())
    })
}

/// Input feature dimension and output class count (blank included).
///
/// # Safety
/// `model`, `feat_dim` and `classes` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn foldctc_model_dims(
    model: *const FoldctcModel,
    feat_dim: *mut usize,
    classes: *mut usize,
) -> FoldctcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if feat_dim.is_null() || classes.is_null() {
            return Err(null("output"));
        }
        *feat_dim = m.model.config.feat_dim;
        *classes = m.model.config.vocab_size;
        Ok(())
    })
}

/// Best-path transcript of a row-major `frames × feat_dim` feature matrix.
/// `n_repeat == 0` selects the training repeat count; baselines ignore it.
///
/// # Safety
/// `features` must hold `frames * feat_dim` values; `out_tokens` must hold
/// `capacity` values; `model` and `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn foldctc_model_decode(
    model: *const FoldctcModel,
    features: *const f64,
    frames: usize,
    feat_dim: usize,
    n_repeat: u32,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> FoldctcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if feat_dim != m.model.config.feat_dim {
            return Err(Fail(
                FoldctcStatus::InvalidArgument,
                format!("feat_dim {feat_dim}, model expects {}", m.model.config.feat_dim),
            ));
        }
        let x = matrix(features, frames, feat_dim, "features")?;
        let repeat = (n_repeat > 0).then_some(n_repeat as usize);
        let seq = m.model.decode(&x, repeat)?;
        write_tokens(&seq, out_tokens, capacity, out_len)
    })
}

/// Negative log-likelihood of `labels` under a `frames × classes`
/// row-major log-probability matrix; class 0 is the blank.
///
/// # Safety
/// `log_probs` must hold `frames * classes` values, `labels` `n_labels`
/// values, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn foldctc_ctc_loss(
    log_probs: *const f64,
    frames: usize,
    classes: usize,
    labels: *const u32,
    n_labels: usize,
    out: *mut f64,
) -> FoldctcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let z = Posteriorgram::from_log_probs(matrix(log_probs, frames, classes, "log_probs")?)?;
        let ids = slice(labels, n_labels, "labels")?
            .iter()
            .map(|&l| l as usize)
            .collect();
        let y = TokenSequence::new(ids)?;
        *out = ctc::ctc_loss(&z, &y)?;
        Ok(())
    })
}

/// Per-frame argmax then collapse.
///
/// # Safety
/// As for [`foldctc_ctc_loss`]; `out_tokens` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn foldctc_best_path(
    log_probs: *const f64,
    frames: usize,
    classes: usize,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> FoldctcStatus {
    guard(|| {
        let z = Posteriorgram::from_log_probs(matrix(log_probs, frames, classes, "log_probs")?)?;
        write_tokens(&ctc::best_path_decode(&z), out_tokens, capacity, out_len)
    })
}

/// Message for the last failure on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn foldctc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}
