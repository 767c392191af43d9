//! C ABI over fgboot checkpoints and dataset files.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `*_free`. Every fallible call returns an [`FgbStatus`]; on failure the
//! message is available from [`fgb_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fgboot::data::{self, Dataset};
use fgboot::trainer::TrainedModel;
use fgboot::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    BufferTooSmall = 6,
    OutOfRange = 7,
    Internal = 8,
}

/// A trained model loaded from a checkpoint.
pub struct FgbModel {
    inner: TrainedModel,
}

/// A dataset loaded from the text format.
pub struct FgbDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> FgbStatus {
    match e {
        Error::Io(_) => FgbStatus::Io,
        Error::Parse { .. } => FgbStatus::Parse,
        Error::Checkpoint(_) => FgbStatus::Checkpoint,
        Error::Input(_) | Error::Config(_) => FgbStatus::InvalidArgument,
        _ => FgbStatus::Internal,
    }
}

struct Fail(FgbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: FgbStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, recording failures and panics in the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FgbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FgbStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FgbStatus::Internal
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return fail(FgbStatus::NullPointer, "path is null");
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => fail(FgbStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

unsafe fn model_arg<'a>(m: *const FgbModel) -> Result<&'a TrainedModel, Fail> {
    match m.as_ref() {
        Some(m) => Ok(&m.inner),
        None => fail(FgbStatus::NullPointer, "model handle is null"),
    }
}

unsafe fn dataset_arg<'a>(d: *const FgbDataset) -> Result<&'a Dataset, Fail> {
    match d.as_ref() {
        Some(d) => Ok(&d.inner),
        None => fail(FgbStatus::NullPointer, "dataset handle is null"),
    }
}

unsafe fn features_arg<'a>(model: &TrainedModel, x: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    if x.is_null() {
        return fail(FgbStatus::NullPointer, "feature pointer is null");
    }
    if len != model.input_dim() {
        return fail(
            FgbStatus::InvalidArgument,
            format!("expected {} features, got {len}", model.input_dim()),
        );
    }
    Ok(std::slice::from_raw_parts(x, len))
}

unsafe fn write_out(values: &[f64], out: *mut f64, out_len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return fail(FgbStatus::NullPointer, "output pointer is null");
    }
    if out_len < values.len() {
        return fail(FgbStatus::BufferTooSmall, format!("output needs {} slots, got {out_len}", values.len()));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next fgboot call on the same thread.
#[no_mangle]
pub extern "C" fn fgb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fgb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fgb_model_load(path: *const c_char, out: *mut *mut FgbModel) -> FgbStatus {
    guard(|| {
        if out.is_null() {
            return fail(FgbStatus::NullPointer, "output handle pointer is null");
        }
        *out = ptr::null_mut();
        let model = data::load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(FgbModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`fgb_model_load`] and not be freed twice. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn fgb_model_free(model: *mut FgbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature dimension the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fgb_model_input_dim(model: *const FgbModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fgb_model_embed_dim(model: *const FgbModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.embed_dim)
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fgb_model_n_categories(model: *const FgbModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.n_categories)
}

/// Writes the unit-norm embedding of `x` into `out[0..embed_dim]`.
///
/// # Safety
/// `x` must hold `x_len` doubles and `out` have room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn fgb_model_embed(
    model: *const FgbModel,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> FgbStatus {
    guard(|| {
        let m = model_arg(model)?;
        let e = m.embed(features_arg(m, x, x_len)?)?;
        write_out(&e, out, out_len)
    })
}

/// Writes per-category confidences of `x` into `out[0..n_categories]`.
///
/// # Safety
/// As for [`fgb_model_embed`].
#[no_mangle]
pub unsafe extern "C" fn fgb_model_score(
    model: *const FgbModel,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> FgbStatus {
    guard(|| {
        let m = model_arg(model)?;
        let p = m.score(features_arg(m, x, x_len)?)?;
        write_out(&p.0, out, out_len)
    })
}

/// Most confident category of `x`; ties go to the lowest index.
///
/// # Safety
/// `x` must hold `x_len` doubles and `category` be writable.
#[no_mangle]
pub unsafe extern "C" fn fgb_model_predict(
    model: *const FgbModel,
    x: *const f64,
    x_len: usize,
    category: *mut usize,
) -> FgbStatus {
    guard(|| {
        let m = model_arg(model)?;
        if category.is_null() {
            return fail(FgbStatus::NullPointer, "category pointer is null");
        }
        *category = m.predict(features_arg(m, x, x_len)?)?;
        Ok(())
    })
}

/// Mean per-class accuracy over the labeled samples of `dataset`.
///
/// # Safety
/// Handles must be live and `accuracy` writable.
#[no_mangle]
pub unsafe extern "C" fn fgb_model_evaluate(
    model: *const FgbModel,
    dataset: *const FgbDataset,
    accuracy: *mut f64,
) -> FgbStatus {
    guard(|| {
        let m = model_arg(model)?;
        let d = dataset_arg(dataset)?;
        if accuracy.is_null() {
            return fail(FgbStatus::NullPointer, "accuracy pointer is null");
        }
        if d.input_dim != m.input_dim() {
            return fail(FgbStatus::InvalidArgument, "dataset and model differ in feature dimension");
        }
        *accuracy = m.evaluate(&d.samples)?.mean_accuracy;
        Ok(())
    })
}

/// Loads a dataset file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fgb_dataset_load(path: *const c_char, out: *mut *mut FgbDataset) -> FgbStatus {
    guard(|| {
        if out.is_null() {
            return fail(FgbStatus::NullPointer, "output handle pointer is null");
        }
        *out = ptr::null_mut();
        let ds = data::load_dataset(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(FgbDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`fgb_dataset_load`] and not be freed twice.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fgb_dataset_free(dataset: *mut FgbDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fgb_dataset_len(dataset: *const FgbDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fgb_dataset_dim(dataset: *const FgbDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.input_dim)
}

/// Copies the features of sample `index` and its label (-1 when
/// unlabeled). `label` may be null.
///
/// # Safety
/// `out` must have room for `out_len` doubles; `label` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fgb_dataset_sample(
    dataset: *const FgbDataset,
    index: usize,
    out: *mut f64,
    out_len: usize,
    label: *mut i64,
) -> FgbStatus {
    guard(|| {
        let d = dataset_arg(dataset)?;
        let Some(s) = d.samples.get(index) else {
            return fail(FgbStatus::OutOfRange, format!("sample {index} of {}", d.len()));
        };
        write_out(&s.features, out, out_len)?;
        if !label.is_null() {
            *label = s.label.map_or(-1, |l| l as i64);
        }
        Ok(())
    })
}
