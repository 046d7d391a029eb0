//! C interface to mask loading, the geometric baseline and the trained model.
//!
//! Objects are opaque handles created by `tt_*_new`/`tt_*_read`/`tt_*_load`
//! and released with the matching `tt_*_free`. Every fallible call returns a
//! [`TtStatus`]; on failure a message is available from [`tt_last_error`]
//! until the next failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use tooltip_core::dataset::{self, PartMask, Point, TipPair};
use tooltip_core::{baseline, eval, model};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Baseline = 5,
    Model = 6,
    Panic = 7,
}

/// Tip coordinates in pixels, `x` to the right and `y` down.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TtTips {
    pub left_x: f64,
    pub left_y: f64,
    pub right_x: f64,
    pub right_y: f64,
}

impl From<TipPair> for TtTips {
    fn from(t: TipPair) -> Self {
        Self {
            left_x: t.left.x,
            left_y: t.left.y,
            right_x: t.right.x,
            right_y: t.right.y,
        }
    }
}

impl From<TtTips> for TipPair {
    fn from(t: TtTips) -> Self {
        TipPair::new(Point::new(t.left_x, t.left_y), Point::new(t.right_x, t.right_y))
    }
}

/// Opaque part-label mask.
pub struct TtMask(PartMask);

/// Opaque trained model.
pub struct TtModel(model::ToolTipNet<f32>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: TtStatus, msg: impl ToString) -> TtStatus {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
    status
}

fn guard(f: impl FnOnce() -> TtStatus) -> TtStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(TtStatus::Panic, "internal panic"))
}

fn dataset_status(e: &dataset::DatasetError) -> TtStatus {
    match e {
        dataset::DatasetError::Io { .. } => TtStatus::Io,
        _ => TtStatus::Format,
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, TtStatus> {
    if path.is_null() {
        return Err(fail(TtStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(TtStatus::InvalidArgument, "path is not UTF-8"))
}

/// Message for the last failing call on this thread; empty if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn tt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads a binary PGM label mask.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tt_mask_read(path: *const c_char, out: *mut *mut TtMask) -> TtStatus {
    guard(|| {
        if out.is_null() {
            return fail(TtStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match dataset::read_mask(path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(TtMask(m)));
                TtStatus::Ok
            }
            Err(e) => fail(dataset_status(&e), e),
        }
    })
}

/// Builds a mask from `width * height` row-major labels in `0..=3`.
///
/// # Safety
/// `labels` must point to `width * height` bytes and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn tt_mask_new(labels: *const u8, width: usize, height: usize, out: *mut *mut TtMask) -> TtStatus {
    guard(|| {
        if labels.is_null() || out.is_null() {
            return fail(TtStatus::NullPointer, "labels or out is null");
        }
        let Some(n) = width.checked_mul(height) else {
            return fail(TtStatus::InvalidArgument, "size overflows");
        };
        let data = std::slice::from_raw_parts(labels, n).to_vec();
        match PartMask::new(width, height, data) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(TtMask(m)));
                TtStatus::Ok
            }
            Err(e) => fail(TtStatus::InvalidArgument, e),
        }
    })
}

/// # Safety
/// `mask` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tt_mask_free(mask: *mut TtMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Width in pixels, or 0 for null.
///
/// # Safety
/// `mask` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tt_mask_width(mask: *const TtMask) -> usize {
    mask.as_ref().map_or(0, |m| m.0.width())
}

/// Height in pixels, or 0 for null.
///
/// # Safety
/// `mask` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tt_mask_height(mask: *const TtMask) -> usize {
    mask.as_ref().map_or(0, |m| m.0.height())
}

/// Principal-axis baseline. `degenerate` (optional) receives 1 when fewer
/// than two jaw components were found and both tips coincide.
///
/// # Safety
/// `mask` must be a live handle; `out` valid; `degenerate` null or valid.
#[no_mangle]
pub unsafe extern "C" fn tt_baseline_detect(mask: *const TtMask, out: *mut TtTips, degenerate: *mut i32) -> TtStatus {
    guard(|| {
        let (Some(mask), false) = (mask.as_ref(), out.is_null()) else {
            return fail(TtStatus::NullPointer, "mask or out is null");
        };
        match baseline::detect_tips(&mask.0) {
            Ok(r) => {
                *out = r.tips.into();
                if !degenerate.is_null() {
                    *degenerate = r.degenerate as i32;
                }
                TtStatus::Ok
            }
            Err(e) => fail(TtStatus::Baseline, e),
        }
    })
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tt_model_load(path: *const c_char, out: *mut *mut TtModel) -> TtStatus {
    guard(|| {
        if out.is_null() {
            return fail(TtStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match model::ToolTipNet::load(path) {
            Ok(net) => {
                *out = Box::into_raw(Box::new(TtModel(net)));
                TtStatus::Ok
            }
            Err(e) => fail(TtStatus::Model, e),
        }
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tt_model_free(model: *mut TtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Soft-argmax tip prediction for one mask.
///
/// # Safety
/// `model` and `mask` must be live handles and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tt_model_predict(model: *const TtModel, mask: *const TtMask, out: *mut TtTips) -> TtStatus {
    guard(|| {
        let (Some(model), Some(mask), false) = (model.as_ref(), mask.as_ref(), out.is_null()) else {
            return fail(TtStatus::NullPointer, "model, mask or out is null");
        };
        match model.0.predict(&mask.0) {
            Ok(p) => {
                *out = p.tips.into();
                TtStatus::Ok
            }
            Err(e) => fail(TtStatus::Model, e),
        }
    })
}

/// Swap-invariant RMSE between two tip pairs; NaN if either is null.
///
/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn tt_frame_rmse(pred: *const TtTips, gt: *const TtTips) -> f64 {
    match (pred.as_ref(), gt.as_ref()) {
        (Some(p), Some(g)) => eval::frame_rmse(&(*p).into(), &(*g).into()),
        _ => f64::NAN,
    }
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn tt_status_str(status: TtStatus) -> *const c_char {
    let s: &'static CStr = match status {
        TtStatus::Ok => c"ok",
        TtStatus::NullPointer => c"null pointer",
        TtStatus::InvalidArgument => c"invalid argument",
        TtStatus::Io => c"i/o error",
        TtStatus::Format => c"malformed input",
        TtStatus::Baseline => c"baseline failed",
        TtStatus::Model => c"model error",
        TtStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}
