//! C ABI over the pcan inference path and geometry helpers.
//!
//! Every function returns a [`PcanStatus`]; on failure the message is
//! available from [`pcan_last_error`] on the same thread. Models are opaque
//! handles created by [`pcan_model_load`] and released with
//! [`pcan_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pcan::geometry::{giou, iou, Box as BBox};
use pcan::harness::Checkpoint;
use pcan::model::InferenceModel;
use pcan::synthdata::grammar::token_id;
use pcan::synthdata::Array3;
use pcan::PcanError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcanStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    OutOfVocabulary = 6,
    Panic = 7,
    Internal = 8,
}

/// Loaded model, inference path only.
pub struct PcanModel {
    inner: InferenceModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &PcanError) -> PcanStatus {
    match e {
        PcanError::InvalidBox(_) | PcanError::OutOfRange(_) | PcanError::Config(_) | PcanError::ConventionMismatch(..) => {
            PcanStatus::InvalidArgument
        }
        PcanError::ShapeMismatch(_) => PcanStatus::ShapeMismatch,
        PcanError::OutOfVocabulary { .. } => PcanStatus::OutOfVocabulary,
        PcanError::Io { .. } => PcanStatus::Io,
        PcanError::MissingCheckpoint(_) | PcanError::Json(_) => PcanStatus::Checkpoint,
        _ => PcanStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PcanStatus, String)>) -> PcanStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PcanStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("panic inside pcan");
            PcanStatus::Panic
        }
    }
}

fn lib(e: PcanError) -> (PcanStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PcanStatus, String) {
    (PcanStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pcan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pcan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint written by `pcan train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pcan_model_load(path: *const c_char, out: *mut *mut PcanModel) -> PcanStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| (PcanStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let inner = Checkpoint::load(Path::new(p)).and_then(|c| c.inference_model()).map_err(lib)?;
        *out = Box::into_raw(Box::new(PcanModel { inner }));
        Ok(())
    })
}

/// Release a model; null is ignored.
///
/// # Safety
/// `model` must come from [`pcan_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pcan_model_free(model: *mut PcanModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pcan_model_param_count(model: *const PcanModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.store().scalar_count())
}

/// Segment the object described by `tokens` in an `height x width x 3`
/// row-major float image in `[0, 1]`.
///
/// `out_mask` receives `height * width` bytes (0 or 1). `out_box` (4 doubles,
/// center-size normalized) and `out_score` may be null.
///
/// # Safety
/// All non-null pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn pcan_model_infer(
    model: *const PcanModel,
    image: *const f32,
    height: usize,
    width: usize,
    tokens: *const u32,
    n_tokens: usize,
    out_mask: *mut u8,
    out_box: *mut f64,
    out_score: *mut f64,
) -> PcanStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if image.is_null() {
            return Err(null("image"));
        }
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        if out_mask.is_null() {
            return Err(null("out_mask"));
        }
        let n = height.checked_mul(width).and_then(|v| v.checked_mul(3)).ok_or((PcanStatus::InvalidArgument, "image too large".into()))?;
        let pixels = std::slice::from_raw_parts(image, n).to_vec();
        let toks = std::slice::from_raw_parts(tokens, n_tokens);
        let p = m.inner.predict(&Array3::new(height, width, 3, pixels), toks).map_err(lib)?;
        std::slice::from_raw_parts_mut(out_mask, height * width).copy_from_slice(&p.mask);
        if !out_box.is_null() {
            std::slice::from_raw_parts_mut(out_box, 4).copy_from_slice(&p.bbox);
        }
        if let Some(s) = out_score.as_mut() {
            *s = p.score;
        }
        Ok(())
    })
}

/// Vocabulary id of a lower-case word.
///
/// # Safety
/// `word` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pcan_token_id(word: *const c_char, out: *mut u32) -> PcanStatus {
    guard(|| {
        if word.is_null() {
            return Err(null("word"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let w = CStr::from_ptr(word).to_str().map_err(|_| (PcanStatus::InvalidArgument, "word is not UTF-8".to_string()))?;
        *out = token_id(w).ok_or_else(|| (PcanStatus::OutOfVocabulary, format!("`{w}` is not in the vocabulary")))?;
        Ok(())
    })
}

unsafe fn corner_box(p: *const f64, what: &str) -> Result<BBox, (PcanStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let c = std::slice::from_raw_parts(p, 4);
    BBox::corner(c[0], c[1], c[2], c[3]).map_err(lib)
}

/// IoU of two normalized corner boxes `[x1, y1, x2, y2]`.
///
/// # Safety
/// `a` and `b` must point to 4 doubles, `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pcan_iou(a: *const f64, b: *const f64, out: *mut f64) -> PcanStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = iou(&corner_box(a, "a")?, &corner_box(b, "b")?).map_err(lib)?;
        Ok(())
    })
}

/// Generalized IoU of two normalized corner boxes.
///
/// # Safety
/// As [`pcan_iou`].
#[no_mangle]
pub unsafe extern "C" fn pcan_giou(a: *const f64, b: *const f64, out: *mut f64) -> PcanStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = giou(&corner_box(a, "a")?, &corner_box(b, "b")?).map_err(lib)?;
        Ok(())
    })
}
