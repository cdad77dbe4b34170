//! C ABI for the slidemamba inference engine.
//!
//! Opaque handles wrap the model and bag types; every fallible call returns
//! an [`SmStatus`] and stores a human-readable message retrievable through
//! [`sm_last_error_message`]. Handles are not thread-safe; use one per
//! thread. The generated header lands in `include/slidemamba.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use slidemamba::data::{read_bag, TileBag};
use slidemamba::engine::{chunk_iter, forward_stream, load_checkpoint, ModelParams};
use slidemamba::export::export_attention;
use slidemamba::hilbert::{order_bag, OrderStrategy};
use slidemamba::train::gather_rows;

/// Result codes for every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmStatus {
    SmOk = 0,
    SmNullArgument = 1,
    SmIoError = 2,
    SmFormatError = 3,
    SmInvalidArgument = 4,
    SmInferenceError = 5,
}

/// Opaque trained model handle.
pub struct SmModel {
    params: ModelParams,
}

/// Opaque tile-bag handle.
pub struct SmBag {
    bag: TileBag,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("error message had NUL").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SmStatus, err: impl std::fmt::Display) -> SmStatus {
    set_error(err.to_string());
    status
}

unsafe fn path_from<'a>(ptr: *const c_char) -> Result<&'a Path, SmStatus> {
    if ptr.is_null() {
        set_error("null path".into());
        return Err(SmStatus::SmNullArgument);
    }
    // SAFETY: caller guarantees a valid NUL-terminated string.
    let s = unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("path is not valid UTF-8".into());
        SmStatus::SmInvalidArgument
    })?;
    Ok(Path::new(s))
}

unsafe fn strategy_from(ptr: *const c_char) -> Result<OrderStrategy, SmStatus> {
    if ptr.is_null() {
        return Ok(OrderStrategy::Hilbert);
    }
    // SAFETY: caller guarantees a valid NUL-terminated string.
    let s = unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("ordering is not valid UTF-8".into());
        SmStatus::SmInvalidArgument
    })?;
    OrderStrategy::parse(s, 0).map_err(|e| fail(SmStatus::SmInvalidArgument, e))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a trained checkpoint.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
/// A returned handle must be released with [`sm_model_free`].
#[no_mangle]
pub unsafe extern "C" fn sm_model_load(path: *const c_char, out: *mut *mut SmModel) -> SmStatus {
    if out.is_null() {
        return fail(SmStatus::SmNullArgument, "null output pointer");
    }
    let path = match unsafe { path_from(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_checkpoint(path) {
        Ok(params) => {
            unsafe { *out = Box::into_raw(Box::new(SmModel { params })) };
            SmStatus::SmOk
        }
        Err(e @ slidemamba::Error::Io(_)) => fail(SmStatus::SmIoError, e),
        Err(e) => fail(SmStatus::SmFormatError, e),
    }
}

/// # Safety
/// `model` must be NULL or a pointer from [`sm_model_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sm_model_free(model: *mut SmModel) {
    if !model.is_null() {
        // SAFETY: ownership returns to Rust and the box drops.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of model outputs (classes, or 1 for a risk head).
///
/// # Safety
/// `model` must be a live handle from [`sm_model_load`].
#[no_mangle]
pub unsafe extern "C" fn sm_model_num_outputs(model: *const SmModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.params.dims.num_outputs
}

/// Load a bag file (binary `.slbg` format).
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
/// A returned handle must be released with [`sm_bag_free`].
#[no_mangle]
pub unsafe extern "C" fn sm_bag_load(path: *const c_char, out: *mut *mut SmBag) -> SmStatus {
    if out.is_null() {
        return fail(SmStatus::SmNullArgument, "null output pointer");
    }
    let path = match unsafe { path_from(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match read_bag(path) {
        Ok(bag) => {
            unsafe { *out = Box::into_raw(Box::new(SmBag { bag })) };
            SmStatus::SmOk
        }
        Err(e @ slidemamba::Error::Io(_)) => fail(SmStatus::SmIoError, e),
        Err(e) => fail(SmStatus::SmFormatError, e),
    }
}

/// # Safety
/// `bag` must be NULL or a pointer from [`sm_bag_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sm_bag_free(bag: *mut SmBag) {
    if !bag.is_null() {
        // SAFETY: ownership returns to Rust and the box drops.
        drop(unsafe { Box::from_raw(bag) });
    }
}

/// # Safety
/// `bag` must be a live handle from [`sm_bag_load`].
#[no_mangle]
pub unsafe extern "C" fn sm_bag_num_tiles(bag: *const SmBag) -> usize {
    if bag.is_null() {
        return 0;
    }
    unsafe { &*bag }.bag.num_tiles()
}

/// Memory-bounded streaming inference. Tiles are serialized under
/// `ordering` ("hilbert", "zorder", "rowmajor", "random"; NULL means
/// hilbert), chunked, and streamed in mini-batches of `inf_batch` chunks.
/// Logits are written to `logits_out`, which must hold
/// [`sm_model_num_outputs`] values.
///
/// # Safety
/// `model` and `bag` must be live handles; `logits_out` must point to at
/// least `logits_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sm_infer(
    model: *const SmModel,
    bag: *const SmBag,
    inf_batch: u32,
    ordering: *const c_char,
    logits_out: *mut f64,
    logits_len: usize,
) -> SmStatus {
    if model.is_null() || bag.is_null() || logits_out.is_null() {
        return fail(SmStatus::SmNullArgument, "null model, bag, or output buffer");
    }
    let model = unsafe { &*model };
    let bag = unsafe { &*bag };
    if logits_len < model.params.dims.num_outputs {
        return fail(
            SmStatus::SmInvalidArgument,
            format!(
                "output buffer holds {logits_len}, model has {} outputs",
                model.params.dims.num_outputs
            ),
        );
    }
    let strategy = match unsafe { strategy_from(ordering) } {
        Ok(s) => s,
        Err(s) => return s,
    };
    let result = order_bag(&bag.bag, strategy).and_then(|order| {
        let x = gather_rows(&bag.bag.features, &order.perm);
        forward_stream(
            chunk_iter(&x, model.params.dims.chunk_len),
            &model.params,
            inf_batch.max(1) as usize,
            None,
            false,
        )
    });
    match result {
        Ok(out) => {
            let logits = out.logits.data();
            unsafe { ptr::copy_nonoverlapping(logits.as_ptr(), logits_out, logits.len()) };
            SmStatus::SmOk
        }
        Err(e) => fail(SmStatus::SmInferenceError, e),
    }
}

/// Per-tile attention scores in the bag's tile order, a distribution over
/// the bag. `scores_out` must hold [`sm_bag_num_tiles`] values.
///
/// # Safety
/// `model` and `bag` must be live handles; `scores_out` must point to at
/// least `scores_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sm_attention_scores(
    model: *const SmModel,
    bag: *const SmBag,
    ordering: *const c_char,
    scores_out: *mut f64,
    scores_len: usize,
) -> SmStatus {
    if model.is_null() || bag.is_null() || scores_out.is_null() {
        return fail(SmStatus::SmNullArgument, "null model, bag, or output buffer");
    }
    let model = unsafe { &*model };
    let bag = unsafe { &*bag };
    let n = bag.bag.num_tiles();
    if scores_len < n {
        return fail(
            SmStatus::SmInvalidArgument,
            format!("score buffer holds {scores_len}, bag has {n} tiles"),
        );
    }
    let strategy = match unsafe { strategy_from(ordering) } {
        Ok(s) => s,
        Err(s) => return s,
    };
    match export_attention(&model.params, &bag.bag, strategy) {
        Ok(scores) => {
            let out = unsafe { std::slice::from_raw_parts_mut(scores_out, n) };
            out.fill(0.0);
            for s in scores {
                out[s.tile] = s.score;
            }
            SmStatus::SmOk
        }
        Err(e) => fail(SmStatus::SmInferenceError, e),
    }
}
