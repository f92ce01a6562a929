//! C ABI bindings for the engine: opaque model handles, status codes, and CSV
//! string outputs so any language with a C FFI can drive enumeration,
//! verification and simulation.
//!
//! Conventions:
//! * every fallible call returns an [`ImrStatus`]; `ImrStatusOk` is zero;
//! * the last error message per thread is available via [`imr_last_error`]
//!   until the next failing call on the same thread;
//! * strings returned through `char**` are owned by the caller and must be
//!   released with [`imr_string_free`];
//! * handles from `imr_model_*` constructors must be released with
//!   [`imr_model_free`]. Handles are immutable and safe to share across
//!   threads for concurrent reads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};

use imr::cli;
use imr::document::{DocError, ModelDocument};
use imr::engine::Session;
use imr::model::CompiledModel;
use imr::montecarlo::{estimate_projection, simulate_paths, SimulationConfig};
use imr::representation::{max_abs_residual, verify_representation_xi};

/// Status codes of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ImrStatus {
    ImrStatusOk = 0,
    ImrStatusNullPointer = 1,
    ImrStatusInvalidUtf8 = 2,
    ImrStatusParseError = 3,
    ImrStatusValidationError = 4,
    ImrStatusUnknownTarget = 5,
    ImrStatusIoError = 6,
    ImrStatusInternalError = 7,
}

/// Opaque handle: a parsed document together with its compiled tree.
pub struct ImrModel {
    document: ModelDocument,
    compiled: CompiledModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("invalid error message").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &DocError) -> ImrStatus {
    match err {
        DocError::Io { .. } => ImrStatus::ImrStatusIoError,
        DocError::Json(_) => ImrStatus::ImrStatusParseError,
        DocError::UnknownTarget { .. } => ImrStatus::ImrStatusUnknownTarget,
        _ => ImrStatus::ImrStatusValidationError,
    }
}

/// # Safety
/// `ptr` must be null or a valid, NUL-terminated C string.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, ImrStatus> {
    if ptr.is_null() {
        set_error("null pointer argument".to_string());
        return Err(ImrStatus::ImrStatusNullPointer);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("argument is not valid UTF-8".to_string());
        ImrStatus::ImrStatusInvalidUtf8
    })
}

fn give_string(out: *mut *mut c_char, text: String) -> ImrStatus {
    if out.is_null() {
        set_error("null output pointer".to_string());
        return ImrStatus::ImrStatusNullPointer;
    }
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            ImrStatus::ImrStatusOk
        }
        Err(_) => {
            set_error("output contains interior NUL".to_string());
            ImrStatus::ImrStatusInternalError
        }
    }
}

fn build_handle(document: ModelDocument, out: *mut *mut ImrModel) -> ImrStatus {
    if out.is_null() {
        set_error("null output pointer".to_string());
        return ImrStatus::ImrStatusNullPointer;
    }
    match document.compile() {
        Ok(compiled) => {
            let handle = Box::new(ImrModel { document, compiled });
            unsafe { *out = Box::into_raw(handle) };
            ImrStatus::ImrStatusOk
        }
        Err(err) => {
            set_error(err.to_string());
            status_of(&err)
        }
    }
}

/// Message of the most recent failure on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn imr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Parse and compile a model document from a JSON string.
///
/// # Safety
/// `json` must be a valid NUL-terminated C string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn imr_model_from_json(
    json: *const c_char,
    out: *mut *mut ImrModel,
) -> ImrStatus {
    let text = match unsafe { read_str(json) } {
        Ok(t) => t,
        Err(status) => return status,
    };
    match ModelDocument::from_json(text) {
        Ok(document) => build_handle(document, out),
        Err(err) => {
            set_error(err.to_string());
            status_of(&err)
        }
    }
}

/// Parse and compile a model document from a file path.
///
/// # Safety
/// `path` must be a valid NUL-terminated C string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn imr_model_from_file(
    path: *const c_char,
    out: *mut *mut ImrModel,
) -> ImrStatus {
    let path = match unsafe { read_str(path) } {
        Ok(t) => t,
        Err(status) => return status,
    };
    match ModelDocument::from_file(path) {
        Ok(document) => build_handle(document, out),
        Err(err) => {
            set_error(err.to_string());
            status_of(&err)
        }
    }
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle obtained from an `imr_model_*` constructor
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn imr_model_free(model: *mut ImrModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of positive-probability paths.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn imr_model_path_count(
    model: *const ImrModel,
    out: *mut usize,
) -> ImrStatus {
    if model.is_null() || out.is_null() {
        set_error("null pointer argument".to_string());
        return ImrStatus::ImrStatusNullPointer;
    }
    unsafe { *out = (*model).compiled.paths().len() };
    ImrStatus::ImrStatusOk
}

/// Number of grid points (including the origin).
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn imr_model_grid_len(
    model: *const ImrModel,
    out: *mut usize,
) -> ImrStatus {
    if model.is_null() || out.is_null() {
        set_error("null pointer argument".to_string());
        return ImrStatus::ImrStatusNullPointer;
    }
    unsafe { *out = (*model).compiled.grid().len() };
    ImrStatus::ImrStatusOk
}

/// Path table CSV (`path_id,probability,events,...`).
///
/// # Safety
/// `model` must be a live handle; `out` receives a string owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn imr_paths_csv(
    model: *const ImrModel,
    out: *mut *mut c_char,
) -> ImrStatus {
    if model.is_null() {
        set_error("null model handle".to_string());
        return ImrStatus::ImrStatusNullPointer;
    }
    let text = cli::paths_csv(unsafe { &(*model).compiled });
    give_string(out, text)
}

/// Information-state table CSV (`path_id,t,side,active_set,marks`).
///
/// # Safety
/// `model` must be a live handle; `out` receives a string owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn imr_states_csv(
    model: *const ImrModel,
    out: *mut *mut c_char,
) -> ImrStatus {
    if model.is_null() {
        set_error("null model handle".to_string());
        return ImrStatus::ImrStatusNullPointer;
    }
    let text = cli::states_csv(unsafe { &(*model).compiled });
    give_string(out, text)
}

/// Verify the two-sided decomposition of a named payoff. Writes the largest
/// absolute residual to `max_residual`; when `report_csv` is non-null it also
/// receives the full per-path ledger.
///
/// # Safety
/// `model` must be a live handle, `payoff` a valid C string, `max_residual`
/// valid for a write; `report_csv` may be null.
#[no_mangle]
pub unsafe extern "C" fn imr_verify_payoff(
    model: *const ImrModel,
    payoff: *const c_char,
    max_residual: *mut f64,
    report_csv: *mut *mut c_char,
) -> ImrStatus {
    if model.is_null() || max_residual.is_null() {
        set_error("null pointer argument".to_string());
        return ImrStatus::ImrStatusNullPointer;
    }
    let name = match unsafe { read_str(payoff) } {
        Ok(t) => t,
        Err(status) => return status,
    };
    let handle = unsafe { &*model };
    let values = match handle.document.payoff_values(&handle.compiled, name) {
        Ok(v) => v,
        Err(err) => {
            set_error(err.to_string());
            return status_of(&err);
        }
    };
    let session = Session::new(&handle.compiled);
    let xi = session.register_values(values);
    let reports = verify_representation_xi(&session, xi);
    unsafe { *max_residual = max_abs_residual(&reports) };
    if report_csv.is_null() {
        ImrStatus::ImrStatusOk
    } else {
        give_string(report_csv, cli::report_csv(&reports))
    }
}

/// Simulate `n_paths` draws under the seed and return the per-cell projection
/// estimates of a named payoff as CSV (`t,state_key,estimate,stderr,n_cell`).
///
/// # Safety
/// `model` must be a live handle, `payoff` a valid C string, `out` valid to
/// receive a caller-owned string.
#[no_mangle]
pub unsafe extern "C" fn imr_simulate_csv(
    model: *const ImrModel,
    seed: u64,
    n_paths: usize,
    payoff: *const c_char,
    out: *mut *mut c_char,
) -> ImrStatus {
    if model.is_null() {
        set_error("null model handle".to_string());
        return ImrStatus::ImrStatusNullPointer;
    }
    if n_paths == 0 {
        set_error("n_paths must be positive".to_string());
        return ImrStatus::ImrStatusValidationError;
    }
    let name = match unsafe { read_str(payoff) } {
        Ok(t) => t,
        Err(status) => return status,
    };
    let handle = unsafe { &*model };
    let values = match handle.document.payoff_values(&handle.compiled, name) {
        Ok(v) => v,
        Err(err) => {
            set_error(err.to_string());
            return status_of(&err);
        }
    };
    let draws = simulate_paths(&handle.compiled, &SimulationConfig { seed, n_paths });
    let estimates = estimate_projection(&handle.compiled, &draws, &values);
    give_string(out, cli::estimates_csv(&handle.compiled, &estimates))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string obtained from this library that has not been
/// freed yet.
#[no_mangle]
pub unsafe extern "C" fn imr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
