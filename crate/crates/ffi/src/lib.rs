//! C ABI for the hdnn toolkit.
//!
//! Datasets and models cross the boundary as opaque handles; every fallible
//! call returns an [`HdnnStatus`] and leaves a message retrievable through
//! [`hdnn_last_error_message`] on failure. All functions catch panics, so
//! nothing unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hdnn::cli::{arch_from_json, evaluate_model_on_dataset, train_from_config, RunConfig};
use hdnn::data::{generate_synthetic, read_dataset, write_dataset, FrameDataset};
use hdnn::error::Error;
use hdnn::model::{count_params, read_checkpoint, write_checkpoint, ArchSpec, ModelParams};
use hdnn::verification::{grad_check, reduction_check};

/// Result of every fallible C-API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HdnnStatus {
    Ok = 0,
    /// Bad flags, configuration or architecture.
    InvalidArgument = 1,
    /// Unreadable or malformed data and model files.
    DataError = 2,
    /// A verification run executed and did not pass.
    VerificationFailed = 3,
    NullPointer = 4,
    /// An internal panic was caught at the boundary.
    Panic = 5,
}

/// A loaded frame dataset (opaque).
pub struct HdnnDataset {
    inner: FrameDataset,
}

/// A model checkpoint: architecture plus parameters (opaque).
pub struct HdnnModel {
    arch: ArchSpec,
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_for(err: &Error) -> HdnnStatus {
    match err {
        Error::Config(_) => HdnnStatus::InvalidArgument,
        _ => HdnnStatus::DataError,
    }
}

fn fail(err: &Error) -> HdnnStatus {
    set_error(&err.to_string());
    status_for(err)
}

/// Message for the most recent failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hdnn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.as_ptr(),
        None => std::ptr::null(),
    })
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn hdnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

fn guard(body: impl FnOnce() -> HdnnStatus) -> HdnnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            HdnnStatus::Panic
        }
    }
}

unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, HdnnStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(HdnnStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        HdnnStatus::InvalidArgument
    })
}

fn require<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, HdnnStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(HdnnStatus::NullPointer);
    }
    Ok(unsafe { &*ptr })
}

fn require_out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, HdnnStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(HdnnStatus::NullPointer);
    }
    Ok(unsafe { &mut *ptr })
}

/// Generates a synthetic frame-classification dataset.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn hdnn_dataset_generate(
    classes: u32,
    dim: u32,
    frames: u64,
    mean_dur: f64,
    noise_sigma: f64,
    seed: u64,
    out: *mut *mut HdnnDataset,
) -> HdnnStatus {
    guard(|| {
        let out = match require_out(out, "out") {
            Ok(o) => o,
            Err(s) => return s,
        };
        match generate_synthetic(
            classes as usize,
            dim as usize,
            frames as usize,
            mean_dur,
            noise_sigma,
            seed,
        ) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(HdnnDataset { inner: ds }));
                HdnnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Reads an FDS1 dataset file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdnn_dataset_read(
    path: *const c_char,
    out: *mut *mut HdnnDataset,
) -> HdnnStatus {
    guard(|| {
        let (path, out) = match (cstr(path, "path"), require_out(out, "out")) {
            (Ok(p), Ok(o)) => (p, o),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match read_dataset(Path::new(path)) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(HdnnDataset { inner: ds }));
                HdnnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes a dataset to an FDS1 file.
///
/// # Safety
/// `path` must be NUL-terminated; `dataset` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hdnn_dataset_write(
    dataset: *const HdnnDataset,
    path: *const c_char,
) -> HdnnStatus {
    guard(|| {
        let (ds, path) = match (require(dataset, "dataset"), cstr(path, "path")) {
            (Ok(d), Ok(p)) => (d, p),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match write_dataset(Path::new(path), &ds.inner) {
            Ok(()) => HdnnStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `dataset` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn hdnn_dataset_free(dataset: *mut HdnnDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of frames, or 0 for a null handle.
#[no_mangle]
pub extern "C" fn hdnn_dataset_num_frames(dataset: *const HdnnDataset) -> u64 {
    require(dataset, "dataset").map_or(0, |d| d.inner.num_frames() as u64)
}

/// Per-frame feature dimension, or 0 for a null handle.
#[no_mangle]
pub extern "C" fn hdnn_dataset_feat_dim(dataset: *const HdnnDataset) -> u32 {
    require(dataset, "dataset").map_or(0, |d| d.inner.feat_dim() as u32)
}

/// Number of classes, or 0 for a null handle.
#[no_mangle]
pub extern "C" fn hdnn_dataset_num_classes(dataset: *const HdnnDataset) -> u32 {
    require(dataset, "dataset").map_or(0, |d| d.inner.num_classes as u32)
}

/// Number of segments, or 0 for a null handle.
#[no_mangle]
pub extern "C" fn hdnn_dataset_num_segments(dataset: *const HdnnDataset) -> u64 {
    require(dataset, "dataset").map_or(0, |d| d.inner.segments.len() as u64)
}

/// Loads an HWNN checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdnn_model_read(
    path: *const c_char,
    out: *mut *mut HdnnModel,
) -> HdnnStatus {
    guard(|| {
        let (path, out) = match (cstr(path, "path"), require_out(out, "out")) {
            (Ok(p), Ok(o)) => (p, o),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match read_checkpoint(Path::new(path)) {
            Ok((arch, params)) => {
                *out = Box::into_raw(Box::new(HdnnModel { arch, params }));
                HdnnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes a model to an HWNN checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hdnn_model_write(
    model: *const HdnnModel,
    path: *const c_char,
) -> HdnnStatus {
    guard(|| {
        let (m, path) = match (require(model, "model"), cstr(path, "path")) {
            (Ok(m), Ok(p)) => (m, p),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match write_checkpoint(Path::new(path), &m.arch, &m.params) {
            Ok(()) => HdnnStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn hdnn_model_free(model: *mut HdnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Exact trainable-parameter count of a loaded model, or 0 for null.
#[no_mangle]
pub extern "C" fn hdnn_model_param_count(model: *const HdnnModel) -> u64 {
    require(model, "model").map_or(0, |m| count_params(&m.arch))
}

/// Exact trainable-parameter count for an architecture given as a JSON
/// config document (needs `input_dim` and `output_dim`).
///
/// # Safety
/// `arch_json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdnn_count_params(arch_json: *const c_char, out: *mut u64) -> HdnnStatus {
    guard(|| {
        let (text, out) = match (cstr(arch_json, "arch_json"), require_out(out, "out")) {
            (Ok(t), Ok(o)) => (t, o),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match arch_from_json(text) {
            Ok(arch) => {
                *out = count_params(&arch);
                HdnnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Runs a full training job from a JSON config (same keys and defaults as
/// the `train` subcommand), writing `log.csv`, `final.hwnn` and
/// `resolved_config.json` into the configured output directory. When
/// `out_model` is non-null it receives the trained model.
///
/// # Safety
/// `config_json` must be NUL-terminated; `out_model` may be null.
#[no_mangle]
pub unsafe extern "C" fn hdnn_train(
    config_json: *const c_char,
    out_model: *mut *mut HdnnModel,
) -> HdnnStatus {
    guard(|| {
        let text = match cstr(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let config = match RunConfig::from_json(text) {
            Ok(c) => c.resolve(),
            Err(e) => return fail(&e),
        };
        match train_from_config(&config) {
            Ok(output) => {
                if !out_model.is_null() {
                    *out_model = Box::into_raw(Box::new(HdnnModel {
                        arch: output.arch,
                        params: output.params,
                    }));
                }
                HdnnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Evaluates a model on a raw dataset (splicing to the model's input width)
/// and writes the mean cross-entropy and frame error rate.
///
/// # Safety
/// All pointers must be valid; `ce`/`fer` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hdnn_evaluate(
    model: *const HdnnModel,
    dataset: *const HdnnDataset,
    ce: *mut f64,
    fer: *mut f64,
) -> HdnnStatus {
    guard(|| {
        let (m, d) = match (require(model, "model"), require(dataset, "dataset")) {
            (Ok(m), Ok(d)) => (m, d),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let (ce_out, fer_out) = match (require_out(ce, "ce"), require_out(fer, "fer")) {
            (Ok(c), Ok(f)) => (c, f),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match evaluate_model_on_dataset(&m.arch, &m.params, &d.inner) {
            Ok((ce_v, fer_v)) => {
                *ce_out = ce_v;
                *fer_out = fer_v;
                HdnnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Compares analytic gradients against central differences for the
/// architecture in `arch_json`. Returns `Ok` on pass and
/// `VerificationFailed` otherwise; `max_rel_err` (nullable) receives the
/// worst measured relative error.
///
/// # Safety
/// `arch_json` must be NUL-terminated; `max_rel_err` may be null.
#[no_mangle]
pub unsafe extern "C" fn hdnn_grad_check(
    arch_json: *const c_char,
    seed: u64,
    tol: f64,
    max_rel_err: *mut f64,
) -> HdnnStatus {
    guard(|| {
        let text = match cstr(arch_json, "arch_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let arch = match arch_from_json(text) {
            Ok(a) => a,
            Err(e) => return fail(&e),
        };
        match grad_check(&arch, seed, tol) {
            Ok(report) => {
                if !max_rel_err.is_null() {
                    *max_rel_err = report.max_rel_err;
                }
                if report.pass {
                    HdnnStatus::Ok
                } else {
                    set_error(&report.to_string());
                    HdnnStatus::VerificationFailed
                }
            }
            Err(e) => fail(&e),
        }
    })
}

/// Runs the three architecture-reduction equivalences on random inputs.
#[no_mangle]
pub extern "C" fn hdnn_reduction_check(hidden_dim: u32, num_layers: u32, seed: u64) -> HdnnStatus {
    guard(|| match reduction_check(hidden_dim as usize, num_layers as usize, seed) {
        Ok(true) => HdnnStatus::Ok,
        Ok(false) => {
            set_error("reduction equivalences do not hold");
            HdnnStatus::VerificationFailed
        }
        Err(e) => fail(&e),
    })
}
