//! C ABI over the care graph-classification library.
//!
//! Conventions:
//! - Every fallible function returns a status code (`CARE_OK` on success).
//! - On failure, [`care_last_error`] returns a thread-local message that
//!   stays valid until the next call into the library on the same thread.
//! - Datasets are opaque handles created by [`care_dataset_parse`] and
//!   released with [`care_dataset_free`].
//! - Strings returned through `char**` out-parameters are owned by the
//!   caller and must be released with [`care_string_free`].
//! - No call unwinds across the boundary: internal panics are caught and
//!   reported as `CARE_ERR_NUMERIC`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use care_core::cli::RunConfigFile;
use care_core::graphio::{parse_tudataset, Dataset};
use care_core::sepmetrics::{full_report, EmbeddingSet};
use care_core::trainer::run_cv;
use care_core::vcbound::capacity_check;
use care_core::CareError;

/// Success.
pub const CARE_OK: i32 = 0;
/// Invalid configuration (bad JSON, unknown keys, inconsistent settings).
pub const CARE_ERR_CONFIG: i32 = 1;
/// Data problem: missing files or malformed dataset/CSV content.
pub const CARE_ERR_DATA: i32 = 2;
/// Numerical failure (non-finite loss, internal contract violation).
pub const CARE_ERR_NUMERIC: i32 = 3;
/// A required pointer argument was null.
pub const CARE_ERR_NULL: i32 = 4;
/// A string argument was not valid UTF-8.
pub const CARE_ERR_ENCODING: i32 = 5;

/// A parsed graph-classification dataset.
pub struct CareDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().map(|b| if b == 0 { b' ' } else { b }).collect();
    let c = CString::new(sanitized).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::default());
}

fn status_of(e: &CareError) -> i32 {
    match e.exit_code() {
        1 => CARE_ERR_CONFIG,
        2 => CARE_ERR_DATA,
        _ => CARE_ERR_NUMERIC,
    }
}

fn fail(e: &CareError) -> i32 {
    set_error(&e.to_string());
    status_of(e)
}

/// Run `body`, catching panics and translating them into a status code.
fn guarded(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".to_string());
            set_error(&format!("internal panic: {msg}"));
            CARE_ERR_NUMERIC
        }
    }
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, i32> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(CARE_ERR_NULL);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(CARE_ERR_ENCODING)
        }
    }
}

fn give_string(out: *mut *mut c_char, s: String) -> i32 {
    let sanitized: Vec<u8> = s.bytes().map(|b| if b == 0 { b' ' } else { b }).collect();
    match CString::new(sanitized) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            CARE_OK
        }
        Err(_) => {
            set_error("result string could not be allocated");
            CARE_ERR_NUMERIC
        }
    }
}

/// The library version as a static NUL-terminated string. Never freed.
#[no_mangle]
pub extern "C" fn care_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// The last error message on this thread (empty when the last call
/// succeeded). Borrowed; valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn care_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Free a string returned through a `char**` out-parameter.
///
/// # Safety
/// `s` must be null or a pointer previously returned by this library and
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn care_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a dataset directory in the standard text layout into a handle.
/// `out` receives the handle on success.
///
/// # Safety
/// `dir` and `name` must be valid NUL-terminated strings; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn care_dataset_parse(
    dir: *const c_char,
    name: *const c_char,
    out: *mut *mut CareDataset,
) -> i32 {
    guarded(|| {
        clear_error();
        if out.is_null() {
            set_error("out handle is null");
            return CARE_ERR_NULL;
        }
        let dir = match utf8_arg(dir, "dataset directory") {
            Ok(s) => s,
            Err(code) => return code,
        };
        let name = match utf8_arg(name, "dataset name") {
            Ok(s) => s,
            Err(code) => return code,
        };
        match parse_tudataset(Path::new(dir), name, None) {
            Ok(dataset) => {
                *out = Box::into_raw(Box::new(CareDataset { inner: dataset }));
                CARE_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a dataset handle.
///
/// # Safety
/// `dataset` must be null or a handle from [`care_dataset_parse`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn care_dataset_free(dataset: *mut CareDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of graphs in the dataset (0 for a null handle).
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn care_dataset_graph_count(dataset: *const CareDataset) -> usize {
    if dataset.is_null() {
        return 0;
    }
    (*dataset).inner.graphs.len()
}

/// Number of classes in the dataset (0 for a null handle).
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn care_dataset_class_count(dataset: *const CareDataset) -> usize {
    if dataset.is_null() {
        return 0;
    }
    (*dataset).inner.class_count
}

/// Summary statistics of a parsed dataset as a JSON object (graph count,
/// class count, mean node and edge counts, feature setup).
///
/// # Safety
/// `dataset` must be a live handle; `out_json` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn care_dataset_stats_json(
    dataset: *const CareDataset,
    out_json: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        clear_error();
        if dataset.is_null() || out_json.is_null() {
            set_error("dataset or out pointer is null");
            return CARE_ERR_NULL;
        }
        let stats = (*dataset).inner.stats();
        match serde_json::to_string_pretty(&stats) {
            Ok(json) => give_string(out_json, json),
            Err(e) => {
                set_error(&format!("serialization failed: {e}"));
                CARE_ERR_NUMERIC
            }
        }
    })
}

/// Run cross-validated training per a JSON run configuration (the same
/// shape the `care train` command reads: `dataset_dir`, `dataset_name`,
/// plus optional model settings). Blocks until training completes and
/// returns the aggregate result as JSON. No files are written.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string; `out_json` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn care_train_json(
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        clear_error();
        if out_json.is_null() {
            set_error("out pointer is null");
            return CARE_ERR_NULL;
        }
        let text = match utf8_arg(config_json, "config JSON") {
            Ok(s) => s,
            Err(code) => return code,
        };
        let file = match RunConfigFile::from_json_str(text, "<config argument>") {
            Ok(f) => f,
            Err(e) => return fail(&e),
        };
        let model = match file.resolve_model() {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let dataset = match parse_tudataset(
            Path::new(&file.dataset_dir),
            &file.dataset_name,
            file.feature_policy,
        ) {
            Ok(d) => d,
            Err(e) => return fail(&e),
        };
        match run_cv(&dataset, &model) {
            Ok(cv) => match serde_json::to_string_pretty(&cv.result) {
                Ok(json) => give_string(out_json, json),
                Err(e) => {
                    set_error(&format!("serialization failed: {e}"));
                    CARE_ERR_NUMERIC
                }
            },
            Err(e) => fail(&e),
        }
    })
}

/// Compute the four class-separability metrics of an embedding CSV
/// (`id,label,e0..` rows) given as text. Returns a JSON object with keys
/// `silhouette`, `si`, `hm`, and `cd`.
///
/// # Safety
/// `csv_text` must be a valid NUL-terminated string; `out_json` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn care_separability_json(
    csv_text: *const c_char,
    out_json: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        clear_error();
        if out_json.is_null() {
            set_error("out pointer is null");
            return CARE_ERR_NULL;
        }
        let text = match utf8_arg(csv_text, "embedding CSV") {
            Ok(s) => s,
            Err(code) => return code,
        };
        let set = match EmbeddingSet::from_csv_str(text, "<csv argument>") {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        match full_report(&set) {
            Ok(report) => match serde_json::to_string_pretty(&report) {
                Ok(json) => give_string(out_json, json),
                Err(e) => {
                    set_error(&format!("serialization failed: {e}"));
                    CARE_ERR_NUMERIC
                }
            },
            Err(e) => fail(&e),
        }
    })
}

/// Compare the multiplication counts of the plain and refined models at
/// one grid point. `out_difference` receives `q1 - q2` (positive means the
/// plain width-matched model performs more multiplications) and
/// `out_verdict` receives 1 when the difference is positive.
///
/// # Safety
/// `out_difference` and `out_verdict` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn care_capacity_check(
    n: u64,
    h2: u64,
    d: u64,
    out_difference: *mut f64,
    out_verdict: *mut i32,
) -> i32 {
    guarded(|| {
        clear_error();
        if out_difference.is_null() || out_verdict.is_null() {
            set_error("out pointer is null");
            return CARE_ERR_NULL;
        }
        match capacity_check(n, h2, d) {
            Ok(report) => {
                *out_difference = report.difference;
                *out_verdict = i32::from(report.verdict);
                CARE_OK
            }
            Err(e) => fail(&e),
        }
    })
}
