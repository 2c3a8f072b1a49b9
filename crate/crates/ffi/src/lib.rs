//! C ABI over `mcr-core`.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free`. Every fallible call returns an
//! [`McrStatus`]; on failure [`mcr_last_error`] describes the cause. Strings
//! returned through `char **` are freed with [`mcr_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mcr_core::experiment::{self, Experiment, RunArtifacts};
use mcr_core::synthdata::{self, SyntheticData, SyntheticSpec};
use mcr_core::verify::{self, VerifyOptions};
use mcr_core::{io, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    InvalidArgument = 7,
    Panic = 8,
}

/// A generated or loaded dataset with train, val and test splits.
pub struct McrDataset {
    inner: SyntheticData,
}

/// A finished training run.
pub struct McrRun {
    experiment: Experiment,
    artifacts: RunArtifacts,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> McrStatus {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Modality { .. } | Error::LabelOutOfRange { .. } => {
            McrStatus::Config
        }
        Error::Io(_) => McrStatus::Io,
        Error::Format(_) => McrStatus::Format,
        _ => McrStatus::Numeric,
    }
}

struct Failure(McrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> McrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            McrStatus::Ok
        }
        Ok(Err(Failure(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            McrStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(McrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(McrStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn json_arg<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure(McrStatus::Config, format!("invalid {what}: {e}")))
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message for the most recent failure on this thread; empty after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mcr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn mcr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// # Safety
/// `s` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mcr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a dataset from a JSON spec; missing keys take defaults.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcr_dataset_generate(spec_json: *const c_char, out: *mut *mut McrDataset) -> McrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let spec: SyntheticSpec = json_arg(str_arg(spec_json, "spec_json")?, "dataset spec")?;
        spec.validate()?;
        let inner = synthdata::generate(&spec)?;
        *out = Box::into_raw(Box::new(McrDataset { inner }));
        Ok(())
    })
}

/// Loads a dataset container written by `mcr generate` or
/// [`mcr_dataset_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcr_dataset_load(path: *const c_char, out: *mut *mut McrDataset) -> McrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let inner = io::load_dataset(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(McrDataset { inner }));
        Ok(())
    })
}

/// Writes `<dir>/<stem>.bin` and its JSON sidecar.
///
/// # Safety
/// `ds` must be a live handle; `dir` and `stem` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mcr_dataset_save(ds: *const McrDataset, dir: *const c_char, stem: *const c_char) -> McrStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        io::save_dataset(&ds.inner, &PathBuf::from(str_arg(dir, "dir")?), str_arg(stem, "stem")?)?;
        Ok(())
    })
}

/// Row count of split `split` (0 train, 1 val, 2 test).
///
/// # Safety
/// `ds` must be a live handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcr_dataset_len(ds: *const McrDataset, split: u32, out: *mut usize) -> McrStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        let out = out_arg(out, "out")?;
        *out = match split {
            0 => ds.inner.train.len(),
            1 => ds.inner.val.len(),
            2 => ds.inner.test.len(),
            _ => return Err(Failure(McrStatus::InvalidArgument, format!("no split {split}"))),
        };
        Ok(())
    })
}

/// The dataset's spec as JSON.
///
/// # Safety
/// `ds` must be a live handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcr_dataset_spec_json(ds: *const McrDataset, out: *mut *mut c_char) -> McrStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        let out = out_arg(out, "out")?;
        *out = c_string(serde_json::to_string(&ds.inner.spec).map_err(Error::from)?);
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mcr_dataset_free(ds: *mut McrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains the JSON experiment `{"data": ..., "run": ...}`. With `ds`
/// non-null the dataset replaces the `data` section.
///
/// # Safety
/// `experiment_json` must be a NUL-terminated string, `ds` null or a live
/// handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcr_run_train(
    experiment_json: *const c_char,
    ds: *const McrDataset,
    with_error_matrix: bool,
    out: *mut *mut McrRun,
) -> McrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let mut exp: Experiment = json_arg(str_arg(experiment_json, "experiment_json")?, "experiment")?;
        let data = ds.as_ref().map(|d| &d.inner);
        if let Some(d) = data {
            exp.data = d.spec.clone();
        }
        let artifacts = experiment::run(&exp, data, with_error_matrix)?;
        *out = Box::into_raw(Box::new(McrRun { experiment: exp, artifacts }));
        Ok(())
    })
}

/// Test accuracy of the kept model.
///
/// # Safety
/// `run` must be a live handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcr_run_test_accuracy(run: *const McrRun, out: *mut f64) -> McrStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        *out_arg(out, "out")? = run.artifacts.summary.test_accuracy;
        Ok(())
    })
}

/// Run summary as JSON.
///
/// # Safety
/// `run` must be a live handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcr_run_summary_json(run: *const McrRun, out: *mut *mut c_char) -> McrStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let out = out_arg(out, "out")?;
        *out = c_string(serde_json::to_string(&run.artifacts.summary).map_err(Error::from)?);
        Ok(())
    })
}

/// Per-epoch log as CSV text.
///
/// # Safety
/// `run` must be a live handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcr_run_epochs_csv(run: *const McrRun, out: *mut *mut c_char) -> McrStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        *out_arg(out, "out")? = c_string(run.artifacts.csv.render());
        Ok(())
    })
}

/// Writes the run directory (epochs.csv, summary.json, config.json,
/// checkpoint.bin).
///
/// # Safety
/// `run` must be a live handle, `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mcr_run_write(run: *const McrRun, dir: *const c_char) -> McrStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        experiment::write_artifacts(&run.experiment, &run.artifacts, &PathBuf::from(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mcr_run_free(run: *mut McrRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Hash of a JSON document as used in output headers.
///
/// # Safety
/// `json` must be a NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcr_config_hash(json: *const c_char, out: *mut *mut c_char) -> McrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let doc: serde_json::Value = json_arg(str_arg(json, "json")?, "JSON")?;
        *out = c_string(io::config_hash(&doc)?);
        Ok(())
    })
}

/// Runs the property suite; `filter` may be null. Counts land in
/// `passed` and `total`.
///
/// # Safety
/// `filter` must be null or NUL-terminated; `passed` and `total` valid.
#[no_mangle]
pub unsafe extern "C" fn mcr_verify(
    filter: *const c_char,
    flip_greedy_sign: bool,
    passed: *mut usize,
    total: *mut usize,
) -> McrStatus {
    guard(|| {
        let filter = if filter.is_null() {
            None
        } else {
            Some(str_arg(filter, "filter")?.to_string())
        };
        let passed = out_arg(passed, "passed")?;
        let total = out_arg(total, "total")?;
        let results = verify::run_checks(&VerifyOptions { filter, flip_greedy_sign });
        *total = results.len();
        *passed = results.iter().filter(|r| r.passed).count();
        Ok(())
    })
}
