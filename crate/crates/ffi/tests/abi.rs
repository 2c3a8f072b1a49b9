use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::ptr;

use mcr_ffi::*;

const SPEC: &str = r#"{"n_train": 48, "n_val": 16, "n_test": 20, "dim": 5, "n_classes": 3, "seed": 2}"#;
const EXPERIMENT: &str = r#"{"run": {
    "method": "mcr",
    "model": {"encoder_hidden": [8], "latent_dim": 4, "fusion_hidden": [8], "recon_hidden": [4]},
    "optimizer": {"epochs": 2, "batch_size": 16}
}}"#;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mcr_last_error()) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    mcr_string_free(s);
    out
}

#[test]
fn generate_train_and_write() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(mcr_dataset_generate(c(SPEC).as_ptr(), &mut ds), McrStatus::Ok);
        let mut n = 0usize;
        assert_eq!(mcr_dataset_len(ds, 2, &mut n), McrStatus::Ok);
        assert_eq!(n, 20);

        let dir_c = c(dir.path().to_str().unwrap());
        assert_eq!(mcr_dataset_save(ds, dir_c.as_ptr(), c("d").as_ptr()), McrStatus::Ok);
        let mut loaded = ptr::null_mut();
        let path = c(dir.path().join("d.bin").to_str().unwrap());
        assert_eq!(mcr_dataset_load(path.as_ptr(), &mut loaded), McrStatus::Ok);
        let mut a = ptr::null_mut();
        let mut b = ptr::null_mut();
        assert_eq!(mcr_dataset_spec_json(ds, &mut a), McrStatus::Ok);
        assert_eq!(mcr_dataset_spec_json(loaded, &mut b), McrStatus::Ok);
        assert_eq!(take(a), take(b));
        mcr_dataset_free(loaded);

        let mut run = ptr::null_mut();
        assert_eq!(mcr_run_train(c(EXPERIMENT).as_ptr(), ds, true, &mut run), McrStatus::Ok, "{}", last_error());
        let mut acc = -1.0;
        assert_eq!(mcr_run_test_accuracy(run, &mut acc), McrStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));
        let mut summary = ptr::null_mut();
        assert_eq!(mcr_run_summary_json(run, &mut summary), McrStatus::Ok);
        let summary: serde_json::Value = serde_json::from_str(&take(summary)).unwrap();
        assert_eq!(summary["method"], "mcr");
        let mut csv = ptr::null_mut();
        assert_eq!(mcr_run_epochs_csv(run, &mut csv), McrStatus::Ok);
        assert!(take(csv).starts_with("# config_hash="));
        let run_dir = c(dir.path().join("run").to_str().unwrap());
        assert_eq!(mcr_run_write(run, run_dir.as_ptr()), McrStatus::Ok);
        assert!(dir.path().join("run/checkpoint.bin").exists());
        mcr_run_free(run);
        mcr_dataset_free(ds);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut ds = ptr::null_mut();
        let bad = c(r#"{"shared_frac": 0.9, "unique_frac_1": 0.9}"#);
        assert_eq!(mcr_dataset_generate(bad.as_ptr(), &mut ds), McrStatus::Config);
        assert!(ds.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(mcr_dataset_generate(c("{").as_ptr(), &mut ds), McrStatus::Config);
        assert_eq!(mcr_dataset_generate(ptr::null(), &mut ds), McrStatus::NullPointer);
        assert_eq!(mcr_dataset_load(c("/nonexistent/d.bin").as_ptr(), &mut ds), McrStatus::Io);

        assert_eq!(mcr_dataset_generate(c(SPEC).as_ptr(), &mut ds), McrStatus::Ok);
        assert!(last_error().is_empty());
        let mut n = 0usize;
        assert_eq!(mcr_dataset_len(ds, 7, &mut n), McrStatus::InvalidArgument);
        mcr_dataset_free(ds);
        mcr_dataset_free(ptr::null_mut());
        mcr_string_free(ptr::null_mut());
    }
}

#[test]
fn config_hash_ignores_key_order() {
    unsafe {
        let mut a = ptr::null_mut();
        let mut b = ptr::null_mut();
        assert_eq!(mcr_config_hash(c(r#"{"a": 1, "b": [2]}"#).as_ptr(), &mut a), McrStatus::Ok);
        assert_eq!(mcr_config_hash(c(r#"{"b": [2], "a": 1}"#).as_ptr(), &mut b), McrStatus::Ok);
        let (a, b) = (take(a), take(b));
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }
}

#[test]
fn verify_counts_checks() {
    let (mut passed, mut total) = (0usize, 0usize);
    let filter = c("jsd");
    unsafe {
        assert_eq!(mcr_verify(filter.as_ptr(), false, &mut passed, &mut total), McrStatus::Ok);
    }
    assert!(total >= 2);
    assert_eq!(passed, total);
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(mcr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_abi_and_compiles_as_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mcr.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["mcr_dataset_generate", "mcr_run_train", "mcr_last_error", "typedef struct McrRun McrRun", "MCR_STATUS_OK"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; skipped syntax check");
        return;
    };
    assert!(status.success());
}
