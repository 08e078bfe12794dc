use std::ffi::{c_char, CStr, CString};
use std::process::Command;
use std::ptr;

use mofs::config::TrainConfig;
use mofs::data::generate_darcy;
use mofs::eval::train_mofs;
use mofs::text::{HashEncoder, DEFAULT_MAX_TOKENS};
use mofs_ffi::*;

const HEADER: &str = include_str!("../include/mofs.h");

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    let n = unsafe { mofs_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn darcy(beta: f64, n: usize, seed: u64) -> *mut MofsDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { mofs_dataset_generate_darcy(beta, n, 8, seed, &mut ds) }, MofsStatus::Ok);
    assert!(!ds.is_null());
    ds
}

#[test]
fn generated_dataset_matches_the_library() {
    let ds = darcy(10.0, 3, 5);
    let (mut n, mut h, mut w) = (0, 0, 0);
    assert_eq!(unsafe { mofs_dataset_shape(ds, &mut n, &mut h, &mut w) }, MofsStatus::Ok);
    assert_eq!((n, h, w), (3, 8, 8));
    let (mut a, mut u) = (vec![0.0; 64], vec![0.0; 64]);
    assert_eq!(unsafe { mofs_dataset_sample(ds, 2, a.as_mut_ptr(), u.as_mut_ptr(), 64) }, MofsStatus::Ok);
    let reference = generate_darcy(10.0, 3, 8, 8, 5).unwrap();
    assert_eq!(a, reference.samples[2].a.values());
    assert_eq!(u, reference.samples[2].u.values());
    unsafe { mofs_dataset_free(ds) };
}

#[test]
fn errors_map_to_status_codes() {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { mofs_dataset_load(ptr::null(), &mut ds) }, MofsStatus::NullPointer);
    let missing = CString::new("/nonexistent/x.mofsd").unwrap();
    assert_eq!(unsafe { mofs_dataset_load(missing.as_ptr(), &mut ds) }, MofsStatus::Io);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());

    let ds = darcy(1.0, 2, 0);
    let (mut a, mut u) = (vec![0.0; 64], vec![0.0; 64]);
    assert_eq!(unsafe { mofs_dataset_sample(ds, 7, a.as_mut_ptr(), u.as_mut_ptr(), 64) }, MofsStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));
    assert_eq!(unsafe { mofs_dataset_sample(ds, 0, a.as_mut_ptr(), u.as_mut_ptr(), 10) }, MofsStatus::Shape);
    unsafe { mofs_dataset_free(ds) };
    unsafe { mofs_dataset_free(ptr::null_mut()) };
    unsafe { mofs_model_free(ptr::null_mut()) };
}

#[test]
fn load_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.mofsd");
    let reference = generate_darcy(0.1, 2, 8, 8, 9).unwrap();
    mofs::data::save_dataset(&reference, &path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { mofs_dataset_load(c.as_ptr(), &mut ds) }, MofsStatus::Ok);
    let (mut a, mut u) = (vec![0.0; 64], vec![0.0; 64]);
    assert_eq!(unsafe { mofs_dataset_sample(ds, 1, a.as_mut_ptr(), u.as_mut_ptr(), 64) }, MofsStatus::Ok);
    let stored = mofs::data::load_dataset(&path).unwrap();
    assert_eq!(u, stored.samples[1].u.values());
    assert!(u.iter().zip(reference.samples[1].u.values()).all(|(x, y)| (x - y).abs() < 1e-6));
    unsafe { mofs_dataset_free(ds) };
}

#[test]
fn trained_checkpoint_predicts_an_unseen_operator() {
    let cfg = TrainConfig {
        grid: 8,
        samples_per_operator: 6,
        d: 4,
        blocks: 2,
        modes: 2,
        heads: 2,
        prompt_len: 2,
        d_bert: 8,
        j: 2,
        top_k: 2,
        memory_capacity: 32,
        pretrain_epochs: 1,
        stage1_epochs: 1,
        stage2_epochs: 1,
        ..Default::default()
    };
    let train: Vec<_> =
        [1.0, 10.0].iter().enumerate().map(|(k, &b)| generate_darcy(b, 6, 8, 8, k as u64).unwrap().with_operator_id(k)).collect();
    let text = HashEncoder { d_bert: cfg.d_bert, max_tokens: DEFAULT_MAX_TOKENS };
    let rot = train_mofs(&train, &cfg, None, &text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    rot.model.to_checkpoint(serde_json::Value::Null).save(&path).unwrap();

    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { mofs_model_load(c.as_ptr(), &mut model) }, MofsStatus::Ok);
    let test = darcy(0.1, 4, 7);
    let demos = [0usize, 1];
    let (mut a, mut u) = (vec![0.0; 64], vec![0.0; 64]);
    assert_eq!(unsafe { mofs_dataset_sample(test, 3, a.as_mut_ptr(), u.as_mut_ptr(), 64) }, MofsStatus::Ok);
    let mut pred = vec![f64::NAN; 64];
    let s = unsafe { mofs_model_predict(model, test, demos.as_ptr(), 2, a.as_ptr(), pred.as_mut_ptr(), 64) };
    assert_eq!(s, MofsStatus::Ok);
    assert!(pred.iter().all(|v| v.is_finite()));
    let mut again = vec![0.0; 64];
    unsafe { mofs_model_predict(model, test, demos.as_ptr(), 2, a.as_ptr(), again.as_mut_ptr(), 64) };
    assert_eq!(pred, again);
    let s = unsafe { mofs_model_predict(model, test, demos.as_ptr(), 0, a.as_ptr(), again.as_mut_ptr(), 64) };
    assert_eq!(s, MofsStatus::InvalidArgument);
    unsafe {
        mofs_dataset_free(test);
        mofs_model_free(model);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(mofs_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    for f in [
        "mofs_last_error",
        "mofs_version",
        "mofs_dataset_load",
        "mofs_dataset_generate_darcy",
        "mofs_dataset_shape",
        "mofs_dataset_sample",
        "mofs_dataset_free",
        "mofs_model_load",
        "mofs_model_predict",
        "mofs_model_free",
    ] {
        assert!(HEADER.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(HEADER.contains("typedef struct MofsModel MofsModel;"));
    assert!(HEADER.contains("MOFS_STATUS_NUMERICAL = 4"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", concat!(env!("CARGO_MANIFEST_DIR"), "/include/mofs.h")])
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
