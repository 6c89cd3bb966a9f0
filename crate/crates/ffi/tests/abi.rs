use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use openviewer::dataset::{openness_split, SplitRatios};
use openviewer::synth::{generate, SynthSpec};
use openviewer::trainer::{train, TrainConfig};
use openviewer_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    let n = unsafe { ov_last_error_message(buf.as_mut_ptr(), buf.len()) };
    if n == 0 {
        return String::new();
    }
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

fn cstring(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_names_schema() {
    let v = unsafe { CStr::from_ptr(ov_version()) }.to_str().unwrap();
    assert_eq!(v, openviewer::version_info());
    assert!(v.contains("schema"));
}

#[test]
fn soft_threshold_and_errors() {
    let x = [3.0, -0.5, 0.2, -2.0];
    let mut y = [0.0; 4];
    let s = unsafe { ov_soft_threshold(x.as_ptr(), y.as_mut_ptr(), 4, 1.0) };
    assert_eq!(s, OvStatus::Ok);
    assert_eq!(y, [2.0, 0.0, 0.0, -1.0]);
    assert_eq!(unsafe { ov_last_error_message(ptr::null_mut(), 0) }, 0);

    let s = unsafe { ov_soft_threshold(x.as_ptr(), y.as_mut_ptr(), 4, -1.0) };
    assert_eq!(s, OvStatus::InvalidArgument);
    assert!(last_error().contains("theta"));
    let s = unsafe { ov_soft_threshold(ptr::null(), y.as_mut_ptr(), 4, 1.0) };
    assert_eq!(s, OvStatus::NullPointer);

    // truncation keeps a terminating NUL and reports the full size
    let mut small = [1 as std::ffi::c_char; 4];
    let full = unsafe { ov_last_error_message(small.as_mut_ptr(), small.len()) };
    assert!(full > 4);
    assert_eq!(small[3], 0);
}

#[test]
fn ccr_matches_hand_case() {
    // known-correct .8, known-wrong .6, unknown .7, unknown .5
    let conf = [0.8, 0.6, 0.7, 0.5];
    let correct = [1u8, 0, 0, 0];
    let unknown = [0u8, 0, 1, 1];
    let mut out = -1.0;
    let s = unsafe {
        ov_oscr_ccr_at_fpr(
            conf.as_ptr(),
            correct.as_ptr(),
            unknown.as_ptr(),
            4,
            0.5,
            &mut out,
        )
    };
    assert_eq!(s, OvStatus::Ok);
    assert_eq!(out, 0.5);
    let no_unknown = [0u8; 4];
    let s = unsafe {
        ov_oscr_ccr_at_fpr(
            conf.as_ptr(),
            correct.as_ptr(),
            no_unknown.as_ptr(),
            4,
            0.5,
            &mut out,
        )
    };
    assert_eq!(s, OvStatus::Failed);
    assert!(last_error().contains("metric"));
}

#[test]
fn admm_solve_reconstructs() {
    let spec = SynthSpec {
        classes: 4,
        samples_per_class: 20,
        dims: vec![12],
        noise_fraction: 0.0,
        ..SynthSpec::default()
    };
    let (ds, _) = generate(&spec).unwrap();
    let x = &ds.views[0];
    let (mut err, mut iters) = (0.0, 0usize);
    let s = unsafe {
        ov_admm_solve(
            x.as_slice().as_ptr(),
            x.rows(),
            x.cols(),
            4,
            0.01,
            0.1,
            1.0,
            200,
            0,
            &mut err,
            &mut iters,
        )
    };
    assert_eq!(s, OvStatus::Ok, "{}", last_error());
    assert!(err < 0.1, "{err}");
    assert!(iters >= 1 && iters <= 200);
    let s = unsafe {
        ov_admm_solve(
            x.as_slice().as_ptr(),
            x.rows(),
            x.cols(),
            4,
            -1.0,
            0.1,
            1.0,
            10,
            0,
            &mut err,
            &mut iters,
        )
    };
    assert_eq!(s, OvStatus::InvalidArgument);
}

#[test]
fn dataset_and_model_handles() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        classes: 4,
        samples_per_class: 30,
        dims: vec![10, 8],
        ..SynthSpec::default()
    };
    let (ds, _) = generate(&spec).unwrap();
    let manifest = ds.save(dir.path()).unwrap();
    let split = openness_split(
        &ds,
        0.1,
        SplitRatios {
            train: 0.5,
            val: 0.1,
            test: 0.4,
        },
        0,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let outcome = train(&ds, &split, &cfg).unwrap();
    let cp_path = dir.path().join("checkpoint.json");
    outcome.checkpoint.save(&cp_path).unwrap();

    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { ov_dataset_load(cstring(&manifest).as_ptr(), &mut handle) },
        OvStatus::Ok
    );
    assert_eq!(unsafe { ov_dataset_len(handle) }, 120);
    assert_eq!(unsafe { ov_dataset_view_count(handle) }, 2);
    assert_eq!(unsafe { ov_dataset_class_count(handle) }, 4);
    let mut dim = 0;
    assert_eq!(
        unsafe { ov_dataset_view_dim(handle, 1, &mut dim) },
        OvStatus::Ok
    );
    assert_eq!(dim, 8);
    assert_eq!(
        unsafe { ov_dataset_view_dim(handle, 2, &mut dim) },
        OvStatus::InvalidArgument
    );
    let mut label = 0;
    assert_eq!(
        unsafe { ov_dataset_label(handle, 119, &mut label) },
        OvStatus::Ok
    );
    assert_eq!(label, ds.labels[119]);

    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { ov_model_load(cstring(&cp_path).as_ptr(), &mut model) },
        OvStatus::Ok
    );
    assert_eq!(
        unsafe { ov_model_known_class_count(model) },
        split.known_count()
    );
    let mut labels = vec![0usize; 120];
    let mut conf = vec![0.0; 120];
    let s = unsafe { ov_model_predict(model, handle, labels.as_mut_ptr(), conf.as_mut_ptr(), 120) };
    assert_eq!(s, OvStatus::Ok, "{}", last_error());
    assert!(labels.iter().all(|l| split.known_classes.contains(l)));
    assert!(conf.iter().all(|&c| (0.0..=1.0).contains(&c)));
    let s = unsafe { ov_model_predict(model, handle, labels.as_mut_ptr(), conf.as_mut_ptr(), 5) };
    assert_eq!(s, OvStatus::InvalidArgument);

    unsafe {
        ov_model_free(model);
        ov_dataset_free(handle);
        ov_dataset_free(ptr::null_mut());
    }

    let mut missing = ptr::null_mut();
    let bad = cstring(&dir.path().join("nope.json"));
    assert_eq!(
        unsafe { ov_dataset_load(bad.as_ptr(), &mut missing) },
        OvStatus::Io
    );
    assert!(missing.is_null());
    let mut no_model = ptr::null_mut();
    assert_eq!(
        unsafe { ov_model_load(cstring(&manifest).as_ptr(), &mut no_model) },
        OvStatus::Parse
    );
    assert_eq!(
        unsafe { ov_dataset_load(ptr::null(), &mut missing) },
        OvStatus::NullPointer
    );
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/openviewer.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "ov_version",
        "ov_last_error_message",
        "ov_model_predict",
        "ov_admm_solve",
        "OV_STATUS_PANIC",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(status.success());
}
