use std::ffi::{c_char, CStr, CString};
use std::ptr;

use vcl_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        vcl_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn config(experiment: &str, method: &str, out: &std::path::Path) -> *mut VclConfig {
    let e = CString::new(experiment).unwrap();
    let m = CString::new(method).unwrap();
    let o = CString::new(out.to_str().unwrap()).unwrap();
    let mut cfg = ptr::null_mut();
    let s = unsafe { vcl_config_resolve(ptr::null(), e.as_ptr(), m.as_ptr(), o.as_ptr(), &mut cfg) };
    assert_eq!(s, VclStatus::Ok, "{}", last_error());
    cfg
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(vcl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let s = unsafe { vcl_config_resolve(ptr::null(), ptr::null(), ptr::null(), ptr::null(), ptr::null_mut()) };
    assert_eq!(s, VclStatus::NullPointer);
    assert!(last_error().contains("out"));
    assert_eq!(unsafe { vcl_oracle_update(ptr::null_mut(), ptr::null(), 0, 0.0) }, VclStatus::NullPointer);
    unsafe {
        vcl_config_free(ptr::null_mut());
        vcl_result_free(ptr::null_mut());
        vcl_oracle_free(ptr::null_mut());
    }
}

#[test]
fn unknown_method_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = CString::new("toy2d").unwrap();
    let m = CString::new("nope").unwrap();
    let o = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut cfg = ptr::null_mut();
    let s = unsafe { vcl_config_resolve(ptr::null(), e.as_ptr(), m.as_ptr(), o.as_ptr(), &mut cfg) };
    assert_eq!(s, VclStatus::Config);
    assert!(cfg.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn error_message_truncates_and_reports_full_length() {
    unsafe { vcl_oracle_new(0, 1.0, 1.0, &mut ptr::null_mut()) };
    let full = unsafe { vcl_last_error_message(ptr::null_mut(), 0) };
    assert!(full > 4);
    let mut buf = [1 as c_char; 4];
    assert_eq!(unsafe { vcl_last_error_message(buf.as_mut_ptr(), 4) }, full);
    assert_eq!(buf[3], 0);
}

#[test]
fn oracle_matches_hand_update() {
    let mut o = ptr::null_mut();
    assert_eq!(unsafe { vcl_oracle_new(2, 1.0, 1.0, &mut o) }, VclStatus::Ok);
    assert_eq!(unsafe { vcl_oracle_dim(o) }, 2);
    // Unit pattern on coordinate 0: precision 1 + 1, mean y / 2.
    let x = [1.0, 0.0];
    assert_eq!(unsafe { vcl_oracle_update(o, x.as_ptr(), 2, 3.0) }, VclStatus::Ok);
    let (mut mean, mut prec) = ([0.0; 2], [0.0; 2]);
    unsafe {
        assert_eq!(vcl_oracle_mean(o, mean.as_mut_ptr(), 2), VclStatus::Ok);
        assert_eq!(vcl_oracle_precision(o, prec.as_mut_ptr(), 2), VclStatus::Ok);
    }
    assert!((mean[0] - 1.5).abs() < 1e-12 && mean[1].abs() < 1e-12);
    assert!((prec[0] - 2.0).abs() < 1e-12 && (prec[1] - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { vcl_oracle_update(o, x.as_ptr(), 3, 0.0) }, VclStatus::InvalidArgument);
    unsafe { vcl_oracle_free(o) };
}

#[test]
fn toy_run_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("toy2d", "vcl", dir.path());
    let seeds = [0u64];
    unsafe {
        assert_eq!(vcl_config_set_seeds(cfg, seeds.as_ptr(), 1), VclStatus::Ok);
        assert_eq!(vcl_config_set_epochs(cfg, 5), VclStatus::Ok);
        assert_eq!(vcl_config_set_lambda(cfg, 1.0), VclStatus::Config);
    }
    let mut hash = [0 as c_char; 65];
    assert_eq!(unsafe { vcl_config_hash(cfg, hash.as_mut_ptr(), 65) }, 64);

    let mut partial = ptr::null_mut();
    assert_eq!(unsafe { vcl_run(cfg, 1, &mut partial) }, VclStatus::Ok, "{}", last_error());
    assert!(!unsafe { vcl_result_complete(partial) });

    let mut full = ptr::null_mut();
    assert_eq!(unsafe { vcl_run(cfg, 0, &mut full) }, VclStatus::Ok, "{}", last_error());
    assert!(unsafe { vcl_result_complete(full) });
    let n = unsafe { vcl_result_len(full) };
    assert!(n > unsafe { vcl_result_len(partial) });
    let mut rec = VclRecord { seed: 9, tasks_seen: 0, eval_task: 0, metric: VclMetric::TestLl, value: f64::NAN };
    let mut accuracies = 0;
    for i in 0..n {
        assert_eq!(unsafe { vcl_result_get(full, i, &mut rec) }, VclStatus::Ok);
        assert_eq!(rec.seed, 0);
        if rec.metric == VclMetric::Accuracy {
            assert!(rec.eval_task >= 0 && (0.0..=1.0).contains(&rec.value));
            accuracies += 1;
        }
    }
    assert!(accuracies > 0);
    assert_eq!(unsafe { vcl_result_get(full, n, &mut rec) }, VclStatus::InvalidArgument);
    unsafe {
        vcl_result_free(partial);
        vcl_result_free(full);
        vcl_config_free(cfg);
    }
}

#[test]
fn verify_oracles_passes() {
    let (mut total, mut failed) = (0usize, usize::MAX);
    assert_eq!(unsafe { vcl_verify_oracles(0, &mut total, &mut failed) }, VclStatus::Ok);
    assert!(total > 0);
    assert_eq!(failed, 0);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/vcl.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() > 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}
