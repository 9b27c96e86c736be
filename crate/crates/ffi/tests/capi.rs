use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use messm_ffi::*;

const AR: &str = r#"{ "schema": 1, "kind": "ar_noise" }"#;

fn last_error() -> String {
    let p = messm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn model(json: &str, m: usize) -> *mut MessmModel {
    let text = CString::new(json).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { messm_model_from_json(text.as_ptr(), m, &mut out) }, MessmStatus::Ok);
    out
}

#[test]
fn model_handles_report_dimensions_and_reject_bad_json() {
    let m = model(AR, 4);
    unsafe {
        assert_eq!(messm_model_n_fixed(m), 1);
        assert_eq!(messm_model_n_delta(m), 3);
        assert_eq!(messm_model_theta_dim(m), 1);
        messm_model_free(m);
        assert_eq!(messm_model_n_delta(ptr::null()), 0);
    }

    let bad = CString::new(r#"{ "schema": 1, "kind": "nope" }"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { messm_model_from_json(bad.as_ptr(), 4, &mut out) }, MessmStatus::Config);
    assert!(out.is_null());
    assert!(last_error().contains("nope"));

    assert_eq!(unsafe { messm_model_from_json(ptr::null(), 4, &mut out) }, MessmStatus::NullPointer);
}

#[test]
fn panel_round_trip_keeps_missing_cells() {
    let values = [1.0, f64::NAN, 3.0, 4.0, 5.0, f64::NAN];
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { messm_panel_new(2, 3, 1, values.as_ptr(), &mut p) }, MessmStatus::Ok);
    let mut back = [0.0; 6];
    unsafe {
        assert_eq!(messm_panel_m(p), 2);
        assert_eq!(messm_panel_n_time(p), 3);
        assert_eq!(messm_panel_values(p, back.as_mut_ptr(), back.len()), MessmStatus::Ok);
        assert_eq!(messm_panel_values(p, back.as_mut_ptr(), 2), MessmStatus::InvalidArgument);
        messm_panel_free(p);
    }
    for (a, b) in values.iter().zip(&back) {
        assert!(a == b || (a.is_nan() && b.is_nan()));
    }
}

#[test]
fn conditional_loglik_matches_the_library() {
    let m = model(AR, 3);
    let mut p = ptr::null_mut();
    let delta = [0.3, 1.0, 0.1];
    assert_eq!(
        unsafe { messm_simulate(m, [0.5].as_ptr(), 1, delta.as_ptr(), 3, 15, 9, &mut p) },
        MessmStatus::Ok
    );
    let theta = [0.4, 0.5, 0.6];
    let mut ll = 0.0;
    assert_eq!(
        unsafe { messm_conditional_loglik(m, p, theta.as_ptr(), 3, delta.as_ptr(), 3, &mut ll) },
        MessmStatus::Ok
    );
    let mut values = vec![0.0; 45];
    unsafe { messm_panel_values(p, values.as_mut_ptr(), 45) };
    let (spec, eff) = messm::model::build_ar_noise(3);
    let mut data = messm::PanelData::new(3, 15, 1);
    for i in 0..3 {
        for t in 0..15 {
            data.set(i, t, &values[i * 15 + t..i * 15 + t + 1]).unwrap();
        }
    }
    let th: Vec<_> = theta.iter().map(|&v| nalgebra::DVector::from_element(1, v)).collect();
    let expected = messm::likelihood::conditional_loglik(&data, &spec, &eff, &th, &delta).unwrap();
    assert_eq!(ll, expected);
    assert_eq!(
        unsafe { messm_conditional_loglik(m, p, theta.as_ptr(), 2, delta.as_ptr(), 3, &mut ll) },
        MessmStatus::InvalidArgument
    );
    unsafe {
        messm_panel_free(p);
        messm_model_free(m);
    }
}

#[test]
fn fit_through_the_c_interface() {
    let m = model(r#"{ "schema": 1, "kind": "ar_noise", "known_theta": [[0.5], [0.7], [0.3], [0.8]] }"#, 4);
    let mut p = ptr::null_mut();
    let delta = [0.4, 1.5, 0.1];
    assert_eq!(
        unsafe { messm_simulate(m, ptr::null(), 0, delta.as_ptr(), 3, 40, 2, &mut p) },
        MessmStatus::Ok
    );
    let mut opts = messm_fit_options_default();
    opts.method = MessmMethod::Score;
    opts.tol = 1e-6;
    let mut fit = ptr::null_mut();
    let start = [1.0, 1.0, 0.1];
    let status = unsafe { messm_fit(m, p, ptr::null(), 0, start.as_ptr(), 3, &opts, &mut fit) };
    assert_eq!(status, MessmStatus::Ok);
    let mut est = [0.0; 3];
    unsafe {
        assert_eq!(messm_fit_converged(fit), 1);
        assert!(messm_fit_iterations(fit) > 0);
        assert_eq!(messm_fit_params(fit, est.as_mut_ptr(), 3), MessmStatus::Ok);
        let js = messm_fit_to_json(fit);
        let text = CStr::from_ptr(js).to_str().unwrap().to_owned();
        messm_string_free(js);
        assert!(text.contains("\"method\":\"score\""));
        messm_fit_free(fit);
    }
    assert!(est[0] > 0.0 && est[1] > 0.0);

    opts.method = MessmMethod::Em;
    opts.max_iter = 1;
    let status = unsafe { messm_fit(m, p, ptr::null(), 0, start.as_ptr(), 3, &opts, &mut fit) };
    assert_eq!(status, MessmStatus::NotConverged);
    assert!(!fit.is_null());
    unsafe {
        messm_fit_free(fit);
        messm_panel_free(p);
        messm_model_free(m);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/messm.h");
    let text = std::fs::read_to_string(header).unwrap();
    assert!(text.contains("messm_fit(") && text.contains("MESSM_STATUS_NOT_CONVERGED"));
    let Ok(status) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).status() else {
        eprintln!("no C compiler available; syntax check skipped");
        return;
    };
    assert!(status.success());
}
