use std::ffi::{CStr, CString};
use std::ptr;

use nalgebra::DMatrix;
use pvko::edmd::LocalKoopman;
use pvko::lifting::make_monomial_basis;
use pvko::mpc::{MpcConfig, TerminalMode};
use pvko::pvko::PvkoModel;
use pvko::sets::HPolytope;
use pvko::synthesis::{SolverInfo, TubeGain};
use pvko_ffi::*;

fn two_point_model() -> PvkoModel {
    let basis = make_monomial_basis(1, vec![vec![1]]).unwrap();
    let lo = LocalKoopman::new(1.0, DMatrix::from_element(1, 1, 0.9), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let hi = LocalKoopman::new(3.0, DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 2.0)).unwrap();
    PvkoModel::new(basis, vec![lo, hi], DMatrix::identity(1, 1), 0.01).unwrap()
}

fn last_error() -> String {
    let len = unsafe { pvko_last_error_message(ptr::null_mut(), 0) };
    let mut buf = vec![0u8; len + 1];
    unsafe { pvko_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
    CStr::from_bytes_until_nul(&buf).unwrap().to_string_lossy().into_owned()
}

fn load_model(m: &PvkoModel) -> *mut PvkoModelHandle {
    let json = CString::new(m.to_json().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { pvko_model_from_json(json.as_ptr(), &mut h) }, PvkoStatus::Ok);
    h
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(pvko_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_round_trip_and_interpolation() {
    let h = load_model(&two_point_model());
    let (mut n, mut q, mut m, mut l) = (0, 0, 0, 0);
    assert_eq!(
        unsafe { pvko_model_dims(h, &mut n, &mut q, &mut m, &mut l) },
        PvkoStatus::Ok
    );
    assert_eq!((n, q, m, l), (1, 1, 1, 2));
    let (mut a, mut b) = (0.0, 0.0);
    assert_eq!(unsafe { pvko_model_evaluate(h, 2.0, &mut a, &mut b) }, PvkoStatus::Ok);
    assert!((a - 0.7).abs() < 1e-12 && (b - 1.5).abs() < 1e-12);
    // x+ = 0.9 x + u at p = 1.
    let x0 = [2.0];
    let u = [1.0, 0.0];
    let p = [1.0, 1.0];
    let mut out = [0.0; 3];
    assert_eq!(
        unsafe { pvko_model_predict(h, x0.as_ptr(), u.as_ptr(), p.as_ptr(), 2, out.as_mut_ptr()) },
        PvkoStatus::Ok
    );
    assert!((out[1] - 2.8).abs() < 1e-12 && (out[2] - 2.52).abs() < 1e-12, "{out:?}");
    unsafe { pvko_model_free(h) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut h = ptr::null_mut();
    let bad = CString::new("{not json").unwrap();
    assert_eq!(
        unsafe { pvko_model_from_json(bad.as_ptr(), &mut h) },
        PvkoStatus::ParseError
    );
    assert!(h.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(
        unsafe { pvko_model_from_json(ptr::null(), &mut h) },
        PvkoStatus::NullPointer
    );
    assert!(last_error().contains("json"));

    let missing = CString::new("/nonexistent/model.json").unwrap();
    assert_eq!(
        unsafe { pvko_model_load(missing.as_ptr(), &mut h) },
        PvkoStatus::IoError
    );

    let model = load_model(&two_point_model());
    let x = [1.0, 2.0];
    let mut y = [0.0; 2];
    assert_eq!(
        unsafe { pvko_model_lift(model, x.as_ptr(), 2, y.as_mut_ptr()) },
        PvkoStatus::InvalidArgument
    );
    assert!(last_error().contains("expects 1"));
    unsafe { pvko_model_free(model) };
    // Freeing null is a no-op.
    unsafe { pvko_model_free(ptr::null_mut()) };
}

#[test]
fn truncated_error_buffer_is_terminated() {
    let mut h = ptr::null_mut();
    unsafe { pvko_model_from_json(ptr::null(), &mut h) };
    let mut buf = [0x7fu8; 4];
    let full = unsafe { pvko_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
    assert!(full > 3);
    assert_eq!(buf[3], 0);
}

#[test]
fn controller_steps_toward_origin() {
    let model = two_point_model();
    let gain = TubeGain {
        k: DMatrix::from_element(1, 1, -0.3),
        p: DMatrix::from_element(1, 1, 2.0),
        rpi: None,
        certificate_margins: vec![],
        solver: SolverInfo {
            objective: 0.0,
            newton_iterations: 0,
            gap: 0.0,
            external: true,
        },
    };
    let cfg = MpcConfig::new(
        model,
        gain,
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 0.1),
        HPolytope::from_box(&[-10.0], &[10.0]).unwrap(),
        HPolytope::from_box(&[-1.0], &[1.0]).unwrap(),
        5,
        TerminalMode::TightenedStateSet,
    )
    .unwrap();
    let json = CString::new(serde_json::to_string(&cfg).unwrap()).unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(
        unsafe { pvko_controller_from_json(json.as_ptr(), &mut c) },
        PvkoStatus::Ok
    );
    assert_eq!(unsafe { pvko_controller_horizon(c) }, 5);
    let forecast = [2.0; 5];
    let mut x = 3.0;
    let mut cost = f64::INFINITY;
    for _ in 0..5 {
        let mut u = 0.0;
        let mut clipped = false;
        let mut obj = 0.0;
        let s = unsafe { pvko_controller_step(c, &x, forecast.as_ptr(), &mut u, &mut clipped, &mut obj) };
        assert_eq!(s, PvkoStatus::Ok, "{}", last_error());
        assert!((-1.0..=1.0).contains(&u));
        assert!(obj <= cost + 1e-8);
        cost = obj;
        x = 0.7 * x + 1.5 * u;
    }
    assert!(x.abs() < 3.0);
    unsafe { pvko_controller_reset(c) };
    unsafe { pvko_controller_free(c) };
}

#[test]
fn dense_qp_through_the_c_interface() {
    // min ½(x1² + x2²) - x1 - x2  s.t.  x1 + x2 <= 1
    let p = [1.0, 0.0, 0.0, 1.0];
    let q = [-1.0, -1.0];
    let a = [1.0, 1.0];
    let l = [f64::NEG_INFINITY];
    let u = [1.0];
    let mut x = [0.0; 2];
    let mut y = [0.0; 1];
    let mut status = PvkoSolveStatus::MaxIter;
    let s = unsafe {
        pvko_qp_solve_dense(
            2,
            1,
            p.as_ptr(),
            q.as_ptr(),
            a.as_ptr(),
            l.as_ptr(),
            u.as_ptr(),
            x.as_mut_ptr(),
            y.as_mut_ptr(),
            &mut status,
        )
    };
    assert_eq!(s, PvkoStatus::Ok);
    assert_eq!(status, PvkoSolveStatus::Optimal);
    assert!((x[0] - 0.5).abs() < 1e-6 && (x[1] - 0.5).abs() < 1e-6);
    assert!((y[0] - 0.5).abs() < 1e-6);

    // x1 >= 2 and x1 <= 1 together are infeasible.
    let a = [1.0, 0.0, 1.0, 0.0];
    let l = [2.0, f64::NEG_INFINITY];
    let u = [f64::INFINITY, 1.0];
    let s = unsafe {
        pvko_qp_solve_dense(
            2,
            2,
            p.as_ptr(),
            q.as_ptr(),
            a.as_ptr(),
            l.as_ptr(),
            u.as_ptr(),
            x.as_mut_ptr(),
            ptr::null_mut(),
            &mut status,
        )
    };
    assert_eq!(s, PvkoStatus::NotOptimal);
    assert_eq!(status, PvkoSolveStatus::Infeasible);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pvko.h")).unwrap();
    for f in [
        "pvko_version",
        "pvko_last_error_message",
        "pvko_model_from_json",
        "pvko_model_load",
        "pvko_model_free",
        "pvko_model_dims",
        "pvko_model_evaluate",
        "pvko_model_lift",
        "pvko_model_predict",
        "pvko_controller_from_json",
        "pvko_controller_free",
        "pvko_controller_horizon",
        "pvko_controller_reset",
        "pvko_controller_step",
        "pvko_qp_solve_dense",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
}
