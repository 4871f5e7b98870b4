//! C ABI for the pvko toolkit.
//!
//! Models and controllers are opaque handles created from JSON and released
//! with the matching `*_free` function. Every fallible call returns a
//! [`PvkoStatus`]; on failure the message is available from
//! [`pvko_last_error_message`] on the same thread. Matrices cross the boundary
//! as row-major `double` arrays whose sizes the caller supplies.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::{DMatrix, DVector};
use pvko::mpc::{build_qp, shifted_warm_start, solve_mpc, tube_control, MpcConfig, MpcSolution};
use pvko::pvko::PvkoModel;
use pvko::qp::{solve_qp, QpProblem, QpSettings, QpStatus};
use pvko::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvkoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    NumericalError = 4,
    IoError = 5,
    /// The solver stopped without an optimal solution; outputs hold the best iterate.
    NotOptimal = 6,
    Panic = 7,
}

/// Termination status of a QP or MPC solve.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvkoSolveStatus {
    Optimal = 0,
    Infeasible = 1,
    MaxIter = 2,
}

impl From<QpStatus> for PvkoSolveStatus {
    fn from(s: QpStatus) -> Self {
        match s {
            QpStatus::Optimal => PvkoSolveStatus::Optimal,
            QpStatus::Infeasible => PvkoSolveStatus::Infeasible,
            QpStatus::MaxIter => PvkoSolveStatus::MaxIter,
        }
    }
}

/// Opaque identified model.
pub struct PvkoModelHandle {
    inner: PvkoModel,
}

/// Opaque controller with its warm-start state.
pub struct PvkoControllerHandle {
    cfg: MpcConfig,
    last: Option<MpcSolution>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> PvkoStatus {
    match e {
        Error::Io(_) => PvkoStatus::IoError,
        Error::Json(_) | Error::Csv(_) | Error::Parse(_) | Error::Config(_) => PvkoStatus::ParseError,
        e if e.is_numerical() => PvkoStatus::NumericalError,
        Error::NonFinite(_) => PvkoStatus::NumericalError,
        _ => PvkoStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> Result<PvkoStatus, (PvkoStatus, String)>) -> PvkoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            PvkoStatus::Panic
        }
    }
}

fn fail(e: Error) -> (PvkoStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PvkoStatus, String) {
    (PvkoStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (PvkoStatus, String) {
    (PvkoStatus::InvalidArgument, msg.into())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PvkoStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (PvkoStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (PvkoStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn write_row_major(m: &DMatrix<f64>, out: &mut [f64]) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
}

// ------------------------------------------------------------------ misc

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pvko_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length without the NUL.
/// Pass a null `buf` to query the length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pvko_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

// ------------------------------------------------------------------ model

/// Parses a model from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pvko_model_from_json(json: *const c_char, out: *mut *mut PvkoModelHandle) -> PvkoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = c_str(json, "json")?;
        let inner = PvkoModel::from_json(text).map_err(fail)?;
        *out = Box::into_raw(Box::new(PvkoModelHandle { inner }));
        Ok(PvkoStatus::Ok)
    })
}

/// Loads a model JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pvko_model_load(path: *const c_char, out: *mut *mut PvkoModelHandle) -> PvkoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let inner = PvkoModel::load(Path::new(path)).map_err(fail)?;
        *out = Box::into_raw(Box::new(PvkoModelHandle { inner }));
        Ok(PvkoStatus::Ok)
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from a model constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pvko_model_free(model: *mut PvkoModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the state, lifted, input and vertex counts. Any output may be null.
///
/// # Safety
/// Non-null pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pvko_model_dims(
    model: *const PvkoModelHandle,
    state_dim: *mut usize,
    lifted_dim: *mut usize,
    input_dim: *mut usize,
    vertices: *mut usize,
) -> PvkoStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        for (p, v) in [
            (state_dim, m.state_dim()),
            (lifted_dim, m.lifted_dim()),
            (input_dim, m.input_dim()),
            (vertices, m.num_vertices()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(PvkoStatus::Ok)
    })
}

/// Interpolated `A(p)` (q×q) and `B(p)` (q×m), row-major.
///
/// # Safety
/// `a_out` must hold q·q doubles and `b_out` q·m doubles.
#[no_mangle]
pub unsafe extern "C" fn pvko_model_evaluate(
    model: *const PvkoModelHandle,
    p: f64,
    a_out: *mut f64,
    b_out: *mut f64,
) -> PvkoStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let (q, nu) = (m.lifted_dim(), m.input_dim());
        let a_out = slice_mut(a_out, q * q, "a_out")?;
        let b_out = slice_mut(b_out, q * nu, "b_out")?;
        let (a, b) = m.evaluate(p).map_err(fail)?;
        write_row_major(&a, a_out);
        write_row_major(&b, b_out);
        Ok(PvkoStatus::Ok)
    })
}

/// Lifts a state of length `n` into `y_out` of length q.
///
/// # Safety
/// `x` must hold `n` doubles and `y_out` the lifted dimension.
#[no_mangle]
pub unsafe extern "C" fn pvko_model_lift(
    model: *const PvkoModelHandle,
    x: *const f64,
    n: usize,
    y_out: *mut f64,
) -> PvkoStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        if n != m.state_dim() {
            return Err(invalid(format!(
                "state has {n} entries, model expects {}",
                m.state_dim()
            )));
        }
        let x = DVector::from_column_slice(slice(x, n, "x")?);
        let y = m.lift(&x).map_err(fail)?;
        slice_mut(y_out, y.len(), "y_out")?.copy_from_slice(y.as_slice());
        Ok(PvkoStatus::Ok)
    })
}

/// Open-loop prediction over `steps` steps. `inputs` holds steps·m values
/// (stage-major), `params` holds `steps` values and `out` receives
/// (steps+1)·n predicted states, the first being `x0`.
///
/// # Safety
/// Array sizes must match the description above.
#[no_mangle]
pub unsafe extern "C" fn pvko_model_predict(
    model: *const PvkoModelHandle,
    x0: *const f64,
    inputs: *const f64,
    params: *const f64,
    steps: usize,
    out: *mut f64,
) -> PvkoStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let (n, nu) = (m.state_dim(), m.input_dim());
        let x0 = DVector::from_column_slice(slice(x0, n, "x0")?);
        let u = slice(inputs, steps * nu, "inputs")?;
        let us: Vec<DVector<f64>> = if nu == 0 {
            Vec::new()
        } else {
            u.chunks(nu).map(DVector::from_column_slice).collect()
        };
        let ps = slice(params, steps, "params")?;
        let pred = m.predict(&x0, &us, ps).map_err(fail)?;
        let out = slice_mut(out, (steps + 1) * n, "out")?;
        for (k, x) in pred.iter().enumerate() {
            out[k * n..(k + 1) * n].copy_from_slice(x.as_slice());
        }
        Ok(PvkoStatus::Ok)
    })
}

// ------------------------------------------------------------------ controller

/// Parses a controller bundle (as written by `pvko synthesize`).
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pvko_controller_from_json(
    json: *const c_char,
    out: *mut *mut PvkoControllerHandle,
) -> PvkoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = c_str(json, "json")?;
        let cfg: MpcConfig = serde_json::from_str(text).map_err(|e| fail(e.into()))?;
        cfg.model.validate().map_err(fail)?;
        *out = Box::into_raw(Box::new(PvkoControllerHandle { cfg, last: None }));
        Ok(PvkoStatus::Ok)
    })
}

/// Releases a controller; null is ignored.
///
/// # Safety
/// `ctrl` must come from a controller constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pvko_controller_free(ctrl: *mut PvkoControllerHandle) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// Prediction horizon length (number of forecast values per step).
///
/// # Safety
/// `ctrl` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn pvko_controller_horizon(ctrl: *const PvkoControllerHandle) -> usize {
    ctrl.as_ref().map(|c| c.cfg.horizon).unwrap_or(0)
}

/// Drops the stored warm start.
///
/// # Safety
/// `ctrl` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn pvko_controller_reset(ctrl: *mut PvkoControllerHandle) {
    if let Some(c) = ctrl.as_mut() {
        c.last = None;
    }
}

/// One receding-horizon step: lifts the measured state `x` (n values),
/// solves the program for the parameter forecast (horizon values) and writes
/// the tube input to `u_out` (m values). `clipped_out` (nullable) reports
/// input clipping and `objective_out` (nullable) the optimal cost. Returns
/// `NotOptimal` when the solver stopped early; `u_out` is then unchanged.
///
/// # Safety
/// Array sizes must match the model dimensions and horizon.
#[no_mangle]
pub unsafe extern "C" fn pvko_controller_step(
    ctrl: *mut PvkoControllerHandle,
    x: *const f64,
    forecast: *const f64,
    u_out: *mut f64,
    clipped_out: *mut bool,
    objective_out: *mut f64,
) -> PvkoStatus {
    guard(|| {
        let c = ctrl.as_mut().ok_or_else(|| null("ctrl"))?;
        let cfg = &c.cfg;
        let (n, nh) = (cfg.model.state_dim(), cfg.horizon);
        let x = DVector::from_column_slice(slice(x, n, "x")?);
        let forecast = slice(forecast, nh, "forecast")?;
        let y = cfg.model.lift(&x).map_err(fail)?;
        let problem = build_qp(cfg, &y, forecast).map_err(fail)?;
        let warm = match &c.last {
            Some(prev) => Some(shifted_warm_start(cfg, prev, forecast[nh - 1]).map_err(fail)?),
            None => None,
        };
        let sol = solve_mpc(cfg, &problem, warm.as_ref()).map_err(fail)?;
        if sol.status != QpStatus::Optimal {
            c.last = None;
            return Err((
                PvkoStatus::NotOptimal,
                format!("MPC program not solved: {:?}", sol.status),
            ));
        }
        let (u, clipped) = tube_control(
            &sol.nominal_inputs[0],
            &sol.nominal_states[0],
            &y,
            &cfg.gain.k,
            &cfg.input_set,
        )
        .map_err(fail)?;
        slice_mut(u_out, u.len(), "u_out")?.copy_from_slice(u.as_slice());
        if !clipped_out.is_null() {
            *clipped_out = clipped;
        }
        if !objective_out.is_null() {
            *objective_out = sol.objective;
        }
        c.last = Some(sol);
        Ok(PvkoStatus::Ok)
    })
}

// ------------------------------------------------------------------ QP

/// Solves `min ½x'Px + q'x  s.t.  l <= Ax <= u` with default settings.
/// `p` is n×n and `a` is m×n, both row-major; infinite bounds are allowed.
/// `x_out` (n) and `y_out` (m, nullable) receive the primal and dual
/// solution and `status_out` (nullable) the termination status.
///
/// # Safety
/// Array sizes must match `n` and `m`.
#[no_mangle]
pub unsafe extern "C" fn pvko_qp_solve_dense(
    n: usize,
    m: usize,
    p: *const f64,
    q: *const f64,
    a: *const f64,
    l: *const f64,
    u: *const f64,
    x_out: *mut f64,
    y_out: *mut f64,
    status_out: *mut PvkoSolveStatus,
) -> PvkoStatus {
    guard(|| {
        if n == 0 {
            return Err(invalid("QP needs at least one variable"));
        }
        let pm = DMatrix::from_row_slice(n, n, slice(p, n * n, "p")?);
        let am = DMatrix::from_row_slice(m, n, slice(a, m * n, "a")?);
        let qp = QpProblem::dense(
            &pm,
            DVector::from_column_slice(slice(q, n, "q")?),
            &am,
            DVector::from_column_slice(slice(l, m, "l")?),
            DVector::from_column_slice(slice(u, m, "u")?),
        )
        .map_err(fail)?;
        let sol = solve_qp(&qp, &QpSettings::default(), None).map_err(fail)?;
        slice_mut(x_out, n, "x_out")?.copy_from_slice(sol.x.as_slice());
        if !y_out.is_null() {
            slice_mut(y_out, m, "y_out")?.copy_from_slice(sol.y.as_slice());
        }
        if !status_out.is_null() {
            *status_out = sol.status.into();
        }
        Ok(if sol.status == QpStatus::Optimal {
            PvkoStatus::Ok
        } else {
            PvkoStatus::NotOptimal
        })
    })
}
