//! C interface to `messm`.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a
//! [`MessmStatus`]; the message for the last failure on the calling thread is
//! available from [`messm_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use messm::em::{fit_em, EmConfig};
use messm::fit::FitResult;
use messm::likelihood::conditional_loglik;
use messm::mcmc::McmcConfig;
use messm::model::config::ModelConfig;
use messm::score::{fit_quasi_newton, QuasiNewtonConfig};
use messm::simulate::{simulate_panel, Missingness, SimConfig};
use messm::{EffectsDesign, Error, ModelSpec, PanelData, Params};
use nalgebra::DVector;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Numerical = 5,
    NotConverged = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessmMethod {
    Em = 0,
    Score = 1,
}

/// A model and effects design for a fixed number of individuals.
pub struct MessmModel {
    model: ModelSpec,
    effects: EffectsDesign,
}

/// Panel observations with their missingness mask.
pub struct MessmPanel {
    data: PanelData,
}

/// Result of an estimation run.
pub struct MessmFit {
    fit: FitResult,
}

/// Estimation settings; obtain defaults from [`messm_fit_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MessmFitOptions {
    pub method: MessmMethod,
    pub max_iter: usize,
    pub tol: f64,
    pub draws: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> MessmStatus {
    match e {
        Error::Io(_) => MessmStatus::Io,
        Error::Csv(c) if c.is_io_error() => MessmStatus::Io,
        Error::Config(_) | Error::Json(_) | Error::Csv(_) | Error::Data { .. } | Error::Unsupported(_) => {
            MessmStatus::Config
        }
        Error::Dimension(_) | Error::Parameter(_) => MessmStatus::InvalidArgument,
        Error::SingularInnovation { .. }
        | Error::NotPositiveDefinite(_)
        | Error::ZeroAcceptance { .. }
        | Error::DegenerateWeights { .. }
        | Error::Draw { .. } => MessmStatus::Numerical,
    }
}

struct Failure(MessmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MessmStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<MessmStatus, Failure>) -> MessmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err(Failure(s, msg))) => {
            set_error(msg);
            s
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MessmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MessmStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn messm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a model for `m` individuals from a JSON model configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn messm_model_from_json(json: *const c_char, m: usize, out: *mut *mut MessmModel) -> MessmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(json, "json")?;
        let (model, effects) = ModelConfig::from_json(text)?.build(m)?;
        put(out, MessmModel { model, effects });
        Ok(MessmStatus::Ok)
    })
}

/// # Safety
/// `model` must be null or a handle from [`messm_model_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn messm_model_free(model: *mut MessmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of fixed effects `a`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn messm_model_n_fixed(model: *const MessmModel) -> usize {
    model.as_ref().map_or(0, |m| m.effects.n_fixed())
}

/// Number of variance parameters `δ`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn messm_model_n_delta(model: *const MessmModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.n_delta)
}

/// Length of each individual's stacked `θ`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn messm_model_theta_dim(model: *const MessmModel) -> usize {
    model.as_ref().map_or(0, |m| m.effects.stacked_dim())
}

/// Creates a panel from `values[(i * n_time + t) * obs_dim + c]`; a NaN in
/// any component marks the whole cell `(i, t)` missing.
///
/// # Safety
/// `values` must point to `m * n_time * obs_dim` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn messm_panel_new(
    m: usize,
    n_time: usize,
    obs_dim: usize,
    values: *const f64,
    out: *mut *mut MessmPanel,
) -> MessmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if m == 0 || n_time == 0 || obs_dim == 0 {
            return Err(Failure(MessmStatus::InvalidArgument, "panel dimensions must be positive".into()));
        }
        let len = m
            .checked_mul(n_time)
            .and_then(|v| v.checked_mul(obs_dim))
            .ok_or_else(|| Failure(MessmStatus::InvalidArgument, "panel is too large".into()))?;
        let vals = slice_arg(values, len, "values")?;
        let mut data = PanelData::new(m, n_time, obs_dim);
        for i in 0..m {
            for t in 0..n_time {
                let c = (i * n_time + t) * obs_dim;
                let cell = &vals[c..c + obs_dim];
                if cell.iter().all(|v| v.is_finite()) {
                    data.set(i, t, cell)?;
                }
            }
        }
        put(out, MessmPanel { data });
        Ok(MessmStatus::Ok)
    })
}

/// Reads a panel CSV (`individual,t,component,value,observed`).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn messm_panel_load_csv(path: *const c_char, out: *mut *mut MessmPanel) -> MessmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = PanelData::load_csv(Path::new(str_arg(path, "path")?))?;
        put(out, MessmPanel { data });
        Ok(MessmStatus::Ok)
    })
}

/// Simulates a complete panel of `n_time` periods.
///
/// # Safety
/// `fixed`/`delta` must point to `n_fixed`/`n_delta` doubles; `model` must be live.
#[no_mangle]
pub unsafe extern "C" fn messm_simulate(
    model: *const MessmModel,
    fixed: *const f64,
    n_fixed: usize,
    delta: *const f64,
    n_delta: usize,
    n_time: usize,
    seed: u64,
    out: *mut *mut MessmPanel,
) -> MessmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mm = handle(model, "model")?;
        let cfg = SimConfig {
            params: Params::new(slice_arg(fixed, n_fixed, "fixed")?.to_vec(), slice_arg(delta, n_delta, "delta")?.to_vec()),
            m: mm.effects.m,
            n_time,
            seed,
            missing: Missingness::None,
            pre_sample: None,
        };
        let (data, _) = simulate_panel(&mm.model, &mm.effects, &cfg)?;
        put(out, MessmPanel { data });
        Ok(MessmStatus::Ok)
    })
}

/// # Safety
/// `panel` must be null or a live panel handle.
#[no_mangle]
pub unsafe extern "C" fn messm_panel_free(panel: *mut MessmPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Number of individuals, or 0 for a null handle.
///
/// # Safety
/// `panel` must be null or a live panel handle.
#[no_mangle]
pub unsafe extern "C" fn messm_panel_m(panel: *const MessmPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.data.m)
}

/// Number of time points, or 0 for a null handle.
///
/// # Safety
/// `panel` must be null or a live panel handle.
#[no_mangle]
pub unsafe extern "C" fn messm_panel_n_time(panel: *const MessmPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.data.n_time)
}

/// Copies the panel into `values` in the layout of [`messm_panel_new`], with
/// NaN at missing cells.
///
/// # Safety
/// `values` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn messm_panel_values(panel: *const MessmPanel, values: *mut f64, len: usize) -> MessmStatus {
    guard(|| {
        let d = &handle(panel, "panel")?.data;
        let need = d.m * d.n_time * d.obs_dim;
        if values.is_null() {
            return Err(null("values"));
        }
        if len < need {
            return Err(Failure(MessmStatus::InvalidArgument, format!("buffer holds {len} values, {need} needed")));
        }
        let buf = std::slice::from_raw_parts_mut(values, need);
        for i in 0..d.m {
            for t in 0..d.n_time {
                let c = (i * d.n_time + t) * d.obs_dim;
                buf[c..c + d.obs_dim].copy_from_slice(d.get(i, t));
            }
        }
        Ok(MessmStatus::Ok)
    })
}

/// Kalman log-likelihood `log f(y | θ, δ)` with `theta[i * theta_dim + k]`.
///
/// # Safety
/// `theta` must hold `m * theta_dim` doubles and `delta` `n_delta`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn messm_conditional_loglik(
    model: *const MessmModel,
    panel: *const MessmPanel,
    theta: *const f64,
    theta_len: usize,
    delta: *const f64,
    n_delta: usize,
    out: *mut f64,
) -> MessmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mm = handle(model, "model")?;
        let data = &handle(panel, "panel")?.data;
        let d = mm.effects.stacked_dim();
        if theta_len != data.m * d {
            return Err(Failure(
                MessmStatus::InvalidArgument,
                format!("θ has {theta_len} values, expected {}", data.m * d),
            ));
        }
        let th = slice_arg(theta, theta_len, "theta")?;
        let thetas: Vec<DVector<f64>> = th.chunks(d.max(1)).map(DVector::from_column_slice).collect();
        *out = conditional_loglik(data, &mm.model, &mm.effects, &thetas, slice_arg(delta, n_delta, "delta")?)?;
        Ok(MessmStatus::Ok)
    })
}

#[no_mangle]
pub extern "C" fn messm_fit_options_default() -> MessmFitOptions {
    let em = EmConfig::default();
    MessmFitOptions {
        method: MessmMethod::Em,
        max_iter: em.max_iter,
        tol: em.tol,
        draws: em.mcmc.draws,
        burn_in: em.mcmc.burn_in,
        thin: em.mcmc.thin,
        seed: em.seed,
    }
}

/// Estimates `(a, δ)` from the starting values. Returns
/// `MESSM_STATUS_NOT_CONVERGED` with a usable `*out` when the iteration limit
/// was reached.
///
/// # Safety
/// Pointers must be valid for the stated lengths; handles must be live.
#[no_mangle]
pub unsafe extern "C" fn messm_fit(
    model: *const MessmModel,
    panel: *const MessmPanel,
    start_fixed: *const f64,
    n_fixed: usize,
    start_delta: *const f64,
    n_delta: usize,
    options: *const MessmFitOptions,
    out: *mut *mut MessmFit,
) -> MessmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mm = handle(model, "model")?;
        let data = &handle(panel, "panel")?.data;
        let opts = match options.as_ref() {
            Some(o) => *o,
            None => messm_fit_options_default(),
        };
        let start = Params::new(
            slice_arg(start_fixed, n_fixed, "start_fixed")?.to_vec(),
            slice_arg(start_delta, n_delta, "start_delta")?.to_vec(),
        );
        let mcmc = McmcConfig {
            draws: opts.draws,
            burn_in: opts.burn_in,
            thin: opts.thin,
            ..McmcConfig::default()
        };
        let fit = match opts.method {
            MessmMethod::Em => fit_em(
                data,
                &mm.model,
                &mm.effects,
                &start,
                &EmConfig {
                    max_iter: opts.max_iter,
                    tol: opts.tol,
                    mcmc,
                    seed: opts.seed,
                    ..EmConfig::default()
                },
            )?,
            MessmMethod::Score => fit_quasi_newton(
                data,
                &mm.model,
                &mm.effects,
                &start,
                &QuasiNewtonConfig {
                    max_iter: opts.max_iter,
                    tol: opts.tol,
                    mcmc,
                    seed: opts.seed,
                    ..QuasiNewtonConfig::default()
                },
            )?,
        };
        let converged = fit.converged;
        if !converged {
            set_error(fit.message.clone());
        }
        put(out, MessmFit { fit });
        Ok(if converged { MessmStatus::Ok } else { MessmStatus::NotConverged })
    })
}

/// # Safety
/// `fit` must be null or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn messm_fit_free(fit: *mut MessmFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Copies the estimate `(a, δ)` into `values`.
///
/// # Safety
/// `values` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn messm_fit_params(fit: *const MessmFit, values: *mut f64, len: usize) -> MessmStatus {
    guard(|| {
        let p = handle(fit, "fit")?.fit.params.to_vec();
        if values.is_null() {
            return Err(null("values"));
        }
        if len < p.len() {
            return Err(Failure(MessmStatus::InvalidArgument, format!("buffer holds {len} values, {} needed", p.len())));
        }
        std::slice::from_raw_parts_mut(values, p.len()).copy_from_slice(&p);
        Ok(MessmStatus::Ok)
    })
}

/// Number of iterations performed, or 0 for a null handle.
///
/// # Safety
/// `fit` must be null or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn messm_fit_iterations(fit: *const MessmFit) -> usize {
    fit.as_ref().map_or(0, |f| f.fit.iterations)
}

/// 1 when the run converged, 0 otherwise (including a null handle).
///
/// # Safety
/// `fit` must be null or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn messm_fit_converged(fit: *const MessmFit) -> i32 {
    fit.as_ref().map_or(0, |f| i32::from(f.fit.converged))
}

/// The fit report as a JSON string to be released with [`messm_string_free`];
/// null for a null handle.
///
/// # Safety
/// `fit` must be null or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn messm_fit_to_json(fit: *const MessmFit) -> *mut c_char {
    let Some(f) = fit.as_ref() else {
        return ptr::null_mut();
    };
    CString::new(f.fit.to_json().to_string()).map_or(ptr::null_mut(), CString::into_raw)
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn messm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
