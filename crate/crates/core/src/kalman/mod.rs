//! Exact inference for a fixed `θ`: Kalman filter, prediction-error
//! log-likelihood and the disturbance smoother, with missing observations
//! handled by dropping rows of `Z̃` and `R̃`.

pub mod scalar;
mod smoother;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor, LN_2PI};
pub use crate::model::StateSpace;

pub use smoother::{disturbance_smoother, unit_stats, SmootherResult, UnitStats};

/// Innovation covariances with a worse condition estimate are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Observation sequence for one unit: `y[t]` is the stacked observation at
/// 0-based time `t`, `observed[t][row]` says which rows are present.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub y: Vec<DVector<f64>>,
    pub observed: Vec<Vec<bool>>,
}

impl Observations {
    pub fn complete(y: Vec<DVector<f64>>) -> Self {
        let observed = y.iter().map(|v| vec![true; v.len()]).collect();
        Observations { y, observed }
    }

    pub fn n_time(&self) -> usize {
        self.y.len()
    }

    pub fn rows(&self, t: usize) -> Vec<usize> {
        self.observed[t]
            .iter()
            .enumerate()
            .filter_map(|(k, &o)| o.then_some(k))
            .collect()
    }
}

/// Observation equation actually used at one time point, after removing
/// missing rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStep {
    pub rows: Vec<usize>,
    pub y: DVector<f64>,
    pub z: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

/// Row-reduces the observation equation at every time point.
pub fn observation_steps(sys: &StateSpace, obs: &Observations) -> Result<Vec<ObservationStep>> {
    let full = sys.obs_dim();
    let mut steps = Vec::with_capacity(obs.n_time());
    for t in 0..obs.n_time() {
        if obs.y[t].len() != full || obs.observed[t].len() != full {
            return Err(Error::dim(format!(
                "observation at t={} has length {}, system expects {full}",
                t + 1,
                obs.y[t].len()
            )));
        }
        let z = sys.observation_at(t + 1);
        let rows = obs.rows(t);
        let step = if rows.len() == full {
            ObservationStep {
                rows,
                y: obs.y[t].clone(),
                z: z.clone(),
                h: sys.obs_cov.clone(),
            }
        } else {
            ObservationStep {
                y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| obs.y[t][r])),
                z: linalg::select_rows(z, &rows),
                h: linalg::select_square(&sys.obs_cov, &rows),
                rows,
            }
        };
        if step.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite observation at t={}", t + 1)));
        }
        steps.push(step);
    }
    Ok(steps)
}

/// Forward pass output. Vectors are indexed by 0-based time; at a fully
/// missing time the innovation quantities are empty (zero-length).
#[derive(Debug, Clone)]
pub struct FilterResult {
    pub rows: Vec<Vec<usize>>,
    /// Row-reduced `Z_t`.
    pub z: Vec<DMatrix<f64>>,
    /// `ν_t`
    pub innovation: Vec<DVector<f64>>,
    /// `F_t`
    pub innovation_cov: Vec<DMatrix<f64>>,
    /// `F_t⁻¹`
    pub innovation_inv: Vec<DMatrix<f64>>,
    /// `K_t = T P_{t|t−1} Z_tᵀ F_t⁻¹`
    pub gain: Vec<DMatrix<f64>>,
    /// `L_t = T − K_t Z_t`
    pub l: Vec<DMatrix<f64>>,
    pub predicted_mean: Vec<DVector<f64>>,
    pub predicted_cov: Vec<DMatrix<f64>>,
    pub filtered_mean: Vec<DVector<f64>>,
    pub filtered_cov: Vec<DMatrix<f64>>,
    /// `x_{T+1|T}`, `P_{T+1|T}`
    pub next_mean: DVector<f64>,
    pub next_cov: DMatrix<f64>,
    pub loglik: f64,
}

impl FilterResult {
    pub fn n_time(&self) -> usize {
        self.innovation.len()
    }

    pub fn to_json(&self) -> Value {
        fn mat(m: &DMatrix<f64>) -> Value {
            json!(m.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
        }
        fn vec(v: &DVector<f64>) -> Value {
            json!(v.iter().copied().collect::<Vec<_>>())
        }
        let steps: Vec<Value> = (0..self.n_time())
            .map(|t| {
                json!({
                    "t": t + 1,
                    "observed_rows": self.rows[t],
                    "innovation": vec(&self.innovation[t]),
                    "innovation_cov": mat(&self.innovation_cov[t]),
                    "gain": mat(&self.gain[t]),
                    "l": mat(&self.l[t]),
                    "predicted_mean": vec(&self.predicted_mean[t]),
                    "predicted_cov": mat(&self.predicted_cov[t]),
                    "filtered_mean": vec(&self.filtered_mean[t]),
                    "filtered_cov": mat(&self.filtered_cov[t]),
                })
            })
            .collect();
        json!({ "loglik": self.loglik, "steps": steps })
    }
}

pub(crate) fn factor_innovation(f: &DMatrix<f64>, t: usize) -> Result<SpdFactor> {
    match SpdFactor::new(f) {
        Some(fac) if fac.condition <= MAX_CONDITION && fac.condition.is_finite() => Ok(fac),
        Some(fac) => Err(Error::SingularInnovation {
            t,
            condition: fac.condition,
        }),
        None => Err(Error::SingularInnovation {
            t,
            condition: f64::INFINITY,
        }),
    }
}

/// Kalman filter over explicit per-time observation equations.
pub fn filter_steps(sys: &StateSpace, steps: &[ObservationStep]) -> Result<FilterResult> {
    let n = steps.len();
    let p = sys.state_dim();
    if sys.init_mean.len() != p || sys.init_cov.shape() != (p, p) {
        return Err(Error::dim("initial state does not match the state dimension"));
    }
    if SpdFactor::new(&sys.init_cov).is_none() {
        return Err(Error::NotPositiveDefinite("initial state covariance P₁".into()));
    }
    let mut out = FilterResult {
        rows: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        innovation: Vec::with_capacity(n),
        innovation_cov: Vec::with_capacity(n),
        innovation_inv: Vec::with_capacity(n),
        gain: Vec::with_capacity(n),
        l: Vec::with_capacity(n),
        predicted_mean: Vec::with_capacity(n),
        predicted_cov: Vec::with_capacity(n),
        filtered_mean: Vec::with_capacity(n),
        filtered_cov: Vec::with_capacity(n),
        next_mean: DVector::zeros(0),
        next_cov: DMatrix::zeros(0, 0),
        loglik: 0.0,
    };
    let mut a = sys.init_mean.clone();
    let mut pm = sys.init_cov.clone();
    for (k, step) in steps.iter().enumerate() {
        let t = k + 1;
        let tn = sys.transition_at(t);
        if step.z.ncols() != p {
            return Err(Error::dim(format!("observation matrix at t={t} has {} columns, expected {p}", step.z.ncols())));
        }
        let nobs = step.rows.len();
        let (a_next, p_next);
        if nobs == 0 {
            out.innovation.push(DVector::zeros(0));
            out.innovation_cov.push(DMatrix::zeros(0, 0));
            out.innovation_inv.push(DMatrix::zeros(0, 0));
            out.gain.push(DMatrix::zeros(p, 0));
            out.l.push(tn.clone());
            out.filtered_mean.push(a.clone());
            out.filtered_cov.push(pm.clone());
            a_next = tn * &a;
            p_next = linalg::symmetrized(tn * &pm * tn.transpose() + &sys.state_cov);
        } else {
            let v = &step.y - &step.z * &a;
            let pz = &pm * step.z.transpose();
            let f = linalg::symmetrized(&step.z * &pz + &step.h);
            let fac = factor_innovation(&f, t)?;
            let finv = fac.inverse;
            let finv_v = &finv * &v;
            out.loglik -= 0.5 * (nobs as f64 * LN_2PI + fac.log_det + v.dot(&finv_v));
            let pz_finv = &pz * &finv;
            let af = &a + &pz_finv * &v;
            let pf = linalg::symmetrized(&pm - &pz_finv * pz.transpose());
            let gain = tn * &pz_finv;
            let l = tn - &gain * &step.z;
            a_next = tn * &af;
            p_next = linalg::symmetrized(tn * &pm * l.transpose() + &sys.state_cov);
            out.innovation.push(v);
            out.innovation_cov.push(f);
            out.innovation_inv.push(finv);
            out.gain.push(gain);
            out.l.push(l);
            out.filtered_mean.push(af);
            out.filtered_cov.push(pf);
        }
        out.rows.push(step.rows.clone());
        out.z.push(step.z.clone());
        out.predicted_mean.push(std::mem::replace(&mut a, a_next));
        out.predicted_cov.push(std::mem::replace(&mut pm, p_next));
    }
    out.next_mean = a;
    out.next_cov = pm;
    Ok(out)
}

pub fn kalman_filter(sys: &StateSpace, obs: &Observations) -> Result<FilterResult> {
    filter_steps(sys, &observation_steps(sys, obs)?)
}

/// Prediction-error log-likelihood `Σ_t log N(ν_t; 0, F_t)` over observed times.
pub fn loglik(sys: &StateSpace, obs: &Observations) -> Result<f64> {
    if let Some(s) = scalar::ScalarSystem::from_state_space(sys) {
        let (y, mask) = scalar::flatten(obs);
        return scalar::loglik(&s, &y, &mask);
    }
    Ok(kalman_filter(sys, obs)?.loglik)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_sys(t: f64, q: f64, h: f64, p1: f64) -> StateSpace {
        StateSpace::simple(
            DMatrix::from_element(1, 1, t),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, h),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, p1),
        )
    }

    fn obs(values: &[f64]) -> Observations {
        Observations::complete(values.iter().map(|&v| DVector::from_element(1, v)).collect())
    }

    #[test]
    fn exact_observation_limit() {
        let sys = scalar_sys(0.0, 1.0, 1e-12, 1.0);
        let f = kalman_filter(&sys, &obs(&[0.7, -1.3, 2.0])).unwrap();
        for (m, y) in f.filtered_mean.iter().zip([0.7, -1.3, 2.0]) {
            assert!((m[0] - y).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_data_has_zero_loglik() {
        let sys = scalar_sys(0.5, 1.0, 1.0, 1.0);
        assert_eq!(loglik(&sys, &obs(&[])).unwrap(), 0.0);
        assert_eq!(kalman_filter(&sys, &obs(&[])).unwrap().loglik, 0.0);
    }

    #[test]
    fn two_point_loglik_matches_bivariate_density() {
        let (t, q, h, p1) = (0.6, 0.8, 0.3, 1.7);
        let sys = scalar_sys(t, q, h, p1);
        let y = [0.4, -0.9];
        // Cov(y1,y1)=p1+h, Cov(y1,y2)=t p1, Cov(y2,y2)=t² p1 + q + h
        let cov = DMatrix::from_row_slice(2, 2, &[p1 + h, t * p1, t * p1, t * t * p1 + q + h]);
        let exact = linalg::gaussian_log_density(&DVector::from_row_slice(&y), &DVector::zeros(2), &cov).unwrap();
        assert!((loglik(&sys, &obs(&y)).unwrap() - exact).abs() < 1e-10);
        assert!((kalman_filter(&sys, &obs(&y)).unwrap().loglik - exact).abs() < 1e-10);
    }

    #[test]
    fn larger_noise_lowers_likelihood_for_large_residuals() {
        let data = obs(&[0.1, 0.05, -0.02, 0.08]);
        let l1 = loglik(&scalar_sys(0.3, 0.01, 0.3, 1.0), &data).unwrap();
        let l2 = loglik(&scalar_sys(0.3, 0.01, 0.6, 1.0), &data).unwrap();
        assert!(l2 < l1);
    }

    #[test]
    fn riccati_reaches_fixed_point() {
        let (t, q, h) = (0.3, 3.0, 0.3);
        let sys = scalar_sys(t, q, h, 3.2);
        let f = kalman_filter(&sys, &obs(&[0.0; 60])).unwrap();
        // independent fixed-point iteration of P ↦ t² P h / (P + h) + q
        let mut p = 1.0;
        for _ in 0..500 {
            p = t * t * p * h / (p + h) + q;
        }
        assert!((f.predicted_cov[59][(0, 0)] - p).abs() < 1e-10);
    }

    #[test]
    fn covariance_update_forms_agree() {
        let sys = StateSpace::simple(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.5]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.4]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
            DMatrix::from_element(1, 1, 0.2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        );
        let f = kalman_filter(&sys, &obs(&[0.3, 1.1, -0.4, 0.2])).unwrap();
        for k in 0..3 {
            let tm = &sys.transition[0];
            let alt = tm * &f.filtered_cov[k] * tm.transpose() + &sys.state_cov;
            assert!((&f.predicted_cov[k + 1] - alt).amax() < 1e-12);
        }
    }

    #[test]
    fn singular_innovation_names_time() {
        let mut sys = scalar_sys(0.0, 0.0, 0.0, 1.0);
        sys.init_cov[(0, 0)] = 1.0;
        let err = kalman_filter(&sys, &obs(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::SingularInnovation { t: 2, .. }));
    }
}
