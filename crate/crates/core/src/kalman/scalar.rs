//! Filter and smoother for a single individual with scalar state and
//! observation. Same recursions as the matrix path without the allocations;
//! the estimation loops for scalar models spend nearly all their time here.

use nalgebra::DMatrix;

use super::{Observations, StateSpace, UnitStats};
use crate::error::{Error, Result};
use crate::linalg::LN_2PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarSystem {
    /// Transition per regime.
    pub t: [f64; 2],
    /// Observation coefficient per regime.
    pub z: [f64; 2],
    pub q: f64,
    pub h: f64,
    pub a1: f64,
    pub p1: f64,
    pub boundary: Option<usize>,
}

impl ScalarSystem {
    pub fn from_state_space(sys: &StateSpace) -> Option<Self> {
        if sys.state_dim() != 1 || sys.obs_dim() != 1 {
            return None;
        }
        let last = sys.transition.len() - 1;
        let zl = sys.observation.len() - 1;
        Some(ScalarSystem {
            t: [sys.transition[0][(0, 0)], sys.transition[last][(0, 0)]],
            z: [sys.observation[0][(0, 0)], sys.observation[zl][(0, 0)]],
            q: sys.state_cov[(0, 0)],
            h: sys.obs_cov[(0, 0)],
            a1: sys.init_mean[0],
            p1: sys.init_cov[(0, 0)],
            boundary: if last > 0 || zl > 0 { sys.boundary } else { None },
        })
    }

    #[inline]
    fn regime(&self, t: usize) -> usize {
        match self.boundary {
            Some(tp) if t > tp => 1,
            _ => 0,
        }
    }

    /// Transition from 1-based `t` to `t + 1`.
    #[inline]
    fn t_at(&self, t: usize) -> f64 {
        self.t[self.regime(t + 1)]
    }

    #[inline]
    fn z_at(&self, t: usize) -> f64 {
        self.z[self.regime(t)]
    }
}

pub fn flatten(obs: &Observations) -> (Vec<f64>, Vec<bool>) {
    (obs.y.iter().map(|v| v[0]).collect(), obs.observed.iter().map(|o| o[0]).collect())
}

fn check(f: f64, t: usize) -> Result<()> {
    if f > 0.0 && f.is_finite() {
        Ok(())
    } else {
        Err(Error::SingularInnovation {
            t,
            condition: f64::INFINITY,
        })
    }
}

pub fn loglik(s: &ScalarSystem, y: &[f64], observed: &[bool]) -> Result<f64> {
    if !(s.p1 > 0.0) {
        return Err(Error::NotPositiveDefinite("initial state covariance P₁".into()));
    }
    let (mut a, mut p) = (s.a1, s.p1);
    let mut ll = 0.0;
    for (k, (&yk, &ok)) in y.iter().zip(observed).enumerate() {
        let t = k + 1;
        let tn = s.t_at(t);
        if ok {
            let z = s.z_at(t);
            let v = yk - z * a;
            let f = z * z * p + s.h;
            check(f, t)?;
            ll -= 0.5 * (LN_2PI + f.ln() + v * v / f);
            let gain = tn * p * z / f;
            a = tn * a + gain * v;
            p = tn * p * (tn - gain * z) + s.q;
        } else {
            a *= tn;
            p = tn * tn * p + s.q;
        }
    }
    Ok(ll)
}

/// Filter + disturbance smoother reduced to [`UnitStats`].
pub fn stats(s: &ScalarSystem, y: &[f64], observed: &[bool]) -> Result<UnitStats> {
    if !(s.p1 > 0.0) {
        return Err(Error::NotPositiveDefinite("initial state covariance P₁".into()));
    }
    let n = y.len();
    let mut fv = vec![0.0; n]; // F⁻¹ν
    let mut finv = vec![0.0; n];
    let mut gain = vec![0.0; n];
    let mut l = vec![0.0; n];
    let (mut a, mut p) = (s.a1, s.p1);
    let mut ll = 0.0;
    for k in 0..n {
        let t = k + 1;
        let tn = s.t_at(t);
        if observed[k] {
            let z = s.z_at(t);
            let v = y[k] - z * a;
            let f = z * z * p + s.h;
            check(f, t)?;
            ll -= 0.5 * (LN_2PI + f.ln() + v * v / f);
            finv[k] = 1.0 / f;
            fv[k] = v / f;
            gain[k] = tn * p * z / f;
            l[k] = tn - gain[k] * z;
            a = tn * a + gain[k] * v;
            p = tn * p * l[k] + s.q;
        } else {
            l[k] = tn;
            a *= tn;
            p = tn * tn * p + s.q;
        }
    }

    let mut obs_terms = vec![None; n];
    let mut state = vec![0.0; n];
    let (mut r, mut nn) = (0.0, 0.0);
    for k in (0..n).rev() {
        if observed[k] {
            let z = s.z_at(k + 1);
            let e = fv[k] - gain[k] * r;
            let d = finv[k] + gain[k] * gain[k] * nn;
            obs_terms[k] = Some(DMatrix::from_element(1, 1, e * e - d));
            r = z * fv[k] + l[k] * r;
            nn = z * z * finv[k] + l[k] * l[k] * nn;
        } else {
            r *= l[k];
            nn *= l[k] * l[k];
        }
        state[k] = r * r - nn;
    }
    let init = if n == 0 { 0.0 } else { state[0] };
    Ok(UnitStats {
        loglik: ll,
        obs_terms: vec![obs_terms],
        state_terms: state.iter().skip(1).map(|&v| DMatrix::from_element(1, 1, v)).collect(),
        init_term: DMatrix::from_element(1, 1, init),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::{disturbance_smoother, kalman_filter, smoother::stats_from};
    use nalgebra::DVector;

    #[test]
    fn matches_matrix_path() {
        let mut sys = StateSpace::simple(
            DMatrix::from_element(1, 1, 0.3),
            DMatrix::from_element(1, 1, 1.4),
            DMatrix::from_element(1, 1, 3.0),
            DMatrix::from_element(1, 1, 0.3),
            DVector::from_element(1, 0.2),
            DMatrix::from_element(1, 1, 3.2),
        );
        sys.transition.push(DMatrix::from_element(1, 1, -0.6));
        sys.observation.push(DMatrix::from_element(1, 1, 0.9));
        sys.boundary = Some(3);
        let y = [0.5, -1.0, 2.2, 0.1, 0.0, -0.7, 1.3];
        let observed = [true, false, true, true, false, false, true];
        let obs = Observations {
            y: y.iter().map(|&v| DVector::from_element(1, v)).collect(),
            observed: observed.iter().map(|&o| vec![o]).collect(),
        };
        let f = kalman_filter(&sys, &obs).unwrap();
        let sm = disturbance_smoother(&sys, &f);
        let generic = stats_from(&f, &sm, 1, 1);
        let s = ScalarSystem::from_state_space(&sys).unwrap();
        let fast = stats(&s, &y, &observed).unwrap();
        assert!((fast.loglik - f.loglik).abs() < 1e-12);
        assert!((loglik(&s, &y, &observed).unwrap() - f.loglik).abs() < 1e-12);
        for (a, b) in fast.obs_terms[0].iter().zip(&generic.obs_terms[0]) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).amax() < 1e-12),
                (None, None) => {}
                _ => panic!("missingness pattern differs"),
            }
        }
        for (a, b) in fast.state_terms.iter().zip(&generic.state_terms) {
            assert!((a - b).amax() < 1e-12);
        }
        assert!((&fast.init_term - &generic.init_term).amax() < 1e-12);
    }
}
