use nalgebra::{DMatrix, DVector};

use super::{kalman_filter, scalar, FilterResult, Observations, StateSpace};
use crate::error::Result;
use crate::linalg;

/// Backward-pass output, indexed by 0-based time.
///
/// `r[t]`, `n[t]` hold the paper-style `r_t`, `N_t` for `t = 0..=T`, with
/// `r[T] = 0` and `N[T] = 0`. Entry 0 of the state-disturbance vectors is the
/// smoothed deviation of the first state from its prior mean, `P₁ r₀`, with
/// variance `P₁ − P₁ N₀ P₁`; entry `k ≥ 1` is `v̂ = Q r_k`.
#[derive(Debug, Clone)]
pub struct SmootherResult {
    pub e: Vec<DVector<f64>>,
    pub d: Vec<DMatrix<f64>>,
    pub r: Vec<DVector<f64>>,
    pub n: Vec<DMatrix<f64>>,
    pub obs_disturbance: Vec<DVector<f64>>,
    pub obs_disturbance_var: Vec<DMatrix<f64>>,
    pub state_disturbance: Vec<DVector<f64>>,
    pub state_disturbance_var: Vec<DMatrix<f64>>,
}

pub fn disturbance_smoother(sys: &StateSpace, filter: &FilterResult) -> SmootherResult {
    let n_time = filter.n_time();
    let p = sys.state_dim();
    let mut e = vec![DVector::zeros(0); n_time];
    let mut d = vec![DMatrix::zeros(0, 0); n_time];
    let mut r = vec![DVector::zeros(p); n_time + 1];
    let mut nn = vec![DMatrix::zeros(p, p); n_time + 1];
    for k in (0..n_time).rev() {
        let l = &filter.l[k];
        let lt = l.transpose();
        if filter.rows[k].is_empty() {
            r[k] = &lt * &r[k + 1];
            nn[k] = linalg::symmetrized(&lt * &nn[k + 1] * l);
        } else {
            let finv = &filter.innovation_inv[k];
            let kt = filter.gain[k].transpose();
            let zt = filter.z[k].transpose();
            let finv_v = finv * &filter.innovation[k];
            e[k] = &finv_v - &kt * &r[k + 1];
            d[k] = linalg::symmetrized(finv + &kt * &nn[k + 1] * &filter.gain[k]);
            r[k] = &zt * &finv_v + &lt * &r[k + 1];
            nn[k] = linalg::symmetrized(&zt * finv * &filter.z[k] + &lt * &nn[k + 1] * l);
        }
    }

    let mut obs_disturbance = Vec::with_capacity(n_time);
    let mut obs_disturbance_var = Vec::with_capacity(n_time);
    for k in 0..n_time {
        let h = linalg::select_square(&sys.obs_cov, &filter.rows[k]);
        obs_disturbance.push(&h * &e[k]);
        obs_disturbance_var.push(linalg::symmetrized(&h - &h * &d[k] * &h));
    }
    let mut state_disturbance = Vec::with_capacity(n_time);
    let mut state_disturbance_var = Vec::with_capacity(n_time);
    for k in 0..n_time {
        let cov = if k == 0 { &sys.init_cov } else { &sys.state_cov };
        state_disturbance.push(cov * &r[k]);
        state_disturbance_var.push(linalg::symmetrized(cov - cov * &nn[k] * cov));
    }

    SmootherResult {
        e,
        d,
        r,
        n: nn,
        obs_disturbance,
        obs_disturbance_var,
        state_disturbance,
        state_disturbance_var,
    }
}

/// Per-draw sufficient statistics for one filtering unit.
#[derive(Debug, Clone)]
pub struct UnitStats {
    pub loglik: f64,
    /// `[member][t]`: the member's block of `e_t e_tᵀ − D_t`, or `None` when
    /// the member is unobserved at `t`.
    pub obs_terms: Vec<Vec<Option<DMatrix<f64>>>>,
    /// `r_k r_kᵀ − N_k` for `k = 1..T−1` (entry `k − 1`).
    pub state_terms: Vec<DMatrix<f64>>,
    /// `r₀ r₀ᵀ − N₀`
    pub init_term: DMatrix<f64>,
}

impl UnitStats {
    pub fn state_sum(&self) -> DMatrix<f64> {
        let p = self.init_term.nrows();
        self.state_terms.iter().fold(DMatrix::zeros(p, p), |acc, s| acc + s)
    }
}

/// Runs the filter and smoother and reduces them to [`UnitStats`]. `obs_dim`
/// is the observation dimension of one member.
pub fn unit_stats(sys: &StateSpace, obs: &Observations, obs_dim: usize) -> Result<UnitStats> {
    if let Some(s) = scalar::ScalarSystem::from_state_space(sys) {
        let (y, mask) = scalar::flatten(obs);
        return scalar::stats(&s, &y, &mask);
    }
    let filter = kalman_filter(sys, obs)?;
    let sm = disturbance_smoother(sys, &filter);
    Ok(stats_from(&filter, &sm, obs_dim, sys.obs_dim() / obs_dim))
}

pub(crate) fn stats_from(filter: &FilterResult, sm: &SmootherResult, obs_dim: usize, n_members: usize) -> UnitStats {
    let n_time = filter.n_time();
    let q = obs_dim;
    let mut obs_terms = vec![vec![None; n_time]; n_members];
    for k in 0..n_time {
        let rows = &filter.rows[k];
        if rows.is_empty() {
            continue;
        }
        let g = &sm.e[k] * sm.e[k].transpose() - &sm.d[k];
        for (member, slot) in obs_terms.iter_mut().enumerate() {
            let pos: Vec<usize> = (0..rows.len()).filter(|&a| rows[a] / q == member).collect();
            if pos.is_empty() {
                continue;
            }
            let mut block = DMatrix::zeros(q, q);
            for &a in &pos {
                for &b in &pos {
                    block[(rows[a] % q, rows[b] % q)] = g[(a, b)];
                }
            }
            slot[k] = Some(block);
        }
    }
    let outer = |k: usize| &sm.r[k] * sm.r[k].transpose() - &sm.n[k];
    UnitStats {
        loglik: filter.loglik,
        obs_terms,
        state_terms: (1..n_time).map(outer).collect(),
        init_term: outer(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_noise_state_equals_disturbance() {
        // With T = 0 the state at t ≥ 2 is the disturbance itself.
        let sys = StateSpace::simple(
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 0.5),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 2.0),
        );
        let y = [0.3, -1.2, 0.8, 2.0];
        let obs = Observations::complete(y.iter().map(|&v| DVector::from_element(1, v)).collect());
        let f = kalman_filter(&sys, &obs).unwrap();
        let s = disturbance_smoother(&sys, &f);
        for k in 1..4 {
            // x_t | y = E[x_t | y_t] = 2/(2.5) y_t
            assert!((s.state_disturbance[k][0] - 0.8 * y[k]).abs() < 1e-12);
        }
        assert_eq!(s.r[4][0], 0.0);
        assert_eq!(s.n[4][(0, 0)], 0.0);
    }
}
