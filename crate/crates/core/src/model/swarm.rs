//! Group-tracking dynamics: every target's velocity is pulled toward the
//! group's mean position and velocity, which couples the individuals through a
//! non-block-diagonal transition matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Discretized group dynamics for `m` targets with state
/// `(x, ẋ, y, ẏ)` per target.
#[derive(Debug, Clone)]
pub struct SwarmSystem {
    pub generator: DMatrix<f64>,
    pub transition: DMatrix<f64>,
    pub state_cov: DMatrix<f64>,
}

fn axis_blocks(alpha: f64, beta: f64, gamma: f64, m: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let own = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -alpha + alpha / m, -beta - gamma + beta / m]);
    let other = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, alpha / m, beta / m]);
    (own, other)
}

/// `A(θ)` (4m × 4m) from per-target `(α_i, β_i, γ_i)`.
pub fn swarm_generator(theta: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let m = theta.len();
    if m < 2 {
        return Err(Error::config("group dynamics need at least two targets"));
    }
    if let Some(t) = theta.iter().find(|t| t.len() != 3) {
        return Err(Error::dim(format!("each target needs (α, β, γ), got {} values", t.len())));
    }
    let mut a = DMatrix::zeros(4 * m, 4 * m);
    for (i, t) in theta.iter().enumerate() {
        let (own, other) = axis_blocks(t[0], t[1], t[2], m as f64);
        for k in 0..m {
            let block = if k == i { &own } else { &other };
            for axis in 0..2 {
                a.view_mut((4 * i + 2 * axis, 4 * k + 2 * axis), (2, 2)).copy_from(block);
            }
        }
    }
    Ok(a)
}

/// `(𝟙𝟙ᵀ) ⊗ Σ + blockdiag(Q − Σ)`, checked for positive semidefiniteness.
pub fn swarm_noise(m: usize, q: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = q.nrows();
    if q.shape() != sigma.shape() || !q.is_square() {
        return Err(Error::dim("Q and Σ must be square matrices of the same size"));
    }
    let diff = q - sigma;
    let tol = 1e-12 * q.amax().max(1.0);
    if !linalg::is_psd(&diff, tol) || !linalg::is_psd(&(q + sigma * (m as f64 - 1.0)), tol) {
        return Err(Error::NotPositiveDefinite(
            "state disturbance covariance (Q − Σ must be PSD)".into(),
        ));
    }
    let mut out = DMatrix::zeros(m * p, m * p);
    for i in 0..m {
        for k in 0..m {
            let block = if i == k { q } else { sigma };
            out.view_mut((i * p, k * p), (p, p)).copy_from(block);
        }
    }
    Ok(out)
}

/// `T(θ) = exp(A(θ) τ)` together with the stacked disturbance covariance.
pub fn build_swarm_transition(
    theta: &[DVector<f64>],
    tau: f64,
    q: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<SwarmSystem> {
    if !(tau > 0.0) {
        return Err(Error::config("sampling interval τ must be positive"));
    }
    if q.shape() != (4, 4) {
        return Err(Error::dim("group dynamics use a 4-dimensional state per target"));
    }
    let generator = swarm_generator(theta)?;
    let transition = linalg::expm(&(&generator * tau));
    let state_cov = swarm_noise(theta.len(), q, sigma)?;
    Ok(SwarmSystem {
        generator,
        transition,
        state_cov,
    })
}
