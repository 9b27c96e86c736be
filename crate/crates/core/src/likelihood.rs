//! Conditional likelihood `f(y_u | θ_u, δ)` and smoother statistics for one
//! filtering unit, shared by the sampler, the estimators and the oracles.

use nalgebra::{DMatrix, DVector};

use crate::data::PanelData;
use crate::error::{Error, Result};
use crate::kalman::{self, scalar, Observations, UnitStats};
use crate::linalg;
use crate::model::{
    self, unit_system, CovStructure, EffectsDesign, InitialState, ModelSpec, StateSpace, Transition, Unit,
};

/// Observations of one unit, prepared once and reused for every `θ`.
#[derive(Debug, Clone)]
pub struct UnitData {
    pub members: Vec<usize>,
    pub obs: Observations,
    flat: Option<(Vec<f64>, Vec<bool>)>,
}

impl UnitData {
    pub fn new(data: &PanelData, unit: &Unit) -> Self {
        let obs = data.unit_observations(&unit.members);
        let flat = (obs.y.first().is_none_or(|v| v.len() == 1)).then(|| scalar::flatten(&obs));
        UnitData {
            members: unit.members.clone(),
            obs,
            flat,
        }
    }
}

pub fn panel_units(data: &PanelData, model: &ModelSpec) -> Vec<UnitData> {
    model::units(model, data.m).iter().map(|u| UnitData::new(data, u)).collect()
}

/// Checks that the model, design and panel fit together.
pub fn check_compatible(data: &PanelData, model: &ModelSpec, effects: &EffectsDesign) -> Result<()> {
    if data.m != effects.m {
        return Err(Error::dim(format!("panel has {} individuals, effects design has {}", data.m, effects.m)));
    }
    if data.obs_dim != model.obs_dim {
        return Err(Error::dim(format!("panel has q={}, model has q={}", data.obs_dim, model.obs_dim)));
    }
    effects.check_horizon(data.n_time)
}

/// Scalar system for a single individual with `p = q = 1`, built without
/// matrices; `None` when the model does not have that shape.
pub fn scalar_system(
    model: &ModelSpec,
    effects: &EffectsDesign,
    theta: &[f64],
    delta: &[f64],
) -> Option<scalar::ScalarSystem> {
    let Transition::Affine(tr) = &model.transition else {
        return None;
    };
    if model.state_dim != 1 || model.obs_dim != 1 || model.cross_state_noise.is_some() {
        return None;
    }
    let r = model.theta_dim;
    let eval = |m: &model::AffineMatrix, th: &[f64]| {
        let mut v = m.constant[(0, 0)];
        for (c, &x) in m.coefficients.iter().zip(th) {
            if x != 0.0 {
                v += c[(0, 0)] * x;
            }
        }
        v
    };
    let regimes = effects.n_regimes();
    let th = |g: usize| &theta[g.min(regimes - 1) * r..(g.min(regimes - 1) + 1) * r];
    let t = [eval(tr, th(0)), eval(tr, th(1))];
    let z = [eval(&model.observation, th(0)), eval(&model.observation, th(1))];
    let q = cov1(&model.state_noise, delta);
    let h = cov1(&model.obs_noise, delta);
    let (a1, p1) = match &model.initial {
        InitialState::Fixed { mean, cov } => (mean[0], cov[(0, 0)]),
        InitialState::Stationary { mean, fallback_cov } => match stationary_variance(t[0], q) {
            Some(p) if p > 0.0 => (mean[0], p),
            _ => (mean[0], fallback_cov[(0, 0)]),
        },
    };
    Some(scalar::ScalarSystem {
        t,
        z,
        q,
        h,
        a1,
        p1,
        boundary: effects.boundary,
    })
}

fn cov1(s: &model::CovStructure, delta: &[f64]) -> f64 {
    // same accumulation order as CovStructure::eval
    let mut out = 0.0;
    for term in &s.terms {
        out += term.basis[(0, 0)] * delta[term.delta];
    }
    out
}

/// Scalar version of [`linalg::stationary_covariance`] with identical
/// arithmetic.
fn stationary_variance(t: f64, q: f64) -> Option<f64> {
    let (mut a, mut p) = (t, q);
    for _ in 0..64 {
        let inc = a * p * a;
        p += inc;
        a *= a;
        if !a.is_finite() || !p.is_finite() {
            return None;
        }
        if a.abs() < 1e-13 && inc.abs() <= 1e-15 * p.abs().max(f64::MIN_POSITIVE) {
            return Some(p);
        }
    }
    None
}

/// Stacked `θ` of each member of the unit, taken from a full per-individual list.
pub fn member_thetas(unit: &UnitData, theta: &[DVector<f64>]) -> Vec<DVector<f64>> {
    unit.members.iter().map(|&i| theta[i].clone()).collect()
}

/// `log f(y_u | θ_u, δ)`; `thetas[k]` belongs to `unit.members[k]`.
pub fn unit_loglik(
    model: &ModelSpec,
    effects: &EffectsDesign,
    unit: &UnitData,
    thetas: &[DVector<f64>],
    delta: &[f64],
) -> Result<f64> {
    if thetas.len() == 1 {
        if let (Some((y, mask)), Some(s)) =
            (&unit.flat, scalar_system(model, effects, thetas[0].as_slice(), delta))
        {
            return scalar::loglik(&s, y, mask);
        }
    }
    let sys = unit_system(model, effects, thetas, delta)?;
    Ok(kalman::kalman_filter(&sys, &unit.obs)?.loglik)
}

/// Quantities needed to differentiate the stationary first-state law of one
/// draw with respect to `δ`.
#[derive(Debug, Clone)]
pub struct InitDraw {
    /// `r₀ r₀ᵀ − N₀`
    pub g0: DMatrix<f64>,
    /// `P₁`
    pub p1: DMatrix<f64>,
    /// `∂P₁/∂δ_j` for every `j`
    pub dp1: Vec<DMatrix<f64>>,
}

/// Smoother statistics of one unit at fixed `θ_u`, plus the first-state
/// derivatives when `P₁` is the stationary covariance. `state_noise` is
/// [`unit_state_noise`] for the unit.
pub fn unit_draw_stats(
    model: &ModelSpec,
    effects: &EffectsDesign,
    unit: &UnitData,
    thetas: &[DVector<f64>],
    delta: &[f64],
    state_noise: &CovStructure,
) -> Result<(UnitStats, Option<InitDraw>)> {
    if thetas.len() == 1 {
        if let (Some((y, mask)), Some(s)) =
            (&unit.flat, scalar_system(model, effects, thetas[0].as_slice(), delta))
        {
            let stats = scalar::stats(&s, y, mask)?;
            let stationary = matches!(model.initial, InitialState::Stationary { .. })
                && stationary_variance(s.t[0], s.q).is_some_and(|p| p > 0.0);
            let init = stationary.then(|| InitDraw {
                g0: stats.init_term.clone(),
                p1: DMatrix::from_element(1, 1, s.p1),
                dp1: (0..model.n_delta)
                    .map(|j| {
                        let dq = cov1_derivative(state_noise, j);
                        let v = if dq == 0.0 { 0.0 } else { stationary_variance(s.t[0], dq).unwrap_or(0.0) };
                        DMatrix::from_element(1, 1, v)
                    })
                    .collect(),
            });
            return Ok((stats, init));
        }
    }
    let sys = unit_system(model, effects, thetas, delta)?;
    let stats = kalman::unit_stats(&sys, &unit.obs, model.obs_dim)?;
    let init = init_cov_derivatives(state_noise, &sys, model.n_delta).map(|dp1| InitDraw {
        g0: stats.init_term.clone(),
        p1: sys.init_cov.clone(),
        dp1,
    });
    Ok((stats, init))
}

fn cov1_derivative(s: &CovStructure, j: usize) -> f64 {
    s.terms.iter().filter(|t| t.delta == j).map(|t| t.basis[(0, 0)]).sum()
}

/// `Q̃(δ)` of a unit with `n_members` individuals as a covariance structure.
pub fn unit_state_noise(model: &ModelSpec, n_members: usize) -> CovStructure {
    if n_members == 1 {
        model.state_noise.clone()
    } else {
        model.state_noise.lift(n_members, model.cross_state_noise.as_ref())
    }
}

/// `∂P₁/∂δ_j` for every `j` when the first state follows the stationary law
/// of the regime-1 dynamics; `None` when `P₁` does not depend on `δ`.
///
/// `P₁` solves `P = T P Tᵀ + Q̃(δ)`, which is linear in `δ`, so each
/// derivative is the stationary covariance driven by `∂Q̃/∂δ_j`.
pub fn init_cov_derivatives(state_noise: &CovStructure, sys: &StateSpace, n_delta: usize) -> Option<Vec<DMatrix<f64>>> {
    if !sys.stationary_init {
        return None;
    }
    let dim = sys.state_dim();
    Some(
        (0..n_delta)
            .map(|j| {
                if state_noise.uses(j) {
                    linalg::stationary_covariance(&sys.transition[0], &state_noise.derivative(j))
                        .unwrap_or_else(|| DMatrix::zeros(dim, dim))
                } else {
                    DMatrix::zeros(dim, dim)
                }
            })
            .collect(),
    )
}

/// `Σ_u log f(y_u | θ_u, δ)` over the whole panel.
pub fn conditional_loglik(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    theta: &[DVector<f64>],
    delta: &[f64],
) -> Result<f64> {
    check_compatible(data, model, effects)?;
    let mut total = 0.0;
    for unit in panel_units(data, model) {
        total += unit_loglik(model, effects, &unit, &member_thetas(&unit, theta), delta)?;
    }
    Ok(total)
}

/// Exact observed-data log-likelihood when `θ` is known.
pub fn known_theta_loglik(data: &PanelData, model: &ModelSpec, effects: &EffectsDesign, delta: &[f64]) -> Result<f64> {
    let model::EffectsKind::Known { theta } = &effects.kind else {
        return Err(Error::Unsupported(
            "the exact likelihood is only available when θ is known".into(),
        ));
    };
    conditional_loglik(data, model, effects, theta, delta)
}
