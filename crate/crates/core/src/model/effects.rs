use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ModelSpec;

/// How the individual parameters `θ_i` are generated.
#[derive(Debug, Clone, PartialEq)]
pub enum EffectsKind {
    /// `θ_i = Ψ_i a + b_i` with `b_i ~ N(0, D)`; `designs[regime][individual]`
    /// holds `Ψ_i` (r × dim(a_regime)).
    Mixed { designs: Vec<Vec<DMatrix<f64>>> },
    /// `θ_i` is known (no random effects); one stacked vector per individual.
    Known { theta: Vec<DVector<f64>> },
}

/// Fixed/random effects design for a panel of `m` individuals.
///
/// In two-regime mode (`boundary = Some(T′)`), each individual's `θ` is stored
/// as the stacked vector `(θ⁽¹⁾, θ⁽²⁾)`; regime 1 applies for `t ≤ T′`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectsDesign {
    pub m: usize,
    pub theta_dim: usize,
    pub boundary: Option<usize>,
    pub kind: EffectsKind,
    pub fixed_names: Vec<String>,
}

impl EffectsDesign {
    /// `Ψ_i = I_r` for every individual (population mean per θ component).
    pub fn intercept(m: usize, theta_dim: usize, boundary: Option<usize>) -> Self {
        let regimes = if boundary.is_some() { 2 } else { 1 };
        let designs = vec![vec![DMatrix::identity(theta_dim, theta_dim); m]; regimes];
        let mut fixed_names = Vec::new();
        for g in 0..regimes {
            for k in 0..theta_dim {
                let mut name = if theta_dim == 1 { "mu".to_string() } else { format!("mu{}", k + 1) };
                if regimes == 2 {
                    name = format!("{name}_{}", g + 1);
                }
                fixed_names.push(name);
            }
        }
        EffectsDesign {
            m,
            theta_dim,
            boundary,
            kind: EffectsKind::Mixed { designs },
            fixed_names,
        }
    }

    pub fn known(theta: Vec<DVector<f64>>, theta_dim: usize, boundary: Option<usize>) -> Self {
        EffectsDesign {
            m: theta.len(),
            theta_dim,
            boundary,
            kind: EffectsKind::Known { theta },
            fixed_names: Vec::new(),
        }
    }

    pub fn n_regimes(&self) -> usize {
        if self.boundary.is_some() {
            2
        } else {
            1
        }
    }

    /// Length of one individual's stacked `θ`.
    pub fn stacked_dim(&self) -> usize {
        self.n_regimes() * self.theta_dim
    }

    pub fn is_known(&self) -> bool {
        matches!(self.kind, EffectsKind::Known { .. })
    }

    /// `dim(a_g)` per regime.
    pub fn fixed_dims(&self) -> Vec<usize> {
        match &self.kind {
            EffectsKind::Mixed { designs } => designs.iter().map(|d| d.first().map_or(0, |x| x.ncols())).collect(),
            EffectsKind::Known { .. } => vec![0; self.n_regimes()],
        }
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed_dims().iter().sum()
    }

    /// Offset of `a_g` inside the concatenated fixed-effect vector.
    pub fn fixed_offset(&self, regime: usize) -> usize {
        self.fixed_dims()[..regime].iter().sum()
    }

    pub fn design(&self, regime: usize, i: usize) -> Option<&DMatrix<f64>> {
        match &self.kind {
            EffectsKind::Mixed { designs } => Some(&designs[regime][i]),
            EffectsKind::Known { .. } => None,
        }
    }

    /// Regime index (0-based) in force at 1-based time `t`.
    pub fn regime_at(&self, t: usize) -> usize {
        match self.boundary {
            Some(tp) if t > tp => 1,
            _ => 0,
        }
    }

    /// Stacked `Ψ_i a` (the prior mean of `θ_i`), or the known `θ_i`.
    pub fn prior_mean(&self, i: usize, fixed: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            EffectsKind::Known { theta } => theta[i].clone(),
            EffectsKind::Mixed { designs } => {
                let r = self.theta_dim;
                let mut out = DVector::zeros(self.stacked_dim());
                let mut off = 0;
                for (g, per_ind) in designs.iter().enumerate() {
                    let psi = &per_ind[i];
                    let a = fixed.rows(off, psi.ncols());
                    out.rows_mut(g * r, r).copy_from(&(psi * a));
                    off += psi.ncols();
                }
                out
            }
        }
    }

    /// `blockdiag(D_1, D_2, …)` over regimes; zero for known θ.
    pub fn prior_cov(&self, model: &ModelSpec, delta: &[f64]) -> DMatrix<f64> {
        if self.is_known() {
            return DMatrix::zeros(self.stacked_dim(), self.stacked_dim());
        }
        let blocks: Vec<_> = (0..self.n_regimes()).map(|g| model.effects_cov(g, delta)).collect();
        linalg::block_diag(&blocks)
    }

    pub fn theta_from_effects(&self, i: usize, fixed: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        self.prior_mean(i, fixed) + b
    }

    pub fn effects_from_theta(&self, i: usize, fixed: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        theta - self.prior_mean(i, fixed)
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("the panel needs at least one individual"));
        }
        if self.theta_dim != model.theta_dim {
            return Err(Error::dim(format!(
                "effects design has r={} but the model has r={}",
                self.theta_dim, model.theta_dim
            )));
        }
        if let Some(tp) = self.boundary {
            if tp < 2 {
                return Err(Error::config(format!("regime boundary T′={tp} must exceed 1")));
            }
        }
        match &self.kind {
            EffectsKind::Mixed { designs } => {
                if designs.len() != self.n_regimes() {
                    return Err(Error::dim("one design set per regime is required"));
                }
                if model.effects_noise.len() != self.n_regimes() {
                    return Err(Error::config(format!(
                        "random effects need {} covariance block(s), model has {}",
                        self.n_regimes(),
                        model.effects_noise.len()
                    )));
                }
                for per_ind in designs {
                    if per_ind.len() != self.m {
                        return Err(Error::dim("one design matrix per individual is required"));
                    }
                    let k = per_ind[0].ncols();
                    if per_ind.iter().any(|d| d.nrows() != self.theta_dim || d.ncols() != k) {
                        return Err(Error::dim(format!("design matrices must all be {}×{k}", self.theta_dim)));
                    }
                }
                if self.fixed_names.len() != self.n_fixed() {
                    return Err(Error::config("one name per fixed effect is required"));
                }
            }
            EffectsKind::Known { theta } => {
                if theta.len() != self.m || theta.iter().any(|t| t.len() != self.stacked_dim()) {
                    return Err(Error::dim(format!(
                        "known θ must hold {} vectors of length {}",
                        self.m,
                        self.stacked_dim()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks the regime boundary against the panel length: `1 < T′ < T`.
    pub fn check_horizon(&self, n_time: usize) -> Result<()> {
        match self.boundary {
            Some(tp) if !(tp > 1 && tp < n_time) => Err(Error::config(format!(
                "regime boundary T′={tp} must satisfy 1 < T′ < T={n_time}"
            ))),
            _ => Ok(()),
        }
    }
}

/// `Δ = (a, δ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub fixed: DVector<f64>,
    pub delta: DVector<f64>,
}

impl Params {
    pub fn new(fixed: Vec<f64>, delta: Vec<f64>) -> Self {
        Params {
            fixed: DVector::from_vec(fixed),
            delta: DVector::from_vec(delta),
        }
    }

    pub fn len(&self) -> usize {
        self.fixed.len() + self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.fixed.iter().chain(self.delta.iter()).copied().collect()
    }

    pub fn from_slice(values: &[f64], n_fixed: usize) -> Self {
        Params {
            fixed: DVector::from_column_slice(&values[..n_fixed]),
            delta: DVector::from_column_slice(&values[n_fixed..]),
        }
    }

    /// Largest relative change between two parameter vectors.
    pub fn max_rel_change(&self, other: &Params) -> f64 {
        self.to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-8))
            .fold(0.0, f64::max)
    }

    pub fn names(model: &ModelSpec, effects: &EffectsDesign) -> Vec<String> {
        effects.fixed_names.iter().chain(&model.delta_names).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_round_trip() {
        let mut eff = EffectsDesign::intercept(2, 2, None);
        if let EffectsKind::Mixed { designs } = &mut eff.kind {
            designs[0][1] = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, 2.0, -1.0]);
            designs[0][0] = DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        }
        let a = DVector::from_vec(vec![0.3, -1.7, 2.2]);
        let b = DVector::from_vec(vec![0.123456789, -9.87654321]);
        for i in 0..2 {
            let theta = eff.theta_from_effects(i, &a, &b);
            // exact up to the rounding of one addition and one subtraction
            let back = eff.effects_from_theta(i, &a, &theta);
            assert!((&back - &b).amax() <= 4.0 * f64::EPSILON * theta.amax());
            assert!((eff.theta_from_effects(i, &a, &back) - &theta).amax() <= 4.0 * f64::EPSILON * theta.amax());
        }
    }

    #[test]
    fn two_regime_prior_mean_stacks() {
        let eff = EffectsDesign::intercept(1, 1, Some(5));
        let a = DVector::from_vec(vec![0.85, 0.86]);
        assert_eq!(eff.prior_mean(0, &a).as_slice(), &[0.85, 0.86]);
        assert_eq!(eff.regime_at(5), 0);
        assert_eq!(eff.regime_at(6), 1);
        assert!(eff.check_horizon(10).is_ok());
        assert!(eff.check_horizon(5).is_err());
        assert_eq!(eff.fixed_names, vec!["mu_1", "mu_2"]);
    }
}
