use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{
    AffineMatrix, CovStructure, CovTerm, EffectsDesign, EffectsKind, InitialState, ModelKind, ModelSpec, Transition,
};

fn delta_names(n: usize) -> Vec<String> {
    (1..=n).map(|j| format!("d{j}")).collect()
}

/// AR(1) state observed with noise: `T = θ_i`, `Z = 1`, `R = δ₁`, `Q = δ₂`,
/// `D = δ₃`, `Ψ_i = 1`.
///
/// The first state follows the stationary law `N(0, δ₂/(1 − θ²))` when
/// `|θ| < 1` and `N(0, 3.2)` otherwise.
pub fn build_ar_noise(m: usize) -> (ModelSpec, EffectsDesign) {
    let model = ModelSpec {
        kind: ModelKind::ArNoise,
        state_dim: 1,
        obs_dim: 1,
        theta_dim: 1,
        n_delta: 3,
        delta_names: delta_names(3),
        delta_lower: vec![0.0; 3],
        transition: Transition::Affine(AffineMatrix {
            constant: DMatrix::zeros(1, 1),
            coefficients: vec![DMatrix::identity(1, 1)],
        }),
        observation: AffineMatrix::constant(DMatrix::identity(1, 1)),
        state_noise: CovStructure::scaled_identity(1, 1),
        cross_state_noise: None,
        obs_noise: CovStructure::scaled_identity(1, 0),
        effects_noise: vec![CovStructure::scaled_identity(1, 2)],
        initial: InitialState::Stationary {
            mean: DVector::zeros(1),
            fallback_cov: DMatrix::from_element(1, 1, 3.2),
        },
    };
    (model, EffectsDesign::intercept(m, 1, None))
}

/// Damped local linear trend: state `(z, u)`, transition `[[1, 1], [0, θ_i]]`,
/// observation `(1, 0)`, `R = δ₁`, `Q = diag(δ₂, δ₃)`, `D = δ₄`.
///
/// The trend is non-stationary, so the first state is `N(0, 10⁷ I)`.
pub fn build_damped_local_linear(m: usize) -> (ModelSpec, EffectsDesign) {
    let mut slope = DMatrix::zeros(2, 2);
    slope[(1, 1)] = 1.0;
    let model = ModelSpec {
        kind: ModelKind::DampedLocalLinear,
        state_dim: 2,
        obs_dim: 1,
        theta_dim: 1,
        n_delta: 4,
        delta_names: delta_names(4),
        delta_lower: vec![0.0; 4],
        transition: Transition::Affine(AffineMatrix {
            constant: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]),
            coefficients: vec![slope],
        }),
        observation: AffineMatrix::constant(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
        state_noise: CovStructure::diagonal(&[1, 2]),
        cross_state_noise: None,
        obs_noise: CovStructure::scaled_identity(1, 0),
        effects_noise: vec![CovStructure::scaled_identity(1, 3)],
        initial: InitialState::Fixed {
            mean: DVector::zeros(2),
            cov: DMatrix::identity(2, 2) * 1e7,
        },
    };
    (model, EffectsDesign::intercept(m, 1, None))
}

/// Splits `θ_i` into a regime before and after `t_prime`, each with its own
/// fixed effects and random-effect covariance.
///
/// `D₂` copies the structure of `D₁` on fresh variance parameters appended
/// after the base model's, so the AR model becomes
/// `(δ₁, δ₂, δ₃ = D₁, δ₄ = D₂)`.
pub fn build_two_regime(
    mut model: ModelSpec,
    effects: EffectsDesign,
    t_prime: usize,
) -> Result<(ModelSpec, EffectsDesign)> {
    if t_prime < 2 {
        return Err(Error::config(format!("regime boundary T′={t_prime} must exceed 1")));
    }
    if effects.boundary.is_some() || model.effects_noise.len() != 1 {
        return Err(Error::config("two-regime construction needs a single-regime base model"));
    }
    let designs = match effects.kind {
        EffectsKind::Mixed { designs } => designs,
        EffectsKind::Known { .. } => {
            return Err(Error::config("two-regime construction needs random effects"));
        }
    };

    let base_d = model.effects_noise[0].clone();
    let sequential = model.delta_names.iter().enumerate().all(|(j, n)| *n == format!("d{}", j + 1));
    let mut remap = Vec::new();
    let mut terms = Vec::new();
    for term in &base_d.terms {
        let new = match remap.iter().find(|(old, _)| *old == term.delta) {
            Some(&(_, new)) => new,
            None => {
                let new = model.n_delta;
                model.n_delta += 1;
                let name = if sequential {
                    format!("d{}", new + 1)
                } else {
                    format!("{}_2", model.delta_names[term.delta])
                };
                model.delta_names.push(name);
                model.delta_lower.push(model.delta_lower[term.delta]);
                remap.push((term.delta, new));
                new
            }
        };
        terms.push(CovTerm {
            delta: new,
            basis: term.basis.clone(),
        });
    }
    model.effects_noise.push(CovStructure { dim: base_d.dim, terms });

    let per_regime = designs.into_iter().next().unwrap_or_default();
    let mut fixed_names = Vec::new();
    for g in 1..=2 {
        for name in &effects.fixed_names {
            fixed_names.push(format!("{name}_{g}"));
        }
    }
    let effects = EffectsDesign {
        m: effects.m,
        theta_dim: effects.theta_dim,
        boundary: Some(t_prime),
        kind: EffectsKind::Mixed {
            designs: vec![per_regime.clone(), per_regime],
        },
        fixed_names,
    };
    Ok((model, effects))
}

impl ModelSpec {
    /// Same system with `θ` treated as known: the random-effect covariance
    /// is dropped and its variance parameters no longer enter the likelihood.
    pub fn without_random_effects(mut self) -> Self {
        self.effects_noise.clear();
        self
    }
}
