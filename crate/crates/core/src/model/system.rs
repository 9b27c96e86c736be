use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{swarm, EffectsDesign, InitialState, ModelSpec, Transition};

/// A linear-Gaussian state space system for one filtering unit, with
/// regime-dependent transition and observation matrices.
#[derive(Debug, Clone)]
pub struct StateSpace {
    /// `T̃` per regime.
    pub transition: Vec<DMatrix<f64>>,
    /// `Z̃` per regime.
    pub observation: Vec<DMatrix<f64>>,
    /// `Q̃`
    pub state_cov: DMatrix<f64>,
    /// `R̃`
    pub obs_cov: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    /// True when `init_cov` is the stationary covariance of the regime-1
    /// dynamics, so that it moves with `δ`.
    pub stationary_init: bool,
    /// Last time point (1-based) of regime 1.
    pub boundary: Option<usize>,
}

impl StateSpace {
    pub fn state_dim(&self) -> usize {
        self.state_cov.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_cov.nrows()
    }

    fn regime(&self, t: usize) -> usize {
        match self.boundary {
            Some(tp) if t > tp && self.transition.len() > 1 => 1,
            _ => 0,
        }
    }

    /// Transition applied between `t` and `t+1` (1-based `t`).
    pub fn transition_at(&self, t: usize) -> &DMatrix<f64> {
        &self.transition[self.regime(t + 1)]
    }

    pub fn observation_at(&self, t: usize) -> &DMatrix<f64> {
        &self.observation[self.regime(t)]
    }

    /// Time-invariant single-regime system.
    pub fn simple(
        t: DMatrix<f64>,
        z: DMatrix<f64>,
        q: DMatrix<f64>,
        h: DMatrix<f64>,
        a1: DVector<f64>,
        p1: DMatrix<f64>,
    ) -> Self {
        StateSpace {
            transition: vec![t],
            observation: vec![z],
            state_cov: q,
            obs_cov: h,
            init_mean: a1,
            init_cov: p1,
            stationary_init: false,
            boundary: None,
        }
    }
}

/// Individuals that must be filtered jointly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub members: Vec<usize>,
}

/// One unit per individual when the likelihood factorizes, else a single
/// unit holding the whole panel.
pub fn units(model: &ModelSpec, m: usize) -> Vec<Unit> {
    if model.independent_individuals() {
        (0..m).map(|i| Unit { members: vec![i] }).collect()
    } else {
        vec![Unit {
            members: (0..m).collect(),
        }]
    }
}

/// Builds the stacked system for the individuals in `members`, each with its
/// stacked `θ` (`thetas[k]` belongs to `members[k]`).
pub fn unit_system(
    model: &ModelSpec,
    effects: &EffectsDesign,
    thetas: &[DVector<f64>],
    delta: &[f64],
) -> Result<StateSpace> {
    let n = thetas.len();
    let r = model.theta_dim;
    let regimes = effects.n_regimes();
    if let Some(t) = thetas.iter().find(|t| t.len() != regimes * r) {
        return Err(Error::dim(format!(
            "θ has length {}, expected {}",
            t.len(),
            regimes * r
        )));
    }
    let regime_theta = |k: usize, g: usize| &thetas[k].as_slice()[g * r..(g + 1) * r];

    let mut transition = Vec::with_capacity(regimes);
    let mut observation = Vec::with_capacity(regimes);
    for g in 0..regimes {
        let t = match &model.transition {
            Transition::Affine(a) => {
                let blocks: Vec<_> = (0..n).map(|k| a.eval(regime_theta(k, g))).collect();
                block_or_single(blocks)
            }
            Transition::Swarm { tau } => {
                let per: Vec<_> = (0..n).map(|k| DVector::from_column_slice(regime_theta(k, g))).collect();
                linalg::expm(&(swarm::swarm_generator(&per)? * *tau))
            }
        };
        transition.push(t);
        let z: Vec<_> = (0..n).map(|k| model.observation.eval(regime_theta(k, g))).collect();
        observation.push(block_or_single(z));
    }

    let q = model.state_cov(delta);
    let state_cov = match &model.cross_state_noise {
        None => block_or_single(vec![q; n]),
        Some(cross) => swarm::swarm_noise(n, &q, &cross.eval(delta))?,
    };
    let obs_cov = block_or_single(vec![model.obs_cov(delta); n]);

    let (mean, stationary_init, init_cov) = match &model.initial {
        InitialState::Fixed { mean, cov } => (mean, false, block_or_single(vec![cov.clone(); n])),
        InitialState::Stationary { mean, fallback_cov } => {
            match linalg::stationary_covariance(&transition[0], &state_cov) {
                Some(p) if linalg::SpdFactor::new(&p).is_some() => (mean, true, p),
                _ => (mean, false, block_or_single(vec![fallback_cov.clone(); n])),
            }
        }
    };
    let init_mean = DVector::from_iterator(n * mean.len(), (0..n).flat_map(|_| mean.iter().copied()));

    Ok(StateSpace {
        transition,
        observation,
        state_cov,
        obs_cov,
        init_mean,
        init_cov,
        stationary_init,
        boundary: effects.boundary,
    })
}

fn block_or_single(mut blocks: Vec<DMatrix<f64>>) -> DMatrix<f64> {
    if blocks.len() == 1 {
        blocks.pop().unwrap()
    } else {
        linalg::block_diag(&blocks)
    }
}

/// The stacked system over the whole panel; `theta` concatenates every
/// individual's stacked parameter vector.
pub fn assemble_block_system(
    model: &ModelSpec,
    effects: &EffectsDesign,
    theta: &[f64],
    delta: &[f64],
) -> Result<StateSpace> {
    let d = effects.stacked_dim();
    if theta.len() != effects.m * d {
        return Err(Error::dim(format!(
            "stacked θ has length {}, expected m·{d} = {}",
            theta.len(),
            effects.m * d
        )));
    }
    let thetas: Vec<_> = theta.chunks(d).map(DVector::from_column_slice).collect();
    unit_system(model, effects, &thetas, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ar_noise, CovStructure};

    #[test]
    fn ar_block_system_is_diagonal() {
        let (model, eff) = build_ar_noise(2);
        let sys = assemble_block_system(&model, &eff, &[0.3, 0.5], &[0.3, 3.0, 0.1]).unwrap();
        assert_eq!(sys.transition[0], DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.5])));
        assert_eq!(sys.observation[0], DMatrix::identity(2, 2));
        assert_eq!(sys.state_cov, DMatrix::identity(2, 2) * 3.0);
    }

    #[test]
    fn ar_three_individuals_independent_noise() {
        let (model, eff) = build_ar_noise(3);
        let sys = assemble_block_system(&model, &eff, &[0.1, 0.2, 0.3], &[0.3, 3.0, 0.1]).unwrap();
        assert_eq!(sys.state_cov, DMatrix::identity(3, 3) * 3.0);
        assert_eq!(sys.obs_cov, DMatrix::identity(3, 3) * 0.3);
        assert!(sys.stationary_init);
    }

    #[test]
    fn cross_covariance_fills_off_diagonal_blocks() {
        let (mut model, eff) = build_ar_noise(2);
        model.n_delta = 4;
        model.delta_names.push("sigma".into());
        model.delta_lower.push(0.0);
        model.cross_state_noise = Some(CovStructure::scaled_identity(1, 3));
        let sys = assemble_block_system(&model, &eff, &[0.3, 0.5], &[0.3, 3.0, 0.1, 0.7]).unwrap();
        assert_eq!(sys.state_cov[(0, 1)], 0.7);
        assert_eq!(sys.state_cov[(1, 0)], 0.7);
        assert_eq!(sys.state_cov[(1, 1)], 3.0);
        assert_eq!(units(&model, 2).len(), 1);
    }

    #[test]
    fn wrong_theta_length_is_rejected() {
        let (model, eff) = build_ar_noise(2);
        assert!(matches!(
            assemble_block_system(&model, &eff, &[0.3], &[0.3, 3.0, 0.1]),
            Err(Error::Dimension(_))
        ));
    }
}
