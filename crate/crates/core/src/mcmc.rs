//! Random-walk Metropolis sampling of `θ | y, Δ*`, with the states
//! integrated out exactly through the Kalman likelihood.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::PanelData;
use crate::error::{Error, Result};
use crate::likelihood::{check_compatible, panel_units, unit_loglik, UnitData};
use crate::linalg::SpdFactor;
use crate::model::{EffectsDesign, ModelSpec, Params};
use crate::rng::{derive_seed, stream_rng, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmcConfig {
    pub draws: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Acceptance rate the burn-in adaptation steers toward.
    pub target_acceptance: f64,
    /// Initial proposal standard deviation as a multiple of `sqrt(diag D)`.
    pub initial_scale: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            draws: 200,
            burn_in: 500,
            thin: 5,
            seed: 1,
            target_acceptance: 0.3,
            initial_scale: 0.1,
        }
    }
}

/// Posterior draws of every individual's stacked `θ`.
#[derive(Debug, Clone)]
pub struct ThetaSamples {
    /// `draws[j][i]`: draw `j` of individual `i`.
    pub draws: Vec<Vec<DVector<f64>>>,
    /// Post-burn-in acceptance rate per sampling block (individual).
    pub acceptance: Vec<f64>,
    /// Final proposal scale multiplier per block.
    pub scale: Vec<f64>,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl ThetaSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn m(&self) -> usize {
        self.draws.first().map_or(0, Vec::len)
    }

    pub fn mean_acceptance(&self) -> f64 {
        if self.acceptance.is_empty() {
            return f64::NAN;
        }
        self.acceptance.iter().sum::<f64>() / self.acceptance.len() as f64
    }

    /// Same draws repeated `m` times for known `θ`.
    pub fn point_mass(theta: &[DVector<f64>], draws: usize, seed: u64) -> Self {
        ThetaSamples {
            draws: vec![theta.to_vec(); draws.max(1)],
            acceptance: vec![1.0; theta.len()],
            scale: vec![0.0; theta.len()],
            burn_in: 0,
            thin: 1,
            seed,
        }
    }

    /// Draws as CSV rows, one column per `θ` component (`theta_i_k`, 1-based).
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        if let Some(first) = self.draws.first() {
            let header: Vec<String> = first
                .iter()
                .enumerate()
                .flat_map(|(i, th)| (0..th.len()).map(move |k| format!("theta_{}_{}", i + 1, k + 1)))
                .collect();
            wr.write_record(&header)?;
        }
        for draw in &self.draws {
            wr.write_record(draw.iter().flat_map(|th| th.iter().map(|v| format!("{v}"))))?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Summary of the posterior draws for one individual.
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub theta_mean: DVector<f64>,
    pub theta_var: DMatrix<f64>,
    /// `b_{i|T} = mean(θ_i) − Ψ_i a*`
    pub effects_mean: DVector<f64>,
    /// `Var(b_i | y)`
    pub effects_var: DMatrix<f64>,
}

/// Weighted posterior moments; `weights` (per draw, summing to one) default
/// to uniform. Variances use the `1/M` normalization, matching the
/// Monte-Carlo approximation of the conditional expectations.
pub fn posterior_moments(
    samples: &ThetaSamples,
    effects: &EffectsDesign,
    fixed: &DVector<f64>,
    weights: Option<&[f64]>,
) -> Vec<PosteriorMoments> {
    let n = samples.len();
    let uniform = vec![1.0 / n as f64; n];
    let w = weights.unwrap_or(&uniform);
    (0..samples.m())
        .map(|i| {
            let d = samples.draws[0][i].len();
            let mut mean = DVector::zeros(d);
            for (draw, &wj) in samples.draws.iter().zip(w) {
                mean.axpy(wj, &draw[i], 1.0);
            }
            let mut var = DMatrix::zeros(d, d);
            for (draw, &wj) in samples.draws.iter().zip(w) {
                let dev = &draw[i] - &mean;
                var.ger(wj, &dev, &dev, 1.0);
            }
            PosteriorMoments {
                effects_mean: effects.effects_from_theta(i, fixed, &mean),
                theta_mean: mean,
                effects_var: var.clone(),
                theta_var: var,
            }
        })
        .collect()
}

/// Upper bound on the adapted proposal scale, in prior standard deviations.
/// The posterior is never much wider than the prior, so larger steps only
/// waste proposals, and short burn-ins can otherwise overshoot.
const MAX_LOG_SCALE: f64 = 1.0986122886681098; // ln 3

struct Prior {
    mean: Vec<DVector<f64>>,
    precision: DMatrix<f64>,
    scale: DVector<f64>,
}

impl Prior {
    fn log_density(&self, k: usize, theta: &DVector<f64>) -> f64 {
        let dev = theta - &self.mean[k];
        -0.5 * dev.dot(&(&self.precision * &dev))
    }
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::SingularInnovation { .. } | Error::NotPositiveDefinite(_))
}

struct Chain<'a> {
    model: &'a ModelSpec,
    effects: &'a EffectsDesign,
    unit: &'a UnitData,
    delta: &'a [f64],
    prior: &'a Prior,
}

impl Chain<'_> {
    fn log_lik(&self, thetas: &[DVector<f64>]) -> Result<f64> {
        unit_loglik(self.model, self.effects, self.unit, thetas, self.delta)
    }

    fn run(&self, cfg: &McmcConfig, rng: &mut StreamRng) -> Result<(Vec<Vec<DVector<f64>>>, Vec<f64>, Vec<f64>)> {
        let n = self.unit.members.len();
        let mut current: Vec<DVector<f64>> = self.prior.mean.clone();
        let mut ll = self.log_lik(&current)?;
        let mut lp: Vec<f64> = (0..n).map(|k| self.prior.log_density(k, &current[k])).collect();
        let mut log_scale = vec![cfg.initial_scale.ln(); n];
        let mut accepted = vec![0usize; n];
        let mut out = Vec::with_capacity(cfg.draws);
        let total = cfg.burn_in + cfg.draws * cfg.thin;
        let d = current[0].len();
        for it in 0..total {
            let adapting = it < cfg.burn_in;
            for k in 0..n {
                let step = log_scale[k].exp();
                let mut prop = current[k].clone();
                for c in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    prop[c] += step * self.prior.scale[c] * z;
                }
                let prop_lp = self.prior.log_density(k, &prop);
                let old = std::mem::replace(&mut current[k], prop);
                let prop_ll = match self.log_lik(&current) {
                    Ok(v) => v,
                    Err(e) if recoverable(&e) => f64::NEG_INFINITY,
                    Err(e) => return Err(e),
                };
                let log_ratio = prop_ll + prop_lp - ll - lp[k];
                let u: f64 = rng.random();
                let accept = log_ratio.is_finite() && u.ln() < log_ratio || log_ratio == f64::INFINITY;
                if accept {
                    ll = prop_ll;
                    lp[k] = prop_lp;
                    if !adapting {
                        accepted[k] += 1;
                    }
                } else {
                    current[k] = old;
                }
                if adapting {
                    let gamma = 2.0 / ((it + 1) as f64).powf(0.6);
                    let a = if accept { 1.0 } else { 0.0 };
                    log_scale[k] = (log_scale[k] + gamma * (a - cfg.target_acceptance)).min(MAX_LOG_SCALE);
                }
            }
            if !adapting && (it - cfg.burn_in + 1) % cfg.thin == 0 {
                out.push(current.clone());
            }
        }
        let sampled = (cfg.draws * cfg.thin) as f64;
        let rates: Vec<f64> = accepted.iter().map(|&a| a as f64 / sampled).collect();
        for (k, &a) in accepted.iter().enumerate() {
            if a == 0 && cfg.draws > 0 {
                return Err(Error::ZeroAcceptance {
                    block: self.unit.members[k],
                    scale: log_scale[k].exp(),
                });
            }
        }
        Ok((out, rates, log_scale.iter().map(|s| s.exp()).collect()))
    }
}

/// Draws `config.draws` samples of `θ` from `f(θ | y, Δ*)`.
///
/// Independent individuals are sampled by separate chains; coupled panels use
/// one chain that updates each individual's block in turn.
pub fn sample_posterior(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    params: &Params,
    config: &McmcConfig,
) -> Result<ThetaSamples> {
    check_compatible(data, model, effects)?;
    model.check_feasible(&params.delta)?;
    if config.draws == 0 || config.thin == 0 {
        return Err(Error::config("MCMC needs at least one draw and a positive thinning stride"));
    }
    if let crate::model::EffectsKind::Known { theta } = &effects.kind {
        return Ok(ThetaSamples::point_mass(theta, config.draws, config.seed));
    }
    let delta = params.delta.as_slice();
    let cov = effects.prior_cov(model, delta);
    let precision = SpdFactor::new(&cov)
        .ok_or_else(|| Error::NotPositiveDefinite("random-effects covariance D(δ)".into()))?
        .inverse;
    let scale = cov.diagonal().map(f64::sqrt);
    let units = panel_units(data, model);

    let results: Vec<_> = units
        .par_iter()
        .enumerate()
        .map(|(u, unit)| {
            let prior = Prior {
                mean: unit.members.iter().map(|&i| effects.prior_mean(i, &params.fixed)).collect(),
                precision: precision.clone(),
                scale: scale.clone(),
            };
            let chain = Chain {
                model,
                effects,
                unit,
                delta,
                prior: &prior,
            };
            let mut rng = stream_rng(config.seed, u as u64);
            chain.run(config, &mut rng)
        })
        .collect();

    let m = effects.m;
    let mut draws = vec![vec![DVector::zeros(0); m]; config.draws];
    let mut acceptance = vec![0.0; m];
    let mut scales = vec![0.0; m];
    for (unit, res) in units.iter().zip(results) {
        let (chain_draws, rates, sc) = res?;
        for (j, d) in chain_draws.into_iter().enumerate() {
            for (k, th) in d.into_iter().enumerate() {
                draws[j][unit.members[k]] = th;
            }
        }
        for (k, &i) in unit.members.iter().enumerate() {
            acceptance[i] = rates[k];
            scales[i] = sc[k];
        }
    }
    Ok(ThetaSamples {
        draws,
        acceptance,
        scale: scales,
        burn_in: config.burn_in,
        thin: config.thin,
        seed: config.seed,
    })
}

/// Seed for the sampler at outer iteration `iteration` of an estimator.
pub fn iteration_seed(base: u64, iteration: usize) -> u64 {
    derive_seed(base, iteration as u64 + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_ar_noise;

    #[test]
    fn moments_arithmetic() {
        let eff = EffectsDesign::intercept(1, 1, None);
        let s = ThetaSamples {
            draws: vec![vec![DVector::from_element(1, 0.2)], vec![DVector::from_element(1, 0.4)]],
            acceptance: vec![0.5],
            scale: vec![1.0],
            burn_in: 0,
            thin: 1,
            seed: 0,
        };
        let mo = posterior_moments(&s, &eff, &DVector::from_element(1, 0.25), None);
        assert!((mo[0].effects_mean[0] - 0.05).abs() < 1e-15);
        assert!((mo[0].theta_var[(0, 0)] - 0.01).abs() < 1e-15);

        let c = ThetaSamples {
            draws: vec![vec![DVector::from_element(1, 0.7)]; 5],
            ..s
        };
        assert_eq!(posterior_moments(&c, &eff, &DVector::zeros(1), None)[0].theta_var[(0, 0)], 0.0);
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let (model, eff) = build_ar_noise(2);
        let mut data = PanelData::new(2, 5, 1);
        for t in 0..5 {
            data.set(0, t, &[t as f64 * 0.3]).unwrap();
            data.set(1, t, &[-(t as f64) * 0.2]).unwrap();
        }
        let params = Params::new(vec![0.3], vec![0.3, 3.0, 0.1]);
        let cfg = McmcConfig {
            draws: 20,
            burn_in: 50,
            thin: 2,
            seed: 9,
            ..Default::default()
        };
        let a = sample_posterior(&data, &model, &eff, &params, &cfg).unwrap();
        let b = sample_posterior(&data, &model, &eff, &params, &cfg).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.len(), 20);
        assert!(a.acceptance.iter().all(|&r| r > 0.0 && r < 1.0));
    }
}
