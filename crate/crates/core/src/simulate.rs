//! Panel simulation for every model shape and the replication study driver.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::data::PanelData;
use crate::em::{fit_em, EmConfig};
use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::linalg;
use crate::model::{self, unit_system, EffectsDesign, EffectsKind, ModelSpec, Params};
use crate::rng::{derive_seed, stream_rng, StreamRng};
use crate::score::{fit_quasi_newton, QuasiNewtonConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum Missingness {
    None,
    /// Every individual is unobserved for `start ≤ t < end` (1-based).
    Interval { start: usize, end: usize },
    /// Each cell is dropped independently with probability `rate`.
    Bernoulli { rate: f64 },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub params: Params,
    pub m: usize,
    pub n_time: usize,
    pub seed: u64,
    pub missing: Missingness,
    /// Draw a pre-sample state `x₀ ~ N(mean, cov)` per individual and
    /// propagate it once, instead of drawing `x₁` from the model's initial law.
    pub pre_sample: Option<(DVector<f64>, DMatrix<f64>)>,
}

/// Latent quantities behind a simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub params: Params,
    /// Stacked `θ_i`.
    pub theta: Vec<DVector<f64>>,
    /// `b_i` (empty vectors for known `θ`).
    pub effects: Vec<DVector<f64>>,
    /// `states[i][t]`
    pub states: Vec<Vec<DVector<f64>>>,
}

impl Truth {
    pub fn to_json(&self) -> Value {
        let vecs = |v: &[DVector<f64>]| v.iter().map(|x| x.as_slice().to_vec()).collect::<Vec<_>>();
        json!({
            "schema": 1,
            "fixed": self.params.fixed.as_slice(),
            "delta": self.params.delta.as_slice(),
            "theta": vecs(&self.theta),
            "effects": vecs(&self.effects),
            "states": self.states.iter().map(|s| vecs(s)).collect::<Vec<_>>(),
        })
    }

    pub fn theta_from_json(v: &Value) -> Option<Vec<DVector<f64>>> {
        v.get("theta")?
            .as_array()?
            .iter()
            .map(|row| {
                let xs: Option<Vec<f64>> = row.as_array()?.iter().map(Value::as_f64).collect();
                xs.map(DVector::from_vec)
            })
            .collect()
    }
}

fn gaussian(rng: &mut StreamRng, mean: &DVector<f64>, factor: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_iterator(factor.ncols(), (0..factor.ncols()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    mean + factor * z
}

fn check_config(model: &ModelSpec, effects: &EffectsDesign, cfg: &SimConfig) -> Result<()> {
    model.validate()?;
    effects.validate(model)?;
    if cfg.m != effects.m {
        return Err(Error::config(format!("m={} but the effects design has {}", cfg.m, effects.m)));
    }
    if cfg.n_time == 0 {
        return Err(Error::config("T must be positive"));
    }
    effects.check_horizon(cfg.n_time)?;
    if cfg.params.delta.len() != model.n_delta || cfg.params.fixed.len() != effects.n_fixed() {
        return Err(Error::dim("parameter vector does not match the model"));
    }
    for (j, (&d, &lo)) in cfg.params.delta.iter().zip(&model.delta_lower).enumerate() {
        if !d.is_finite() || d < lo {
            return Err(Error::Parameter(format!("{} = {d} is below its bound {lo}", model.delta_names[j])));
        }
    }
    match cfg.missing {
        Missingness::None => {}
        Missingness::Interval { start, end } => {
            if !(start >= 1 && start < end && end <= cfg.n_time + 1) {
                return Err(Error::config(format!(
                    "missing interval [{start}, {end}) must satisfy 1 ≤ τ < τ* ≤ T+1"
                )));
            }
        }
        Missingness::Bernoulli { rate } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(format!("missing rate {rate} must lie in [0, 1)")));
            }
        }
    }
    if let Some((mean, cov)) = &cfg.pre_sample {
        if mean.len() != model.state_dim || cov.shape() != (model.state_dim, model.state_dim) {
            return Err(Error::dim("pre-sample state must be p-dimensional"));
        }
    }
    Ok(())
}

/// Simulates one panel and returns it with its latent truth.
///
/// Variance parameters may sit on their lower bounds here, so noise-free
/// panels can be generated.
pub fn simulate_panel(model: &ModelSpec, effects: &EffectsDesign, cfg: &SimConfig) -> Result<(PanelData, Truth)> {
    check_config(model, effects, cfg)?;
    let delta = cfg.params.delta.as_slice();
    let (m, n_time, q) = (cfg.m, cfg.n_time, model.obs_dim);

    let mut rng = stream_rng(cfg.seed, 0);
    let (theta, b): (Vec<_>, Vec<_>) = match &effects.kind {
        EffectsKind::Known { theta } => theta.iter().map(|t| (t.clone(), DVector::zeros(0))).unzip(),
        EffectsKind::Mixed { .. } => {
            let factor = linalg::psd_factor(&effects.prior_cov(model, delta))?;
            (0..m)
                .map(|i| {
                    let b = gaussian(&mut rng, &DVector::zeros(effects.stacked_dim()), &factor);
                    (effects.theta_from_effects(i, &cfg.params.fixed, &b), b)
                })
                .unzip()
        }
    };

    let mut data = PanelData::new(m, n_time, q);
    let mut states = vec![Vec::with_capacity(n_time); m];
    for (u, unit) in model::units(model, m).iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, u as u64 + 1);
        let thetas: Vec<_> = unit.members.iter().map(|&i| theta[i].clone()).collect();
        let sys = unit_system(model, effects, &thetas, delta)?;
        let q_factor = linalg::psd_factor(&sys.state_cov)?;
        let r_factor = linalg::psd_factor(&sys.obs_cov)?;
        let p = model.state_dim;
        let mut x = match &cfg.pre_sample {
            Some((mean, cov)) => {
                let f = linalg::psd_factor(cov)?;
                let mut x0 = DVector::zeros(p * unit.members.len());
                for k in 0..unit.members.len() {
                    x0.rows_mut(k * p, p).copy_from(&gaussian(&mut rng, mean, &f));
                }
                gaussian(&mut rng, &(&sys.transition[0] * x0), &q_factor)
            }
            None => gaussian(&mut rng, &sys.init_mean, &linalg::psd_factor(&sys.init_cov)?),
        };
        for t in 1..=n_time {
            let y = gaussian(&mut rng, &(sys.observation_at(t) * &x), &r_factor);
            for (k, &i) in unit.members.iter().enumerate() {
                states[i].push(x.rows(k * p, p).into_owned());
                data.set(i, t - 1, y.rows(k * q, q).as_slice())?;
            }
            if t < n_time {
                x = gaussian(&mut rng, &(sys.transition_at(t) * &x), &q_factor);
            }
        }
    }

    match cfg.missing {
        Missingness::None => {}
        Missingness::Interval { start, end } => {
            for t in start..end.min(n_time + 1) {
                for i in 0..m {
                    data.set_missing(i, t - 1);
                }
            }
        }
        Missingness::Bernoulli { rate } => {
            let mut rng = stream_rng(cfg.seed, u64::MAX);
            for i in 0..m {
                for t in 0..n_time {
                    if rng.random::<f64>() < rate {
                        data.set_missing(i, t);
                    }
                }
            }
        }
    }
    Ok((
        data,
        Truth {
            params: cfg.params.clone(),
            theta,
            effects: b,
            states,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Em,
    Score,
}

/// A grid of `(m, T)` cells, each simulated and fitted `replications` times.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub truth: Params,
    pub start: Params,
    pub m_values: Vec<usize>,
    pub t_values: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub missing: Missingness,
    pub pre_sample: Option<(DVector<f64>, DMatrix<f64>)>,
    pub estimator: Estimator,
    pub em: EmConfig,
    pub quasi_newton: QuasiNewtonConfig,
}

/// Results for one `(m, T)` cell.
#[derive(Debug, Clone)]
pub struct StudyCell {
    pub m: usize,
    pub n_time: usize,
    pub estimates: Vec<Params>,
    pub converged: Vec<bool>,
    pub failures: usize,
    pub mean: Vec<f64>,
    /// Empirical standard deviation of the estimates over replications.
    pub se: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StudyTable {
    pub names: Vec<String>,
    pub cells: Vec<StudyCell>,
}

impl StudyTable {
    /// `m,T,replications,used,<name>_Estimate,<name>_SE,…`; `replications`
    /// counts failed runs too, `used` only those entering the summaries.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["m".to_string(), "T".into(), "replications".into(), "used".into()];
        for n in &self.names {
            header.push(format!("{n}_Estimate"));
            header.push(format!("{n}_SE"));
        }
        wr.write_record(&header)?;
        for c in &self.cells {
            let used = used_indices(c).len();
            let mut row = vec![
                c.m.to_string(),
                c.n_time.to_string(),
                (c.estimates.len() + c.failures).to_string(),
                used.to_string(),
            ];
            for (mean, se) in c.mean.iter().zip(&c.se) {
                row.push(format!("{mean:.6}"));
                row.push(format!("{se:.6}"));
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn used_indices(cell: &StudyCell) -> Vec<usize> {
    let ok: Vec<usize> = (0..cell.estimates.len()).filter(|&r| cell.converged[r]).collect();
    if ok.is_empty() {
        (0..cell.estimates.len()).collect()
    } else {
        ok
    }
}

fn fit_one(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    cfg: &StudyConfig,
    seed: u64,
) -> Result<FitResult> {
    match cfg.estimator {
        Estimator::Em => fit_em(data, model, effects, &cfg.start, &EmConfig { seed, ..cfg.em }),
        Estimator::Score => fit_quasi_newton(
            data,
            model,
            effects,
            &cfg.start,
            &QuasiNewtonConfig {
                seed,
                ..cfg.quasi_newton
            },
        ),
    }
}

/// Runs the study. `build` returns the model and design for `m` individuals.
///
/// Unconverged replications are excluded from the cell summaries (all are
/// used when none converged); a warning is logged when more than 5% of a
/// cell's replications did not converge.
pub fn run_study<F>(build: F, cfg: &StudyConfig) -> Result<StudyTable>
where
    F: Fn(usize) -> Result<(ModelSpec, EffectsDesign)> + Sync,
{
    if cfg.replications == 0 {
        return Err(Error::config("a study needs at least one replication"));
    }
    let mut cells = Vec::new();
    let mut names = Vec::new();
    for (ci, &m) in cfg.m_values.iter().enumerate() {
        for (cj, &n_time) in cfg.t_values.iter().enumerate() {
            let (model, effects) = build(m)?;
            names = Params::names(&model, &effects);
            let cell_seed = derive_seed(cfg.seed, (ci * cfg.t_values.len() + cj) as u64);
            let results: Vec<Result<FitResult>> = (0..cfg.replications)
                .into_par_iter()
                .map(|rep| {
                    let seed = derive_seed(cell_seed, rep as u64);
                    let sim = SimConfig {
                        params: cfg.truth.clone(),
                        m,
                        n_time,
                        seed,
                        missing: cfg.missing.clone(),
                        pre_sample: cfg.pre_sample.clone(),
                    };
                    let (data, _) = simulate_panel(&model, &effects, &sim)?;
                    fit_one(&data, &model, &effects, cfg, derive_seed(seed, 1))
                })
                .collect();
            let mut estimates = Vec::new();
            let mut converged = Vec::new();
            let mut failures = 0;
            for r in results {
                match r {
                    Ok(fit) => {
                        converged.push(fit.converged);
                        estimates.push(fit.params);
                    }
                    Err(e) => {
                        log::warn!("replication failed in cell m={m}, T={n_time}: {e}");
                        failures += 1;
                    }
                }
            }
            if estimates.is_empty() {
                return Err(Error::config(format!("every replication failed in cell m={m}, T={n_time}")));
            }
            let mut cell = StudyCell {
                m,
                n_time,
                estimates,
                converged,
                failures,
                mean: Vec::new(),
                se: Vec::new(),
            };
            let unconverged = cell.converged.iter().filter(|c| !**c).count();
            if unconverged as f64 > 0.05 * cell.estimates.len() as f64 {
                log::warn!(
                    "{unconverged} of {} replications did not converge in cell m={m}, T={n_time}",
                    cell.estimates.len()
                );
            }
            let used = used_indices(&cell);
            let dim = cell.estimates[0].len();
            let n = used.len() as f64;
            let values: Vec<Vec<f64>> = used.iter().map(|&r| cell.estimates[r].to_vec()).collect();
            cell.mean = (0..dim).map(|k| values.iter().map(|v| v[k]).sum::<f64>() / n).collect();
            cell.se = (0..dim)
                .map(|k| {
                    if used.len() < 2 {
                        return 0.0;
                    }
                    let mu = cell.mean[k];
                    (values.iter().map(|v| (v[k] - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                })
                .collect();
            cells.push(cell);
        }
    }
    Ok(StudyTable { names, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_ar_noise;

    #[test]
    fn noise_free_panel_is_deterministic() {
        let (model, eff) = build_ar_noise(2);
        let cfg = SimConfig {
            params: Params::new(vec![0.5], vec![0.0, 0.0, 0.0]),
            m: 2,
            n_time: 4,
            seed: 3,
            missing: Missingness::None,
            pre_sample: Some((DVector::from_element(1, 2.0), DMatrix::zeros(1, 1))),
        };
        let (data, truth) = simulate_panel(&model, &eff, &cfg).unwrap();
        assert_eq!(truth.theta[0][0], 0.5);
        let expected = [1.0, 0.5, 0.25, 0.125];
        for (t, e) in expected.iter().enumerate() {
            assert_eq!(data.get(1, t)[0], *e);
        }
    }

    #[test]
    fn interval_missingness_masks_every_individual() {
        let (model, eff) = build_ar_noise(3);
        let cfg = SimConfig {
            params: Params::new(vec![0.3], vec![0.3, 3.0, 0.1]),
            m: 3,
            n_time: 10,
            seed: 1,
            missing: Missingness::Interval { start: 4, end: 7 },
            pre_sample: None,
        };
        let (data, _) = simulate_panel(&model, &eff, &cfg).unwrap();
        for t in 0..10 {
            assert_eq!(data.fully_missing(t), (3..6).contains(&t));
        }
    }
}
