//! Mixture Kalman filter with kernel-smoothed parameter particles: each
//! particle carries a value of `θ` and the exact Kalman moments of the state
//! given that value, and the `θ` cloud is rejuvenated by Liu–West shrinkage.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

use crate::data::PanelData;
use crate::error::{Error, Result};
use crate::kalman::{self, factor_innovation, Observations};
use crate::likelihood::{check_compatible, panel_units, UnitData};
use crate::linalg::{self, LN_2PI};
use crate::model::{unit_system, EffectsDesign, ModelSpec, Params, StateSpace};
use crate::rng::{stream_rng, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MkfConfig {
    pub particles: usize,
    /// Kernel bandwidth; the shrinkage factor is `sqrt(1 − h²)`.
    pub h: f64,
    pub seed: u64,
}

impl Default for MkfConfig {
    fn default() -> Self {
        MkfConfig {
            particles: 2000,
            h: 0.1,
            seed: 1,
        }
    }
}

/// Smallest eigenvalue added to the kernel covariance.
pub const KERNEL_FLOOR: f64 = 1e-12;

/// Weighted particles for one filtering unit.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    /// `θ` of every member, concatenated.
    pub theta: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    /// `x_{t|t}`, `P_{t|t}`; `None` before the first step.
    pub filtered: Vec<Option<(DVector<f64>, DMatrix<f64>)>>,
    /// `x_{t+1|t}`, `P_{t+1|t}` under the particle's `θ`.
    pub predicted: Vec<(DVector<f64>, DMatrix<f64>)>,
    /// Number of processed time points.
    pub t: usize,
    pub h: f64,
    pub a: f64,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Weighted mean `θ̄` and weighted covariance `V` of the `θ` cloud.
    pub fn theta_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.theta[0].len();
        let mut mean = DVector::zeros(d);
        for (th, &w) in self.theta.iter().zip(&self.weights) {
            mean.axpy(w, th, 1.0);
        }
        let mut cov = DMatrix::zeros(d, d);
        for (th, &w) in self.theta.iter().zip(&self.weights) {
            let dev = th - &mean;
            cov.ger(w, &dev, &dev, 1.0);
        }
        (mean, linalg::symmetrized(cov))
    }

    /// Shrunk locations `a θ_j + (1 − a) θ̄`.
    pub fn shrunk_locations(&self) -> Vec<DVector<f64>> {
        let (mean, _) = self.theta_moments();
        self.theta.iter().map(|th| th * self.a + &mean * (1.0 - self.a)).collect()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Mixture moments of the state and of `θ` at the current time.
#[derive(Debug, Clone)]
pub struct StateEstimate {
    pub filtered_mean: DVector<f64>,
    pub filtered_cov: DMatrix<f64>,
    pub predicted_mean: DVector<f64>,
    pub predicted_cov: DMatrix<f64>,
    pub theta: DVector<f64>,
}

fn mixture(items: impl Iterator<Item = (f64, DVector<f64>, DMatrix<f64>)>) -> (DVector<f64>, DMatrix<f64>) {
    let items: Vec<_> = items.collect();
    let d = items[0].1.len();
    let mut mean = DVector::zeros(d);
    for (w, m, _) in &items {
        mean.axpy(*w, m, 1.0);
    }
    let mut cov = DMatrix::zeros(d, d);
    for (w, m, c) in &items {
        let dev = m - &mean;
        cov += c * *w;
        cov.ger(*w, &dev, &dev, 1.0);
    }
    (mean, linalg::symmetrized(cov))
}

/// Law-of-total-variance summary of the particle set.
pub fn state_estimate(particles: &ParticleSet) -> StateEstimate {
    let w = &particles.weights;
    let (filtered_mean, filtered_cov) = if particles.filtered.iter().all(Option::is_some) {
        mixture(
            particles
                .filtered
                .iter()
                .zip(w)
                .map(|(f, &wj)| {
                    let (m, c) = f.as_ref().unwrap();
                    (wj, m.clone(), c.clone())
                }),
        )
    } else {
        mixture(particles.predicted.iter().zip(w).map(|((m, c), &wj)| (wj, m.clone(), c.clone())))
    };
    let (predicted_mean, predicted_cov) =
        mixture(particles.predicted.iter().zip(w).map(|((m, c), &wj)| (wj, m.clone(), c.clone())));
    StateEstimate {
        filtered_mean,
        filtered_cov,
        predicted_mean,
        predicted_cov,
        theta: particles.theta_moments().0,
    }
}

/// Filtering context for one unit.
pub struct UnitFilter<'a> {
    pub model: &'a ModelSpec,
    pub effects: &'a EffectsDesign,
    pub members: Vec<usize>,
    pub delta: &'a [f64],
}

impl UnitFilter<'_> {
    fn system(&self, theta: &DVector<f64>) -> Result<StateSpace> {
        let d = self.effects.stacked_dim();
        let thetas: Vec<DVector<f64>> = (0..self.members.len()).map(|k| theta.rows(k * d, d).into_owned()).collect();
        unit_system(self.model, self.effects, &thetas, self.delta)
    }

    /// `x_{t|t−1}`, `P_{t|t−1}` from the previous filtered moments (1-based `t`).
    fn predict(
        sys: &StateSpace,
        t: usize,
        filtered: &Option<(DVector<f64>, DMatrix<f64>)>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        match filtered {
            None => (sys.init_mean.clone(), sys.init_cov.clone()),
            Some((m, p)) => {
                let tr = sys.transition_at(t - 1);
                (tr * m, linalg::symmetrized(tr * p * tr.transpose() + &sys.state_cov))
            }
        }
    }

    /// Log predictive density of the observed rows and the updated moments.
    fn update(
        sys: &StateSpace,
        t: usize,
        pred: &(DVector<f64>, DMatrix<f64>),
        y: &DVector<f64>,
        rows: &[usize],
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let (xm, pm) = pred;
        if rows.is_empty() {
            return Ok((0.0, xm.clone(), pm.clone()));
        }
        let z = linalg::select_rows(sys.observation_at(t), rows);
        let h = linalg::select_square(&sys.obs_cov, rows);
        let yr = DVector::from_iterator(rows.len(), rows.iter().map(|&r| y[r]));
        let v = yr - &z * xm;
        let pz = pm * z.transpose();
        let f = linalg::symmetrized(&z * &pz + h);
        let fac = factor_innovation(&f, t)?;
        let finv_v = &fac.inverse * &v;
        let ll = -0.5 * (rows.len() as f64 * LN_2PI + fac.log_det + v.dot(&finv_v));
        let gain = &pz * &fac.inverse;
        let mean = xm + &pz * finv_v;
        let cov = linalg::symmetrized(pm - &gain * pz.transpose());
        Ok((ll, mean, cov))
    }

    /// Particles drawn from the random-effects prior with uniform weights.
    pub fn init_particles(&self, params: &Params, n: usize, h: f64, rng: &mut StreamRng) -> Result<ParticleSet> {
        if n < 2 {
            return Err(Error::config("the particle filter needs at least two particles"));
        }
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::config(format!("kernel bandwidth h={h} must lie in (0, 1)")));
        }
        let prior_cov = self.effects.prior_cov(self.model, self.delta);
        let factor = linalg::psd_factor(&prior_cov)?;
        let d = self.effects.stacked_dim();
        let mut theta = Vec::with_capacity(n);
        for _ in 0..n {
            let mut th = DVector::zeros(d * self.members.len());
            for (k, &i) in self.members.iter().enumerate() {
                let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
                th.rows_mut(k * d, d).copy_from(&(self.effects.prior_mean(i, &params.fixed) + &factor * z));
            }
            theta.push(th);
        }
        let predicted = theta
            .iter()
            .map(|th| self.system(th).map(|s| (s.init_mean, s.init_cov)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParticleSet {
            weights: vec![1.0 / n as f64; n],
            filtered: vec![None; n],
            predicted,
            theta,
            t: 0,
            h,
            a: (1.0 - h * h).sqrt(),
        })
    }

    /// Processes the observation at time `particles.t + 1`.
    pub fn step(&self, particles: &ParticleSet, y: &DVector<f64>, rows: &[usize], rng: &mut StreamRng) -> Result<ParticleSet> {
        let t = particles.t + 1;
        let n = particles.len();
        if rows.is_empty() {
            let mut next = particles.clone();
            for j in 0..n {
                let sys = self.system(&particles.theta[j])?;
                let pred = Self::predict(&sys, t, &particles.filtered[j]);
                next.predicted[j] = Self::predict(&sys, t + 1, &Some(pred.clone()));
                next.filtered[j] = Some(pred);
            }
            next.t = t;
            return Ok(next);
        }

        // first stage at the shrunk locations
        let (_, v) = particles.theta_moments();
        let dim = v.nrows();
        let kernel = v * (particles.h * particles.h) + DMatrix::identity(dim, dim) * KERNEL_FLOOR;
        let kernel_factor = linalg::psd_factor(&kernel)?;
        let locations = particles.shrunk_locations();
        let mut first = Vec::with_capacity(n);
        for j in 0..n {
            let sys = self.system(&locations[j])?;
            let pred = Self::predict(&sys, t, &particles.filtered[j]);
            let ll = match Self::update(&sys, t, &pred, y, rows) {
                Ok((ll, _, _)) => ll,
                Err(Error::SingularInnovation { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            first.push(ll);
        }
        let log_z: Vec<f64> = first.iter().zip(&particles.weights).map(|(ll, w)| ll + w.ln()).collect();
        let max = log_z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateWeights {
                t,
                max_log_weight: first.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            });
        }
        let z: Vec<f64> = log_z.iter().map(|l| (l - max).exp()).collect();
        let ancestors = systematic_resample(&z, rng);

        // kernel draws, exact update and second-stage weights
        let mut theta = Vec::with_capacity(n);
        let mut filtered = Vec::with_capacity(n);
        let mut predicted = Vec::with_capacity(n);
        let mut log_w = Vec::with_capacity(n);
        for &anc in &ancestors {
            let noise = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let th = &locations[anc] + &kernel_factor * noise;
            let sys = self.system(&th);
            let outcome = sys.and_then(|sys| {
                let pred = Self::predict(&sys, t, &particles.filtered[anc]);
                let (ll, m, c) = Self::update(&sys, t, &pred, y, rows)?;
                let next = Self::predict(&sys, t + 1, &Some((m.clone(), c.clone())));
                Ok((ll, m, c, next))
            });
            match outcome {
                Ok((ll, m, c, next)) => {
                    log_w.push(ll - first[anc]);
                    filtered.push(Some((m, c)));
                    predicted.push(next);
                }
                Err(Error::SingularInnovation { .. }) | Err(Error::NotPositiveDefinite(_)) => {
                    log_w.push(f64::NEG_INFINITY);
                    filtered.push(particles.filtered[anc].clone());
                    predicted.push(particles.predicted[anc].clone());
                }
                Err(e) => return Err(e),
            }
            theta.push(th);
        }
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateWeights { t, max_log_weight: max });
        }
        let raw: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = raw.iter().sum();
        let out = ParticleSet {
            theta,
            weights: raw.iter().map(|w| w / total).collect(),
            filtered,
            predicted,
            t,
            h: particles.h,
            a: particles.a,
        };
        log::trace!("t={t}: effective sample size {:.1}", out.effective_sample_size());
        Ok(out)
    }
}

/// Systematic resampling of `n = weights.len()` indices from unnormalized weights.
pub fn systematic_resample(weights: &[f64], rng: &mut StreamRng) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0] / total;
    let mut k = 0;
    for j in 0..n {
        let u = u0 + j as f64 / n as f64;
        while u > cum && k < n - 1 {
            k += 1;
            cum += weights[k] / total;
        }
        out.push(k);
    }
    out
}

/// One output row per individual, time and observation component.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub individual: usize,
    pub t: usize,
    pub component: usize,
    pub y: Option<f64>,
    /// Filtered signal `Z x_t` given `y_{1:t}`.
    pub filtered_mean: f64,
    pub filtered_sd: f64,
    /// One-step predictive distribution of `y_t` given `y_{1:t−1}`.
    pub pred_mean: f64,
    pub pred_sd: f64,
    pub observed: bool,
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub rows: Vec<TrajectoryRow>,
    /// Weighted mean of `θ_i` after the last time point.
    pub theta: Vec<DVector<f64>>,
    /// One-step prediction MSE per individual over observed cells.
    pub mse: Vec<f64>,
    pub oracle_mse: Option<Vec<f64>>,
    /// Oracle one-step predictive means, aligned with `rows`.
    pub oracle_pred: Option<Vec<f64>>,
}

impl FilterRun {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "individual",
            "t",
            "component",
            "y",
            "filtered_mean",
            "filtered_sd",
            "pred_mean",
            "pred_sd",
            "observed",
        ])?;
        for r in &self.rows {
            wr.write_record([
                (r.individual + 1).to_string(),
                r.t.to_string(),
                (r.component + 1).to_string(),
                r.y.map_or(String::new(), |v| format!("{v}")),
                format!("{}", r.filtered_mean),
                format!("{}", r.filtered_sd),
                format!("{}", r.pred_mean),
                format!("{}", r.pred_sd),
                u8::from(r.observed).to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn mse_json(&self) -> Value {
        let median = |v: &[f64]| {
            let mut s: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
            s.sort_by(f64::total_cmp);
            if s.is_empty() {
                f64::NAN
            } else if s.len() % 2 == 1 {
                s[s.len() / 2]
            } else {
                0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2])
            }
        };
        let ratio = self
            .oracle_mse
            .as_ref()
            .map(|o| self.mse.iter().zip(o).map(|(a, b)| a / b).collect::<Vec<_>>());
        json!({
            "schema": 1,
            "mkf_mse": self.mse,
            "oracle_mse": self.oracle_mse,
            "ratio": ratio,
            "median_mkf_mse": median(&self.mse),
            "median_oracle_mse": self.oracle_mse.as_deref().map(median),
            "median_ratio": ratio.as_deref().map(median),
            "theta": self.theta.iter().map(|t| t.as_slice().to_vec()).collect::<Vec<_>>(),
        })
    }
}

fn signal_moments(
    sys: &StateSpace,
    t: usize,
    moments: &(DVector<f64>, DMatrix<f64>),
    with_noise: bool,
) -> (DVector<f64>, DMatrix<f64>) {
    let z = sys.observation_at(t);
    let mut cov = z * &moments.1 * z.transpose();
    if with_noise {
        cov += &sys.obs_cov;
    }
    (z * &moments.0, cov)
}

fn unit_rows(
    data: &PanelData,
    unit: &UnitData,
    t: usize,
    filtered: &(DVector<f64>, DMatrix<f64>),
    predictive: &(DVector<f64>, DMatrix<f64>),
    out: &mut Vec<TrajectoryRow>,
) {
    let q = data.obs_dim;
    for (k, &i) in unit.members.iter().enumerate() {
        let observed = data.is_observed(i, t - 1);
        for c in 0..q {
            let r = k * q + c;
            out.push(TrajectoryRow {
                individual: i,
                t,
                component: c,
                y: observed.then(|| data.get(i, t - 1)[c]),
                filtered_mean: filtered.0[r],
                filtered_sd: filtered.1[(r, r)].max(0.0).sqrt(),
                pred_mean: predictive.0[r],
                pred_sd: predictive.1[(r, r)].max(0.0).sqrt(),
                observed,
            });
        }
    }
}

fn observations_at(obs: &Observations, t: usize) -> (DVector<f64>, Vec<usize>) {
    (obs.y[t - 1].clone(), obs.rows(t - 1))
}

/// Runs the particle filter over the whole panel. With `oracle_theta`, an
/// exact Kalman filter at those `θ` is run alongside for comparison.
pub fn run_filter(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    params: &Params,
    config: &MkfConfig,
    oracle_theta: Option<&[DVector<f64>]>,
) -> Result<FilterRun> {
    check_compatible(data, model, effects)?;
    model.check_feasible(&params.delta)?;
    let units = panel_units(data, model);
    let mut rows = Vec::with_capacity(data.m * data.n_time * data.obs_dim);
    let mut theta = vec![DVector::zeros(0); data.m];
    let d = effects.stacked_dim();
    for (u, unit) in units.iter().enumerate() {
        let filter = UnitFilter {
            model,
            effects,
            members: unit.members.clone(),
            delta: params.delta.as_slice(),
        };
        let mut rng = stream_rng(config.seed, u as u64);
        let mut particles = filter.init_particles(params, config.particles, config.h, &mut rng)?;
        for t in 1..=data.n_time {
            // predictive distribution of y_t from the particles at t − 1
            let mut pred_items = Vec::with_capacity(particles.len());
            for j in 0..particles.len() {
                let sys = filter.system(&particles.theta[j])?;
                let (m, c) = signal_moments(&sys, t, &particles.predicted[j], true);
                pred_items.push((particles.weights[j], m, c));
            }
            let predictive = mixture(pred_items.into_iter());
            let (y, obs_rows) = observations_at(&unit.obs, t);
            particles = filter.step(&particles, &y, &obs_rows, &mut rng)?;
            let mut filt_items = Vec::with_capacity(particles.len());
            for j in 0..particles.len() {
                let sys = filter.system(&particles.theta[j])?;
                let f = particles.filtered[j].as_ref().expect("filtered after a step");
                let (m, c) = signal_moments(&sys, t, f, false);
                filt_items.push((particles.weights[j], m, c));
            }
            let filtered = mixture(filt_items.into_iter());
            unit_rows(data, unit, t, &filtered, &predictive, &mut rows);
        }
        let (mean, _) = particles.theta_moments();
        for (k, &i) in unit.members.iter().enumerate() {
            theta[i] = mean.rows(k * d, d).into_owned();
        }
    }
    rows.sort_by_key(|r| (r.individual, r.t, r.component));
    let own: Vec<f64> = rows.iter().map(|r| r.pred_mean).collect();
    let mse = prediction_mse(data, &rows, &own);

    let (oracle_mse, oracle_pred) = match oracle_theta {
        None => (None, None),
        Some(th) => {
            if th.len() != data.m || th.iter().any(|v| v.len() != d) {
                return Err(Error::dim(format!("oracle θ must hold {} vectors of length {d}", data.m)));
            }
            let mut pred = Vec::with_capacity(rows.len());
            for unit in &units {
                let thetas: Vec<_> = unit.members.iter().map(|&i| th[i].clone()).collect();
                let sys = unit_system(model, effects, &thetas, params.delta.as_slice())?;
                let f = kalman::kalman_filter(&sys, &unit.obs)?;
                let q = data.obs_dim;
                for t in 1..=data.n_time {
                    let (m, _) =
                        signal_moments(&sys, t, &(f.predicted_mean[t - 1].clone(), f.predicted_cov[t - 1].clone()), true);
                    for (k, &i) in unit.members.iter().enumerate() {
                        for c in 0..q {
                            pred.push(((i, t, c), m[k * q + c]));
                        }
                    }
                }
            }
            pred.sort_by_key(|(key, _)| *key);
            let pred: Vec<f64> = pred.into_iter().map(|(_, v)| v).collect();
            (Some(prediction_mse(data, &rows, &pred)), Some(pred))
        }
    };
    Ok(FilterRun {
        rows,
        theta,
        mse,
        oracle_mse,
        oracle_pred,
    })
}

/// `pred[k]` is the one-step prediction for `rows[k]`.
fn prediction_mse(data: &PanelData, rows: &[TrajectoryRow], pred: &[f64]) -> Vec<f64> {
    let mut sum = vec![0.0; data.m];
    let mut count = vec![0usize; data.m];
    for (r, &p) in rows.iter().zip(pred) {
        if let Some(y) = r.y {
            sum[r.individual] += (y - p).powi(2);
            count[r.individual] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn systematic_resampling_counts() {
        let mut rng = stream_rng(5, 0);
        let idx = systematic_resample(&[0.5, 0.0, 0.25, 0.25], &mut rng);
        assert_eq!(idx.iter().filter(|&&k| k == 0).count(), 2);
        assert!(!idx.contains(&1));
        assert_eq!(idx.iter().filter(|&&k| k == 2).count(), 1);
    }

    #[test]
    fn mixture_adds_dispersion() {
        let items = vec![
            (0.5, DVector::from_element(1, 1.0), DMatrix::zeros(1, 1)),
            (0.5, DVector::from_element(1, -1.0), DMatrix::zeros(1, 1)),
        ];
        let (m, c) = mixture(items.into_iter());
        assert_eq!(m[0], 0.0);
        assert_eq!(c[(0, 0)], 1.0);
    }
}
