//! Score of the observed-data log-likelihood through the Fisher identity,
//! importance reweighting of posterior draws, score-based quasi-Newton
//! maximization and the observed information.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::PanelData;
use crate::em::{e_step_weighted, DrawRecord, SmoothedMoments};
use crate::error::{Error, Result};
use crate::fit::{FitResult, Method};
use crate::likelihood::{check_compatible, member_thetas, panel_units, unit_loglik, unit_state_noise};
use crate::linalg::{self, SpdFactor, LN_2PI};
use crate::mcmc::{iteration_seed, sample_posterior, McmcConfig, ThetaSamples};
use crate::model::{EffectsDesign, ModelSpec, Params};

/// Monte-Carlo estimate of `∂ log f(y; Δ)/∂Δ`, ordered as `(a, δ)`.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    pub value: DVector<f64>,
    /// Batch-means standard error per component; zero when `θ` is known.
    pub mc_se: DVector<f64>,
}

/// Per-regime prior quantities at one `Δ`.
struct Prior {
    d_inv: Vec<DMatrix<f64>>,
    log_det: Vec<f64>,
}

impl Prior {
    fn new(model: &ModelSpec, effects: &EffectsDesign, delta: &[f64]) -> Result<Prior> {
        if effects.is_known() {
            return Ok(Prior {
                d_inv: Vec::new(),
                log_det: Vec::new(),
            });
        }
        let mut d_inv = Vec::new();
        let mut log_det = Vec::new();
        for g in 0..effects.n_regimes() {
            let f = SpdFactor::new(&model.effects_cov(g, delta))
                .ok_or_else(|| Error::NotPositiveDefinite(format!("random-effects covariance D{}(δ)", g + 1)))?;
            d_inv.push(f.inverse);
            log_det.push(f.log_det);
        }
        Ok(Prior { d_inv, log_det })
    }

    /// `log N(θ_i; Ψ_i a, D)` with all constants.
    fn log_density(&self, effects: &EffectsDesign, i: usize, fixed: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        if effects.is_known() {
            return 0.0;
        }
        let r = effects.theta_dim;
        let b = effects.effects_from_theta(i, fixed, theta);
        let mut out = 0.0;
        for (g, (inv, ld)) in self.d_inv.iter().zip(&self.log_det).enumerate() {
            let bg = b.rows(g * r, r);
            out += -0.5 * (r as f64 * LN_2PI + ld + bg.dot(&(inv * bg)));
        }
        out
    }
}

/// Score contribution of one draw of one unit.
fn draw_score(
    model: &ModelSpec,
    effects: &EffectsDesign,
    params: &Params,
    prior: &Prior,
    d_state: &[DMatrix<f64>],
    rec: &DrawRecord,
    members: &[usize],
    draw: &[DVector<f64>],
) -> DVector<f64> {
    let nf = effects.n_fixed();
    let mut out = DVector::zeros(nf + model.n_delta);
    for j in 0..model.n_delta {
        let mut s = 0.0;
        if model.obs_noise.uses(j) {
            s += 0.5 * linalg::trace_product(&rec.obs, &model.obs_noise.derivative(j));
        }
        if d_state[j].nrows() > 0 {
            s += 0.5 * linalg::trace_product(&rec.state, &d_state[j]);
        }
        if let Some(init) = &rec.init {
            s += 0.5 * linalg::trace_product(&init.g0, &init.dp1[j]);
        }
        out[nf + j] = s;
    }
    if effects.is_known() {
        return out;
    }
    let r = effects.theta_dim;
    for &i in members {
        let b = effects.effects_from_theta(i, &params.fixed, &draw[i]);
        for (g, d_inv) in prior.d_inv.iter().enumerate() {
            let bg = b.rows(g * r, r).into_owned();
            let u = d_inv * &bg;
            if let Some(psi) = effects.design(g, i) {
                let off = effects.fixed_offset(g);
                out.rows_mut(off, psi.ncols()).axpy(1.0, &(psi.transpose() * &u), 1.0);
            }
            let outer = &u * u.transpose() - d_inv;
            for j in 0..model.n_delta {
                if model.effects_noise[g].uses(j) {
                    out[nf + j] += 0.5 * linalg::trace_product(&outer, &model.effects_noise[g].derivative(j));
                }
            }
        }
    }
    out
}

/// Per-unit, per-draw score contributions `[u][j]`.
fn draw_scores(
    moments: &SmoothedMoments,
    model: &ModelSpec,
    effects: &EffectsDesign,
    samples: &ThetaSamples,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let params = &moments.params;
    let prior = Prior::new(model, effects, params.delta.as_slice())?;
    Ok(moments
        .units
        .iter()
        .zip(&moments.records)
        .map(|(members, records)| {
            let structure = unit_state_noise(model, members.len());
            let d_state: Vec<DMatrix<f64>> = (0..model.n_delta)
                .map(|j| {
                    if structure.uses(j) {
                        structure.derivative(j)
                    } else {
                        DMatrix::zeros(0, 0)
                    }
                })
                .collect();
            records
                .iter()
                .zip(&samples.draws)
                .map(|(rec, draw)| draw_score(model, effects, params, &prior, &d_state, rec, members, draw))
                .collect()
        })
        .collect())
}

/// Combines per-draw contributions into the score and its batch-means
/// standard error.
fn combine(per_draw: &[Vec<DVector<f64>>], weights: &[Vec<f64>], dim: usize) -> ScoreVector {
    let n_draws = per_draw.first().map_or(0, Vec::len);
    let mut value = DVector::zeros(dim);
    for (rows, w) in per_draw.iter().zip(weights) {
        for (s, &wj) in rows.iter().zip(w) {
            value.axpy(wj, s, 1.0);
        }
    }
    let n_batches = if n_draws >= 40 { 20 } else { n_draws / 2 };
    let mut mc_se = DVector::zeros(dim);
    if n_batches >= 2 {
        let size = n_draws / n_batches;
        let mut totals = Vec::with_capacity(n_batches);
        for b in 0..n_batches {
            let range = b * size..(b + 1) * size;
            let mut total = DVector::zeros(dim);
            for (rows, w) in per_draw.iter().zip(weights) {
                let wsum: f64 = w[range.clone()].iter().sum();
                if wsum <= 0.0 {
                    continue;
                }
                for j in range.clone() {
                    total.axpy(w[j] / wsum, &rows[j], 1.0);
                }
            }
            totals.push(total);
        }
        let mean = totals.iter().fold(DVector::zeros(dim), |acc, t| acc + t) / n_batches as f64;
        for t in &totals {
            let dev = t - &mean;
            mc_se += dev.component_mul(&dev);
        }
        mc_se = (mc_se / ((n_batches - 1) as f64 * n_batches as f64)).map(f64::sqrt);
    }
    ScoreVector { value, mc_se }
}

/// Score at `moments.params` from an E-step already carried out with `samples`.
pub fn score_from_moments(
    moments: &SmoothedMoments,
    model: &ModelSpec,
    effects: &EffectsDesign,
    samples: &ThetaSamples,
) -> Result<ScoreVector> {
    let per_draw = draw_scores(moments, model, effects, samples)?;
    Ok(combine(&per_draw, &moments.weights, effects.n_fixed() + model.n_delta))
}

/// Score at `params` using posterior draws `samples` (taken at `params`, or
/// reweighted to it through `weights`).
pub fn score(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    params: &Params,
    samples: &ThetaSamples,
    weights: Option<&[Vec<f64>]>,
) -> Result<ScoreVector> {
    let moments = e_step_weighted(data, model, effects, params, samples, weights)?;
    score_from_moments(&moments, model, effects, samples)
}

/// Log-weights `log f(y_u, θ_uj; new) − log f(y_u, θ_uj; base)` that turn
/// draws from the posterior at `base` into draws for the posterior at `new`.
pub fn importance_log_weights(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    samples: &ThetaSamples,
    base: &Params,
    base_loglik: &[Vec<f64>],
    new: &Params,
) -> Result<Vec<Vec<f64>>> {
    check_compatible(data, model, effects)?;
    model.check_feasible(&new.delta)?;
    let prior_base = Prior::new(model, effects, base.delta.as_slice())?;
    let prior_new = Prior::new(model, effects, new.delta.as_slice())?;
    let units = panel_units(data, model);
    units
        .par_iter()
        .zip(base_loglik)
        .map(|(unit, base_ll)| {
            samples
                .draws
                .iter()
                .zip(base_ll)
                .enumerate()
                .map(|(j, (draw, &ll0))| {
                    let thetas = member_thetas(unit, draw);
                    let ll1 = unit_loglik(model, effects, unit, &thetas, new.delta.as_slice()).map_err(|e| e.at_draw(j))?;
                    let mut lw = ll1 - ll0;
                    for &i in &unit.members {
                        lw += prior_new.log_density(effects, i, &new.fixed, &draw[i])
                            - prior_base.log_density(effects, i, &base.fixed, &draw[i]);
                    }
                    Ok(lw)
                })
                .collect()
        })
        .collect()
}

/// Normalized weights from log-weights, plus the mean effective sample
/// size fraction over units.
pub fn normalize_log_weights(log_w: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let mut ess = 0.0;
    let w: Vec<Vec<f64>> = log_w
        .iter()
        .map(|row| {
            let lse = linalg::log_sum_exp(row);
            let w: Vec<f64> = row.iter().map(|v| (v - lse).exp()).collect();
            ess += 1.0 / w.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
            w
        })
        .collect();
    let n = log_w.len().max(1) as f64;
    (w, ess / n)
}

/// Importance-sampling estimate of `log f(y; new) − log f(y; base)`.
pub fn loglik_ratio(log_w: &[Vec<f64>]) -> f64 {
    log_w
        .iter()
        .map(|row| linalg::log_sum_exp(row) - (row.len() as f64).ln())
        .sum()
}

fn base_logliks(moments: &SmoothedMoments) -> Vec<Vec<f64>> {
    moments.records.iter().map(|r| r.iter().map(|d| d.loglik).collect()).collect()
}

/// Observed information `−∂² log f(y; Δ)/∂Δ ∂Δᵀ` at `params`.
#[derive(Debug, Clone)]
pub struct ObservedInformation {
    pub matrix: DMatrix<f64>,
    /// `sqrt(diag(I⁻¹))` when the matrix is positive definite.
    pub std_errors: Option<DVector<f64>>,
    /// Eigenvalues, reported when the matrix is not positive definite.
    pub eigenvalues: Option<DVector<f64>>,
}

/// Central differences of the importance-reweighted score. The same draws
/// serve every perturbed point, so their Monte-Carlo noise largely cancels.
pub fn observed_information(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    params: &Params,
    samples: &ThetaSamples,
) -> Result<ObservedInformation> {
    let nf = effects.n_fixed();
    let dim = nf + model.n_delta;
    let base = e_step_weighted(data, model, effects, params, samples, None)?;
    let base_ll = base_logliks(&base);
    let x0 = params.to_vec();
    let mut matrix = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        let mut h = 1e-4 * x0[k].abs().max(0.1);
        if k >= nf {
            h = h.min(0.5 * (x0[k] - model.delta_lower[k - nf]));
        }
        let at = |sign: f64| -> Result<DVector<f64>> {
            let mut x = x0.clone();
            x[k] += sign * h;
            let p = Params::from_slice(&x, nf);
            let log_w = importance_log_weights(data, model, effects, samples, params, &base_ll, &p)?;
            let (w, _) = normalize_log_weights(&log_w);
            Ok(score(data, model, effects, &p, samples, Some(&w))?.value)
        };
        let plus = at(1.0)?;
        let minus = at(-1.0)?;
        matrix.set_column(k, &(-(plus - minus) / (2.0 * h)));
    }
    let matrix = linalg::symmetrized(matrix);
    let (std_errors, eigenvalues) = match SpdFactor::new(&matrix) {
        Some(f) => (Some(f.inverse.diagonal().map(f64::sqrt)), None),
        None => (None, Some(matrix.clone().symmetric_eigen().eigenvalues)),
    };
    Ok(ObservedInformation {
        matrix,
        std_errors,
        eigenvalues,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct QuasiNewtonConfig {
    pub max_iter: usize,
    /// Stop when every score component is within `noise_factor` Monte-Carlo
    /// standard errors of zero (or below `gtol` when `θ` is known) on two
    /// consecutive iterations.
    pub noise_factor: f64,
    pub gtol: f64,
    /// Relative parameter-change tolerance.
    pub tol: f64,
    /// A variance component within this fraction of its starting distance
    /// from the lower bound, with the score still pointing at the bound,
    /// counts as settled on the boundary.
    pub boundary_tol: f64,
    /// Largest step in the internal `(a, log(δ − lower))` coordinates.
    pub max_step: f64,
    /// Length of the moving average used for the Monte-Carlo estimate.
    pub window: usize,
    pub mcmc: McmcConfig,
    pub seed: u64,
}

impl Default for QuasiNewtonConfig {
    fn default() -> Self {
        QuasiNewtonConfig {
            max_iter: 100,
            noise_factor: 2.0,
            gtol: 1e-6,
            tol: 1e-4,
            boundary_tol: 1e-4,
            max_step: 1.0,
            window: 3,
            mcmc: McmcConfig::default(),
            seed: 1,
        }
    }
}

fn to_internal(p: &Params, lower: &[f64]) -> DVector<f64> {
    let delta = p.delta.iter().zip(lower).map(|(d, lo)| (d - lo).ln());
    DVector::from_iterator(p.len(), p.fixed.iter().copied().chain(delta))
}

fn from_internal(x: &DVector<f64>, lower: &[f64], nf: usize) -> Params {
    let mut v: Vec<f64> = x.iter().copied().collect();
    for (k, lo) in lower.iter().enumerate() {
        v[nf + k] = lo + v[nf + k].exp();
    }
    Params::from_slice(&v, nf)
}

/// Score and standard errors mapped to internal coordinates.
fn internal_gradient(s: &ScoreVector, p: &Params, lower: &[f64], nf: usize) -> (DVector<f64>, DVector<f64>) {
    let mut g = s.value.clone();
    let mut se = s.mc_se.clone();
    for (k, lo) in lower.iter().enumerate() {
        let jac = p.delta[k] - lo;
        g[nf + k] *= jac;
        se[nf + k] *= jac;
    }
    (g, se)
}

/// Maximizes the observed-data likelihood by BFGS on Monte-Carlo scores.
///
/// Step lengths are chosen on the importance-sampling estimate of the
/// log-likelihood change computed from the current draws, so every accepted
/// step is an estimated ascent step.
pub fn fit_quasi_newton(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    start: &Params,
    config: &QuasiNewtonConfig,
) -> Result<FitResult> {
    let clock = Instant::now();
    check_compatible(data, model, effects)?;
    model.check_feasible(&start.delta)?;
    let nf = effects.n_fixed();
    if start.fixed.len() != nf {
        return Err(Error::dim(format!("expected {nf} fixed effects, got {}", start.fixed.len())));
    }
    let lower = &model.delta_lower;
    let exact = effects.is_known();
    let dim = start.len();
    let window = config.window.max(1);

    let evaluate = |p: &Params, k: usize| -> Result<(ThetaSamples, SmoothedMoments, ScoreVector)> {
        let mcmc = McmcConfig {
            seed: iteration_seed(config.seed, k),
            draws: if exact { 1 } else { config.mcmc.draws },
            ..config.mcmc
        };
        let samples = sample_posterior(data, model, effects, p, &mcmc)?;
        let moments = e_step_weighted(data, model, effects, p, &samples, None)?;
        let s = score_from_moments(&moments, model, effects, &samples)?;
        Ok((samples, moments, s))
    };

    let mut current = start.clone();
    let mut x = to_internal(&current, lower);
    let (mut samples, mut moments, mut s) = evaluate(&current, 0)?;
    let (mut g, mut se) = internal_gradient(&s, &current, lower, nf);
    let mut h_inv = DMatrix::<f64>::identity(dim, dim);
    let mut first = true;
    let mut trace = vec![current.clone()];
    let mut criterion = vec![moments.loglik];
    let mut acceptance = vec![samples.mean_acceptance()];
    let mut quiet = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut message = String::new();

    // the internal gradient and its noise both shrink like δ − lower, so a
    // maximum on the boundary needs its own test
    let pinned = |k: usize, s: &ScoreVector, p: &Params| {
        k >= nf && s.value[k] < 0.0 && {
            let j = k - nf;
            p.delta[j] - lower[j] <= config.boundary_tol * (start.delta[j] - lower[j]).max(1.0)
        }
    };
    for k in 1..=config.max_iter {
        let settled = (0..dim).all(|c| g[c].abs() <= (config.noise_factor * se[c]).max(config.gtol) || pinned(c, &s, &current));
        if settled {
            quiet += 1;
            if quiet >= 2 || exact {
                converged = true;
                let bound: Vec<&str> = (nf..dim).filter(|&c| pinned(c, &s, &current)).map(|c| model.delta_names[c - nf].as_str()).collect();
                message = if bound.is_empty() {
                    format!("score indistinguishable from zero after {iterations} iterations")
                } else {
                    format!("score indistinguishable from zero after {iterations} iterations ({} at the lower bound)", bound.join(", "))
                };
                break;
            }
        } else {
            quiet = 0;
        }
        // ascent direction on the log-likelihood
        let mut dir = &h_inv * &g;
        if dir.dot(&g) <= 0.0 {
            h_inv = DMatrix::identity(dim, dim);
            dir = g.clone();
        }
        if first {
            dir /= g.amax().max(1.0);
        }
        let cap = dir.amax();
        if cap > config.max_step {
            dir *= config.max_step / cap;
        }
        let slope = dir.dot(&g);
        let base_ll = base_logliks(&moments);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let xn = &x + &dir * step;
            let p = from_internal(&xn, lower, nf);
            if model.check_feasible(&p.delta).is_ok() {
                if let Ok(log_w) = importance_log_weights(data, model, effects, &samples, &current, &base_ll, &p) {
                    let gain = loglik_ratio(&log_w);
                    let (_, ess) = normalize_log_weights(&log_w);
                    if gain.is_finite() && gain >= 1e-4 * step * slope && (exact || ess >= 0.1) {
                        accepted = Some((xn, p));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        iterations = k;
        let Some((xn, next)) = accepted else {
            message = format!("no ascent step found at iteration {k}");
            converged = exact && g.amax() < config.gtol.sqrt();
            break;
        };
        let change = next.max_rel_change(&current);
        let (ns, nm, nsc) = evaluate(&next, k)?;
        let (gn, sen) = internal_gradient(&nsc, &next, lower, nf);
        // BFGS on −ℓ: gradient difference of the negated score
        let sv = &xn - &x;
        let yv = &g - &gn;
        let sy = sv.dot(&yv);
        if sy > 1e-12 * sv.norm() * yv.norm() {
            if first {
                h_inv = DMatrix::identity(dim, dim) * (sy / yv.dot(&yv));
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &yv;
            let yhy = yv.dot(&hy);
            h_inv += (&sv * sv.transpose()) * (rho * rho * yhy + rho)
                - (&hy * sv.transpose() + &sv * hy.transpose()) * rho;
            first = false;
        }
        x = xn;
        current = next;
        samples = ns;
        moments = nm;
        s = nsc;
        g = gn;
        se = sen;
        trace.push(current.clone());
        criterion.push(moments.loglik);
        acceptance.push(samples.mean_acceptance());
        log::debug!("quasi-newton iteration {k}: criterion {:.6}, change {change:.3e}", moments.loglik);
        if exact && change < config.tol * 1e-3 {
            converged = true;
            message = format!("parameters stable after {k} iterations");
            break;
        }
    }
    if message.is_empty() {
        message = format!("stopped at the iteration limit ({iterations})");
    }
    let params = if exact || trace.len() <= window {
        current
    } else {
        let tail = &trace[trace.len() - window..];
        let v = tail.iter().fold(DVector::zeros(dim), |acc, p| acc + DVector::from_vec(p.to_vec())) / window as f64;
        Params::from_slice(v.as_slice(), nf)
    };
    Ok(FitResult {
        method: Method::Score,
        names: Params::names(model, effects),
        n_fixed: nf,
        params,
        trace,
        criterion,
        converged,
        iterations,
        seed: config.seed,
        elapsed_secs: clock.elapsed().as_secs_f64(),
        acceptance,
        score: Some((s.value.iter().copied().collect(), s.mc_se.iter().copied().collect())),
        message,
    })
}
