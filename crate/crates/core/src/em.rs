//! Monte-Carlo EM. The E-step averages exact smoother moments over posterior
//! draws of `θ`; the M-step maximizes the resulting intermediate quantity in
//! closed form where the covariance structure allows it and by BFGS otherwise.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::PanelData;
use crate::error::{Error, Result};
use crate::fit::{FitResult, Method};
use crate::likelihood::{
    check_compatible, member_thetas, panel_units, unit_draw_stats, unit_state_noise, InitDraw, UnitData,
};
use crate::linalg::{self, SpdFactor};
use crate::mcmc::{iteration_seed, sample_posterior, McmcConfig, ThetaSamples};
use crate::model::{CovStructure, EffectsDesign, EffectsKind, ModelSpec, Params};
use crate::optim::{self, BfgsOptions};

/// Sufficient statistics of one posterior draw for one unit.
#[derive(Debug, Clone)]
pub struct DrawRecord {
    /// `log f(y_u | θ_u, δ*)`
    pub loglik: f64,
    /// `Σ_{i ∈ u} Σ_t` member blocks of `e_t e_tᵀ − D_t` (q×q).
    pub obs: DMatrix<f64>,
    /// `Σ_{k=1}^{T−1} (r_k r_kᵀ − N_k)` for the unit's stacked state.
    pub state: DMatrix<f64>,
    pub init: Option<InitDraw>,
}

/// Output of the E-step at `Δ*`.
#[derive(Debug, Clone)]
pub struct SmoothedMoments {
    pub params: Params,
    pub n_time: usize,
    /// Individuals of each unit.
    pub units: Vec<Vec<usize>>,
    /// `[i][t]`: `E[e eᵀ − D]` for individual `i`, `None` where unobserved.
    pub obs_terms: Vec<Vec<Option<DMatrix<f64>>>>,
    /// `Σ_t obs_terms[i][t]`
    pub obs_sum: Vec<DMatrix<f64>>,
    /// Number of observed times per individual.
    pub obs_count: Vec<usize>,
    /// `[u][k − 1]`: `E[r_k r_kᵀ − N_k]` for `k = 1..T−1`.
    pub state_terms: Vec<Vec<DMatrix<f64>>>,
    pub state_sum: Vec<DMatrix<f64>>,
    /// `E[θ_i | y]` and `Var(θ_i | y)` (stacked over regimes).
    pub theta_mean: Vec<DVector<f64>>,
    pub theta_var: Vec<DMatrix<f64>>,
    pub fully_missing: Vec<bool>,
    /// `[u][j]`
    pub records: Vec<Vec<DrawRecord>>,
    /// `[u][j]`, each row sums to one.
    pub weights: Vec<Vec<f64>>,
    /// `Σ_u Σ_j w_uj log f(y_u | θ_uj, δ*)`
    pub loglik: f64,
}

impl SmoothedMoments {
    /// `E[b_i | y] = E[θ_i | y] − Ψ_i a`
    pub fn effects_mean(&self, effects: &EffectsDesign, i: usize, fixed: &DVector<f64>) -> DVector<f64> {
        effects.effects_from_theta(i, fixed, &self.theta_mean[i])
    }
}

struct UnitMoments {
    obs_terms: Vec<Vec<Option<DMatrix<f64>>>>,
    state_terms: Vec<DMatrix<f64>>,
    records: Vec<DrawRecord>,
}

fn unit_e_step(
    model: &ModelSpec,
    effects: &EffectsDesign,
    unit: &UnitData,
    samples: &ThetaSamples,
    delta: &[f64],
    weights: &[f64],
    n_time: usize,
) -> Result<UnitMoments> {
    let state_noise = unit_state_noise(model, unit.members.len());
    let q = model.obs_dim;
    let mut obs_terms = vec![vec![None; n_time]; unit.members.len()];
    let mut state_terms: Vec<DMatrix<f64>> = Vec::new();
    let mut records = Vec::with_capacity(samples.len());
    for (j, draw) in samples.draws.iter().enumerate() {
        let w = weights[j];
        let thetas = member_thetas(unit, draw);
        let (stats, init) =
            unit_draw_stats(model, effects, unit, &thetas, delta, &state_noise).map_err(|e| e.at_draw(j))?;
        let mut obs = DMatrix::zeros(q, q);
        for (member, per_t) in stats.obs_terms.iter().enumerate() {
            for (t, term) in per_t.iter().enumerate() {
                let Some(g) = term else { continue };
                obs += g;
                let slot: &mut Option<DMatrix<f64>> = &mut obs_terms[member][t];
                if let Some(acc) = slot.as_mut() {
                    *acc += g * w;
                } else {
                    *slot = Some(g * w);
                }
            }
        }
        if state_terms.is_empty() {
            state_terms = stats.state_terms.iter().map(|s| s * w).collect();
        } else {
            for (acc, s) in state_terms.iter_mut().zip(&stats.state_terms) {
                *acc += s * w;
            }
        }
        records.push(DrawRecord {
            loglik: stats.loglik,
            obs,
            state: stats.state_sum(),
            init,
        });
    }
    Ok(UnitMoments {
        obs_terms,
        state_terms,
        records,
    })
}

/// E-step with equal weight on every draw.
pub fn e_step(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    params: &Params,
    samples: &ThetaSamples,
) -> Result<SmoothedMoments> {
    e_step_weighted(data, model, effects, params, samples, None)
}

/// E-step at `Δ* = params` with per-unit draw weights `weights[u][j]`
/// (normalized per unit); `None` means equal weights.
pub fn e_step_weighted(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    params: &Params,
    samples: &ThetaSamples,
    weights: Option<&[Vec<f64>]>,
) -> Result<SmoothedMoments> {
    check_compatible(data, model, effects)?;
    model.check_feasible(&params.delta)?;
    if samples.is_empty() || samples.m() != data.m {
        return Err(Error::dim(format!(
            "need draws for {} individuals, got {} draws of {}",
            data.m,
            samples.len(),
            samples.m()
        )));
    }
    let units = panel_units(data, model);
    let n_draws = samples.len();
    let weights: Vec<Vec<f64>> = match weights {
        Some(w) => {
            if w.len() != units.len() || w.iter().any(|row| row.len() != n_draws) {
                return Err(Error::dim("one weight per unit and draw is required"));
            }
            w.iter()
                .map(|row| {
                    let total: f64 = row.iter().sum();
                    row.iter().map(|v| v / total).collect()
                })
                .collect()
        }
        None => vec![vec![1.0 / n_draws as f64; n_draws]; units.len()],
    };
    let delta = params.delta.as_slice();
    let n_time = data.n_time;
    let per_unit: Vec<Result<UnitMoments>> = units
        .par_iter()
        .zip(&weights)
        .map(|(unit, w)| unit_e_step(model, effects, unit, samples, delta, w, n_time))
        .collect();

    let q = model.obs_dim;
    let mut obs_terms = vec![Vec::new(); data.m];
    let mut state_terms = Vec::with_capacity(units.len());
    let mut records = Vec::with_capacity(units.len());
    let mut theta_mean = vec![DVector::zeros(0); data.m];
    let mut theta_var = vec![DMatrix::zeros(0, 0); data.m];
    let mut loglik = 0.0;
    for ((unit, res), w) in units.iter().zip(per_unit).zip(&weights) {
        let um = res?;
        for (k, terms) in um.obs_terms.into_iter().enumerate() {
            obs_terms[unit.members[k]] = terms;
        }
        loglik += um.records.iter().zip(w).map(|(r, wj)| wj * r.loglik).sum::<f64>();
        state_terms.push(um.state_terms);
        records.push(um.records);
        for &i in &unit.members {
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
            theta_mean[i] = mean;
            theta_var[i] = var;
        }
    }
    let obs_sum = obs_terms
        .iter()
        .map(|per_t| per_t.iter().flatten().fold(DMatrix::zeros(q, q), |acc, g| acc + g))
        .collect();
    let obs_count = obs_terms.iter().map(|per_t| per_t.iter().flatten().count()).collect();
    let state_sum = state_terms
        .iter()
        .zip(&units)
        .map(|(terms, unit)| {
            let p = model.state_dim * unit.members.len();
            terms.iter().fold(DMatrix::zeros(p, p), |acc, s| acc + s)
        })
        .collect();
    Ok(SmoothedMoments {
        params: params.clone(),
        n_time,
        units: units.iter().map(|u| u.members.clone()).collect(),
        obs_terms,
        obs_sum,
        obs_count,
        state_terms,
        state_sum,
        theta_mean,
        theta_var,
        fully_missing: (0..n_time).map(|t| data.fully_missing(t)).collect(),
        records,
        weights,
        loglik,
    })
}

/// One Gaussian term `−(n/2) log|X(δ)| − ½ tr(X(δ)⁻¹ S)` of the
/// intermediate quantity, restricted to the support of `X`.
#[derive(Debug, Clone)]
struct Block {
    structure: CovStructure,
    stat: DMatrix<f64>,
    count: f64,
}

impl Block {
    fn new(structure: &CovStructure, stat: DMatrix<f64>, count: f64) -> Option<Block> {
        let support: Vec<usize> = (0..structure.dim)
            .filter(|&i| {
                structure
                    .terms
                    .iter()
                    .any(|t| t.basis.row(i).iter().chain(t.basis.column(i).iter()).any(|v| *v != 0.0))
            })
            .collect();
        if support.is_empty() || count <= 0.0 {
            return None;
        }
        if support.len() == structure.dim {
            return Some(Block {
                structure: structure.clone(),
                stat,
                count,
            });
        }
        let terms = structure
            .terms
            .iter()
            .map(|t| crate::model::CovTerm {
                delta: t.delta,
                basis: linalg::select_square(&t.basis, &support),
            })
            .collect();
        Some(Block {
            structure: CovStructure {
                dim: support.len(),
                terms,
            },
            stat: linalg::select_square(&stat, &support),
            count,
        })
    }

    /// Value and `∂/∂δ` of the block's contribution; `None` when `X(δ)` is
    /// not positive definite.
    fn value_grad(&self, delta: &[f64], grad: &mut [f64]) -> Option<f64> {
        let x = self.structure.eval(delta);
        let f = SpdFactor::new(&x)?;
        let xs = &f.inverse * &self.stat;
        let value = -0.5 * self.count * f.log_det - 0.5 * xs.trace();
        let m = &xs * &f.inverse - &f.inverse * self.count;
        for term in &self.structure.terms {
            grad[term.delta] += 0.5 * linalg::trace_product(&m, &term.basis);
        }
        Some(value)
    }
}

/// Blocks for `R`, `Q̃` and the stationary first state, which do not
/// involve the fixed effects.
fn variance_blocks(moments: &SmoothedMoments, model: &ModelSpec) -> Vec<Block> {
    let delta = moments.params.delta.as_slice();
    let mut blocks = Vec::new();

    let r_star = model.obs_cov(delta);
    let q = model.obs_dim;
    let mut stat = DMatrix::zeros(q, q);
    let mut count = 0.0;
    for (sum, &n) in moments.obs_sum.iter().zip(&moments.obs_count) {
        stat += &r_star * (n as f64) + &r_star * sum * &r_star;
        count += n as f64;
    }
    blocks.extend(Block::new(&model.obs_noise, linalg::symmetrized(stat), count));

    let steps = moments.n_time.saturating_sub(1) as f64;
    if steps > 0.0 {
        let mut by_size: Vec<(usize, DMatrix<f64>, f64)> = Vec::new();
        for (sum, members) in moments.state_sum.iter().zip(&moments.units) {
            let structure = unit_state_noise(model, members.len());
            let qs = structure.eval(delta);
            let s = &qs * steps + &qs * sum * &qs;
            match by_size.iter_mut().find(|(n, _, _)| *n == members.len()) {
                Some((_, acc, c)) => {
                    *acc += s;
                    *c += steps;
                }
                None => by_size.push((members.len(), s, steps)),
            }
        }
        for (n, s, c) in by_size {
            blocks.extend(Block::new(&unit_state_noise(model, n), linalg::symmetrized(s), c));
        }
    }

    for (records, weights) in moments.records.iter().zip(&moments.weights) {
        for (rec, &w) in records.iter().zip(weights) {
            let Some(init) = &rec.init else { continue };
            let terms = init
                .dp1
                .iter()
                .enumerate()
                .filter(|(_, d)| d.amax() > 0.0)
                .map(|(j, d)| crate::model::CovTerm {
                    delta: j,
                    basis: d.clone(),
                })
                .collect();
            let structure = CovStructure {
                dim: init.p1.nrows(),
                terms,
            };
            let stat = (&init.p1 + &init.p1 * &init.g0 * &init.p1) * w;
            blocks.extend(Block::new(&structure, linalg::symmetrized(stat), w));
        }
    }
    blocks
}

fn regime_part(v: &DVector<f64>, g: usize, r: usize) -> DVector<f64> {
    v.rows(g * r, r).into_owned()
}

/// Random-effects blocks, one per regime, at fixed effects `fixed`.
fn effects_blocks(
    moments: &SmoothedMoments,
    model: &ModelSpec,
    effects: &EffectsDesign,
    fixed: &DVector<f64>,
) -> Vec<Block> {
    if effects.is_known() {
        return Vec::new();
    }
    let r = effects.theta_dim;
    (0..effects.n_regimes())
        .filter_map(|g| {
            let mut stat = DMatrix::zeros(r, r);
            for i in 0..effects.m {
                let dev = regime_part(&moments.effects_mean(effects, i, fixed), g, r);
                stat.ger(1.0, &dev, &dev, 1.0);
                stat += moments.theta_var[i].view((g * r, g * r), (r, r));
            }
            Block::new(&model.effects_noise[g], linalg::symmetrized(stat), effects.m as f64)
        })
        .collect()
}

/// Generalized least squares for the fixed effects given `D(δ)`.
fn gls_fixed(
    moments: &SmoothedMoments,
    model: &ModelSpec,
    effects: &EffectsDesign,
    delta: &[f64],
) -> Result<DVector<f64>> {
    let EffectsKind::Mixed { designs } = &effects.kind else {
        return Ok(DVector::zeros(0));
    };
    let r = effects.theta_dim;
    let mut out = DVector::zeros(effects.n_fixed());
    for (g, per_ind) in designs.iter().enumerate() {
        let k = per_ind[0].ncols();
        if k == 0 {
            continue;
        }
        let d_inv = SpdFactor::new(&model.effects_cov(g, delta))
            .ok_or_else(|| Error::NotPositiveDefinite(format!("D{}(δ) in the fixed-effects update", g + 1)))?
            .inverse;
        let mut lhs = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for (i, psi) in per_ind.iter().enumerate() {
            let pt_dinv = psi.transpose() * &d_inv;
            lhs += &pt_dinv * psi;
            rhs += &pt_dinv * regime_part(&moments.theta_mean[i], g, r);
        }
        let a = lhs
            .cholesky()
            .ok_or_else(|| Error::Parameter(format!("fixed effects of regime {} are not identified", g + 1)))?
            .solve(&rhs);
        out.rows_mut(effects.fixed_offset(g), k).copy_from(&a);
    }
    Ok(out)
}

/// Closed-form maximizer over `δ` when every block's terms have disjoint
/// supports; `None` otherwise. Components that no block involves keep
/// their value in `current`.
fn closed_form_delta(blocks: &[Block], current: &[f64]) -> Option<Vec<f64>> {
    let n = current.len();
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for b in blocks {
        for term in b.structure.isolated_terms()? {
            let s = linalg::select_square(&b.stat, &term.support);
            num[term.delta] += linalg::trace_product(&term.basis_inverse, &s);
            den[term.delta] += b.count * term.support.len() as f64;
        }
    }
    Some((0..n).map(|j| if den[j] > 0.0 { num[j] / den[j] } else { current[j] }).collect())
}

fn blocks_value(blocks: &[Block], delta: &[f64], grad: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for b in blocks {
        match b.value_grad(delta, grad) {
            Some(v) => total += v,
            None => return f64::NEG_INFINITY,
        }
    }
    total
}

/// BFGS over `u_j = log(δ_j − lower_j)` for the components that appear in
/// some block.
fn numeric_delta(blocks: &[Block], model: &ModelSpec, start: &[f64]) -> Vec<f64> {
    let n = start.len();
    let active: Vec<usize> = (0..n)
        .filter(|&j| blocks.iter().any(|b| b.structure.uses(j)))
        .collect();
    let lower = &model.delta_lower;
    let to_delta = |u: &DVector<f64>| {
        let mut d = start.to_vec();
        for (k, &j) in active.iter().enumerate() {
            d[j] = lower[j] + u[k].exp();
        }
        d
    };
    let u0 = DVector::from_iterator(active.len(), active.iter().map(|&j| (start[j] - lower[j]).max(1e-300).ln()));
    let objective = |u: &DVector<f64>| {
        let d = to_delta(u);
        let mut grad = vec![0.0; n];
        let v = blocks_value(blocks, &d, &mut grad);
        let g = DVector::from_iterator(active.len(), active.iter().map(|&j| -grad[j] * (d[j] - lower[j])));
        (-v, g)
    };
    let res = optim::minimize(
        objective,
        u0,
        &BfgsOptions {
            max_iter: 500,
            gtol: 1e-10,
            max_backtracks: 60,
        },
    );
    to_delta(&res.x)
}

fn floor_delta(model: &ModelSpec, delta: &mut [f64]) {
    for (j, d) in delta.iter_mut().enumerate() {
        let floor = model.delta_lower[j] + 1e-10;
        if !(*d >= floor) {
            log::warn!("{} = {} hit the feasibility floor {floor}", model.delta_names[j], d);
            *d = floor;
        }
    }
}

/// Maximizer of the intermediate quantity built from `moments`.
///
/// Fixed effects and variance components are updated alternately until
/// neither moves; each half-step is exact, so the quantity never decreases.
pub fn m_step(moments: &SmoothedMoments, model: &ModelSpec, effects: &EffectsDesign) -> Result<Params> {
    let base = variance_blocks(moments, model);
    let mut delta: Vec<f64> = moments.params.delta.iter().copied().collect();
    let mut fixed = moments.params.fixed.clone();
    let rounds = if effects.is_known() || effects.n_fixed() == 0 { 1 } else { 200 };
    for _ in 0..rounds {
        if !effects.is_known() {
            fixed = gls_fixed(moments, model, effects, &delta)?;
        }
        let mut blocks = base.clone();
        blocks.extend(effects_blocks(moments, model, effects, &fixed));
        let mut next = match closed_form_delta(&blocks, &delta) {
            Some(d) => d,
            None => numeric_delta(&blocks, model, &delta),
        };
        floor_delta(model, &mut next);
        let change = next
            .iter()
            .zip(&delta)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-12))
            .fold(0.0, f64::max);
        delta = next;
        if change < 1e-12 {
            break;
        }
    }
    if !effects.is_known() {
        fixed = gls_fixed(moments, model, effects, &delta)?;
    }
    Ok(Params {
        fixed,
        delta: DVector::from_vec(delta),
    })
}

/// The intermediate quantity `Q(Δ | Δ*)` up to terms free of `Δ`.
pub fn intermediate_quantity(
    moments: &SmoothedMoments,
    model: &ModelSpec,
    effects: &EffectsDesign,
    params: &Params,
) -> f64 {
    let mut blocks = variance_blocks(moments, model);
    blocks.extend(effects_blocks(moments, model, effects, &params.fixed));
    let mut grad = vec![0.0; params.delta.len()];
    blocks_value(&blocks, params.delta.as_slice(), &mut grad)
}

#[derive(Debug, Clone, Copy)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative-change tolerance on the parameters (on their moving average
    /// when `θ` is random).
    pub tol: f64,
    /// Length of the moving average used for the Monte-Carlo estimate.
    pub window: usize,
    pub mcmc: McmcConfig,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 200,
            tol: 1e-3,
            window: 3,
            mcmc: McmcConfig::default(),
            seed: 1,
        }
    }
}

fn moving_average(trace: &[Params], window: usize) -> Params {
    let tail = &trace[trace.len().saturating_sub(window)..];
    let n = tail.len() as f64;
    let mut out = tail[0].clone();
    for p in &tail[1..] {
        out.fixed += &p.fixed;
        out.delta += &p.delta;
    }
    out.fixed /= n;
    out.delta /= n;
    out
}

/// Runs EM from `start`.
///
/// With known `θ` the E-step is exact and the estimate is the last iterate.
/// Otherwise each iteration draws fresh posterior samples (seeded from the
/// iteration index) and the estimate is the moving average of the last
/// `window` iterates.
pub fn fit_em(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    start: &Params,
    config: &EmConfig,
) -> Result<FitResult> {
    let clock = Instant::now();
    check_compatible(data, model, effects)?;
    model.check_feasible(&start.delta)?;
    if start.fixed.len() != effects.n_fixed() {
        return Err(Error::dim(format!(
            "expected {} fixed effects, got {}",
            effects.n_fixed(),
            start.fixed.len()
        )));
    }
    let exact = effects.is_known();
    let window = config.window.max(1);
    let mut current = start.clone();
    let mut trace = vec![start.clone()];
    let mut averages: Vec<Params> = Vec::new();
    let mut criterion = Vec::new();
    let mut acceptance = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..config.max_iter {
        let mcmc = McmcConfig {
            seed: iteration_seed(config.seed, k),
            draws: if exact { 1 } else { config.mcmc.draws },
            ..config.mcmc
        };
        let samples = sample_posterior(data, model, effects, &current, &mcmc)?;
        acceptance.push(samples.mean_acceptance());
        let moments = e_step(data, model, effects, &current, &samples)?;
        criterion.push(moments.loglik);
        let next = m_step(&moments, model, effects)?;
        iterations = k + 1;
        let change = next.max_rel_change(&current);
        log::debug!("em iteration {iterations}: criterion {:.6}, change {change:.3e}", moments.loglik);
        current = next;
        trace.push(current.clone());
        if exact {
            if change < config.tol {
                converged = true;
                break;
            }
        } else {
            if trace.len() > window {
                averages.push(moving_average(&trace[1..], window));
            }
            if let [.., prev, last] = averages.as_slice() {
                if trace.len() > 2 * window && last.max_rel_change(prev) < config.tol {
                    converged = true;
                    break;
                }
            }
        }
    }
    let params = if exact || trace.len() <= window {
        current
    } else {
        moving_average(&trace[1..], window)
    };
    let message = if converged {
        format!("converged after {iterations} iterations")
    } else {
        format!("stopped at the iteration limit ({iterations})")
    };
    Ok(FitResult {
        method: Method::Em,
        names: Params::names(model, effects),
        n_fixed: effects.n_fixed(),
        params,
        trace,
        criterion,
        converged,
        iterations,
        seed: config.seed,
        elapsed_secs: clock.elapsed().as_secs_f64(),
        acceptance,
        score: None,
        message,
    })
}
