//! Acceptance gate. Every test prints one `PASS`/`FAIL` line with the
//! measured value and its pinned tolerance, then asserts on it.

mod common;

use std::io::Write;
use std::time::Instant;

use common::{kalman_vs_dense, median, random_system};
use messm::em::{fit_em, EmConfig};
use messm::kalman::{disturbance_smoother, filter_steps, kalman_filter, observation_steps, ObservationStep, Observations, StateSpace};
use messm::likelihood::{conditional_loglik, known_theta_loglik};
use messm::mcmc::{sample_posterior, McmcConfig, ThetaSamples};
use messm::mkf::{run_filter, MkfConfig};
use messm::model::{build_ar_noise, build_damped_local_linear, build_two_regime, unit_system, EffectsDesign, EffectsKind, InitialState, ModelSpec};
use messm::score::{fit_quasi_newton, observed_information, score, QuasiNewtonConfig};
use messm::simulate::{run_study, simulate_panel, Estimator, Missingness, SimConfig, StudyConfig};
use messm::{PanelData, Params};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    // straight to the handle so the line survives libtest's output capture
    let mut out = std::io::stdout().lock();
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "acceptance {n} {verdict} {name}: {detail}");
    let _ = out.flush();
}

fn sim(params: Params, m: usize, n_time: usize, seed: u64, missing: Missingness) -> SimConfig {
    SimConfig {
        params,
        m,
        n_time,
        seed,
        missing,
        pre_sample: None,
    }
}

fn known(model: ModelSpec, theta: &[f64]) -> (ModelSpec, EffectsDesign) {
    let r = model.theta_dim;
    let eff = EffectsDesign::known(theta.iter().map(|&v| DVector::from_element(1, v)).collect(), r, None);
    (model.without_random_effects(), eff)
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_filter_smoother_oracle() {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = rng.random_range(1..=2);
        let q = rng.random_range(1..=2);
        let n = rng.random_range(1..=4);
        let (sys, obs) = random_system(&mut rng, p, q, n);
        worst = worst.max(kalman_vs_dense(&sys, &obs));
    }
    let secs = clock.elapsed().as_secs_f64();
    let pass = worst < 1e-8 && secs < 10.0;
    report(1, "filter/smoother vs dense conditioning", pass, &format!("100 systems, max error {worst:.2e} (< 1e-8), {secs:.2} s (< 10 s)"));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn chol(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().cholesky().expect("positive definite").l()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draws `y` from the system itself, keeping the observation pattern of `pattern`.
fn draw_observations(sys: &StateSpace, pattern: &Observations, rng: &mut ChaCha8Rng) -> Observations {
    let (p, q) = (sys.state_dim(), sys.obs_dim());
    let (lq, lh, lp) = (chol(&sys.state_cov), chol(&sys.obs_cov), chol(&sys.init_cov));
    let mut x = &sys.init_mean + &lp * normals(rng, p);
    let mut y = Vec::with_capacity(pattern.n_time());
    for t in 0..pattern.n_time() {
        y.push(sys.observation_at(t + 1) * &x + &lh * normals(rng, q));
        x = sys.transition_at(t + 1) * &x + &lq * normals(rng, p);
    }
    Observations {
        y,
        observed: pattern.observed.clone(),
    }
}

/// Largest |sample mean − target| in Monte-Carlo standard errors over the
/// upper triangle of `target`.
fn worst_z(samples: &[DMatrix<f64>], target: &DMatrix<f64>) -> f64 {
    let n = samples.len() as f64;
    let mut worst = 0.0f64;
    for a in 0..target.nrows() {
        for b in a..target.ncols() {
            let xs: Vec<f64> = samples.iter().map(|s| s[(a, b)]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            worst = worst.max((mean - target[(a, b)]).abs() / (sd / n.sqrt()));
        }
    }
    worst
}

#[test]
fn criterion_2_smoother_identities() {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let (sys, pattern) = random_system(&mut rng, 2, 1, 4);
    let base = kalman_filter(&sys, &pattern).unwrap();
    let reference = disturbance_smoother(&sys, &base);
    let n_time = pattern.n_time();
    let reps = 10_000;
    let mut ee: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(reps); n_time];
    let mut rr: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(reps); n_time];
    for _ in 0..reps {
        let obs = draw_observations(&sys, &pattern, &mut rng);
        let s = disturbance_smoother(&sys, &kalman_filter(&sys, &obs).unwrap());
        for t in 0..n_time {
            ee[t].push(&s.e[t] * s.e[t].transpose());
            rr[t].push(&s.r[t] * s.r[t].transpose());
        }
    }
    let mut worst = 0.0f64;
    let mut checks = 0;
    for t in 0..n_time {
        if !reference.d[t].is_empty() {
            worst = worst.max(worst_z(&ee[t], &reference.d[t]));
            checks += 1;
        }
        // r[t], n[t] for t = 0..T−1 are r_{t−1}, N_{t−1} over 1-based t = 1..T
        worst = worst.max(worst_z(&rr[t], &reference.n[t]));
        checks += 1;
    }
    let secs = clock.elapsed().as_secs_f64();
    let pass = worst < 3.0 && secs < 60.0;
    report(
        2,
        "E[e eᵀ] = D and E[r rᵀ] = N",
        pass,
        &format!("{reps} simulations, {checks} moment matrices, worst deviation {worst:.2} MC SE (< 3), {secs:.1} s (< 60 s)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn panel(model: &ModelSpec, eff: &EffectsDesign, delta: Vec<f64>, n_time: usize, seed: u64, missing: Missingness) -> PanelData {
    let params = Params::new(vec![0.0; eff.n_fixed()], delta);
    simulate_panel(model, eff, &sim(params, eff.m, n_time, seed, missing)).unwrap().0
}

fn point_mass(eff: &EffectsDesign) -> ThetaSamples {
    let EffectsKind::Known { theta } = &eff.kind else { unreachable!() };
    ThetaSamples::point_mass(theta, 1, 0)
}

/// Worst relative error of the analytic score against Richardson-extrapolated
/// central differences of the exact log-likelihood.
fn score_error(model: &ModelSpec, eff: &EffectsDesign, data: &PanelData, delta: &[f64]) -> f64 {
    let s = score(data, model, eff, &Params::new(vec![], delta.to_vec()), &point_mass(eff), None).unwrap();
    let ll = |d: &[f64]| known_theta_loglik(data, model, eff, d).unwrap();
    let mut worst = 0.0f64;
    for j in 0..delta.len() {
        let central = |h: f64| {
            let mut up = delta.to_vec();
            let mut dn = delta.to_vec();
            up[j] += h;
            dn[j] -= h;
            (ll(&up) - ll(&dn)) / (2.0 * h)
        };
        let h = 2e-3 * delta[j];
        let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
        worst = worst.max((s.value[j] - fd).abs() / fd.abs().max(1e-3));
    }
    worst
}

#[test]
fn criterion_3_score_vs_finite_differences() {
    let clock = Instant::now();
    let (ar, _) = build_ar_noise(3);
    let (ar, ar_eff) = known(ar, &[0.3, 0.55, -0.2]);
    let ar_data = panel(&ar, &ar_eff, vec![0.3, 3.0, 0.1], 25, 4, Missingness::Bernoulli { rate: 0.15 });
    let e_ar = score_error(&ar, &ar_eff, &ar_data, &[0.45, 2.2, 0.1]);

    let (dll, _) = build_damped_local_linear(2);
    let (dll, dll_eff) = known(dll, &[0.6, 0.8]);
    let dll_data = panel(&dll, &dll_eff, vec![0.3, 0.5, 0.2, 0.1], 20, 8, Missingness::Bernoulli { rate: 0.2 });
    let e_dll = score_error(&dll, &dll_eff, &dll_data, &[0.4, 0.3, 0.15, 0.1]);

    let (base, base_eff) = build_ar_noise(2);
    let (tr, _) = build_two_regime(base, base_eff, 6).unwrap();
    let tr = tr.without_random_effects();
    let tr_eff = EffectsDesign::known(vec![DVector::from_vec(vec![0.8, 0.2]), DVector::from_vec(vec![-0.3, 0.9])], 1, Some(6));
    let tr_data = panel(&tr, &tr_eff, vec![0.33, 0.76, 0.007, 0.044], 14, 2, Missingness::Interval { start: 3, end: 5 });
    let e_tr = score_error(&tr, &tr_eff, &tr_data, &[0.4, 0.6, 0.007, 0.044]);

    let worst = e_ar.max(e_dll).max(e_tr);
    let secs = clock.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 10.0;
    report(
        3,
        "analytic score vs finite differences",
        pass,
        &format!("relative error AR {e_ar:.1e}, damped trend {e_dll:.1e}, two-regime {e_tr:.1e} (< 1e-4), {secs:.2} s (< 10 s)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_exact_em_monotone() {
    let clock = Instant::now();
    let cfg = EmConfig {
        max_iter: 50,
        tol: 0.0,
        ..Default::default()
    };
    let (ar, _) = build_ar_noise(4);
    let (ar, ar_eff) = known(ar, &[0.7, 0.85, 0.6, 0.9]);
    let ar_data = panel(&ar, &ar_eff, vec![1.0, 1.0, 0.1], 60, 11, Missingness::Bernoulli { rate: 0.1 });
    let ar_fit = fit_em(&ar_data, &ar, &ar_eff, &Params::new(vec![], vec![1.5, 0.5, 0.1]), &cfg).unwrap();

    let (dll, _) = build_damped_local_linear(3);
    let (dll, dll_eff) = known(dll, &[0.6, 0.8, 0.3]);
    let dll_data = panel(&dll, &dll_eff, vec![0.3, 0.5, 0.2, 0.1], 40, 5, Missingness::Interval { start: 10, end: 14 });
    let dll_fit = fit_em(&dll_data, &dll, &dll_eff, &Params::new(vec![], vec![1.0, 1.0, 1.0, 0.1]), &cfg).unwrap();

    let mut smallest = f64::INFINITY;
    let mut iterations = usize::MAX;
    for fit in [&ar_fit, &dll_fit] {
        iterations = iterations.min(fit.criterion.len());
        for w in fit.criterion.windows(2) {
            smallest = smallest.min(w[1] - w[0]);
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    let pass = iterations >= 50 && smallest >= -1e-10 && secs < 30.0;
    report(
        4,
        "exact-E-step EM is monotone",
        pass,
        &format!(
            "{iterations} iterations per run, smallest log-likelihood change {smallest:+.1e} (≥ −1e-10), {secs:.2} s (< 30 s)"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_autoregressive_study() {
    let clock = Instant::now();
    let truth = Params::new(vec![0.3], vec![0.3, 3.0, 0.1]);
    let study = StudyConfig {
        truth,
        start: Params::new(vec![0.5], vec![1.0, 1.0, 0.2]),
        m_values: vec![15, 50],
        t_values: vec![30],
        replications: 20,
        seed: 5005,
        missing: Missingness::None,
        pre_sample: Some((DVector::zeros(1), DMatrix::from_element(1, 1, 3.2))),
        estimator: Estimator::Score,
        em: EmConfig::default(),
        quasi_newton: QuasiNewtonConfig::default(),
    };
    let table = run_study(|m| Ok(build_ar_noise(m)), &study).unwrap();
    let small = &table.cells[0];
    let large = &table.cells[1];
    let reference = [0.31, 0.32, 2.87, 0.11];
    let mu_ok = (large.mean[0] - reference[0]).abs() <= 0.05;
    let delta_ok = (1..4).all(|k| (large.mean[k] / reference[k] - 1.0).abs() <= 0.25);
    let se_ok = (0..4).all(|k| large.se[k] < small.se[k]);
    let unconverged = large.converged.iter().filter(|c| !**c).count() + small.converged.iter().filter(|c| !**c).count();
    let failures = large.failures + small.failures;
    let secs = clock.elapsed().as_secs_f64();
    let pass = mu_ok && delta_ok && se_ok && secs < 1800.0;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    report(
        5,
        "m=50, T=30 study means and SE trend",
        pass,
        &format!(
            "means ({}) vs (0.31 ± 0.05, 0.32, 2.87, 0.11 ± 25%); SE m=15 ({}) > m=50 ({}); {unconverged} unconverged, {failures} failed; {secs:.0} s (< 1800 s)",
            fmt(&large.mean),
            fmt(&small.se),
            fmt(&large.se)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

/// Hand-rolled scalar smoother for the AR-plus-noise model. Returns
/// `(Σ_t e_t², Σ_t D_t, Σ_{k=1}^{T−1} r_k², Σ_{k=1}^{T−1} N_k)`.
fn ar_moment_sums(y: &[Option<f64>], theta: f64, r_var: f64, q_var: f64, a1: f64, p1: f64) -> [f64; 4] {
    let n = y.len();
    let (mut a, mut p) = (a1, p1);
    let mut v = vec![0.0; n];
    let mut f_inv = vec![0.0; n];
    let mut k = vec![0.0; n];
    let mut l = vec![theta; n];
    for t in 0..n {
        if let Some(obs) = y[t] {
            let f = p + r_var;
            v[t] = obs - a;
            f_inv[t] = 1.0 / f;
            k[t] = theta * p / f;
            l[t] = theta - k[t];
            a = theta * a + k[t] * v[t];
            p = theta * p * l[t] + q_var;
        } else {
            a *= theta;
            p = theta * theta * p + q_var;
        }
    }
    let (mut r, mut nn) = (0.0, 0.0);
    let mut sums = [0.0; 4];
    for t in (0..n).rev() {
        if y[t].is_some() {
            let e = f_inv[t] * v[t] - k[t] * r;
            sums[0] += e * e;
            sums[1] += f_inv[t] + k[t] * k[t] * nn;
        }
        r = f_inv[t] * v[t] + l[t] * r;
        nn = f_inv[t] + l[t] * l[t] * nn;
        // r, nn now hold r_t, N_t with 1-based t
        if t >= 1 {
            sums[2] += r * r;
            sums[3] += nn;
        }
    }
    sums
}

#[test]
fn criterion_6_moment_equations_at_the_mle() {
    let clock = Instant::now();
    let (mut model, eff) = build_ar_noise(50);
    // a known first-state law keeps Q out of the initial term, so the state
    // equation reads Σ r_k² = Σ N_k over k = 1..T−1
    let p1 = 3.2;
    model.initial = InitialState::Fixed {
        mean: DVector::zeros(1),
        cov: DMatrix::from_element(1, 1, p1),
    };
    let truth = Params::new(vec![0.3], vec![0.3, 3.0, 0.1]);
    let (data, _) = simulate_panel(&model, &eff, &sim(truth.clone(), 50, 30, 6006, Missingness::Bernoulli { rate: 0.05 })).unwrap();
    let mcmc = McmcConfig {
        draws: 2000,
        ..McmcConfig::default()
    };
    let fit = fit_quasi_newton(
        &data,
        &model,
        &eff,
        &truth,
        &QuasiNewtonConfig {
            mcmc,
            seed: 61,
            ..Default::default()
        },
    )
    .unwrap();
    let hat = &fit.params;
    let samples = sample_posterior(&data, &model, &eff, hat, &McmcConfig { seed: 62, ..mcmc }).unwrap();
    let m = data.m;
    let big_m = samples.len() as f64;
    let mu = hat.fixed[0];
    let (r_var, q_var, d_var) = (hat.delta[0], hat.delta[1], hat.delta[2]);

    let mut mean_theta = 0.0;
    let mut second = 0.0;
    let mut sums = [0.0; 4];
    for i in 0..m {
        let y: Vec<Option<f64>> = (0..data.n_time).map(|t| data.is_observed(i, t).then(|| data.get(i, t)[0])).collect();
        let draws: Vec<f64> = samples.draws.iter().map(|d| d[i][0]).collect();
        let post_mean = draws.iter().sum::<f64>() / big_m;
        let post_var = draws.iter().map(|x| (x - post_mean).powi(2)).sum::<f64>() / big_m;
        mean_theta += post_mean / m as f64;
        second += ((post_mean - mu).powi(2) + post_var) / m as f64;
        for &th in &draws {
            let s = ar_moment_sums(&y, th, r_var, q_var, 0.0, p1);
            for (acc, v) in sums.iter_mut().zip(s) {
                *acc += v / big_m;
            }
        }
    }
    let res_mu = (mu - mean_theta).abs() / mu.abs();
    let res_d3 = (d_var - second).abs() / d_var;
    let res_d1 = (sums[0] - sums[1]).abs() / sums[1];
    let res_d2 = (sums[2] - sums[3]).abs() / sums[3];
    let worst = res_mu.max(res_d3).max(res_d1).max(res_d2);
    let secs = clock.elapsed().as_secs_f64();
    let pass = worst < 0.02 && secs < 300.0;
    report(
        6,
        "moment equations at the MLE",
        pass,
        &format!(
            "M=2000, relative residuals mean {res_mu:.4}, D {res_d3:.4}, e²/D {res_d1:.4}, r²/N {res_d2:.4} (< 0.02); converged {}; {secs:.0} s (< 300 s)",
            fit.converged
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_mixture_kalman_filter() {
    let clock = Instant::now();

    // (a) θ known: every particle carries the same θ
    let (model, _) = build_ar_noise(3);
    let theta = [0.6, -0.3, 0.9];
    let (model, eff) = known(model, &theta);
    let params = Params::new(vec![], vec![0.4, 1.0, 0.1]);
    let (data, _) = simulate_panel(&model, &eff, &sim(params.clone(), 3, 30, 71, Missingness::Interval { start: 8, end: 11 })).unwrap();
    let run = run_filter(&data, &model, &eff, &params, &MkfConfig { particles: 5000, h: 0.1, seed: 72 }, None).unwrap();
    let mut worst_a = 0.0f64;
    for (i, th) in theta.iter().enumerate() {
        let sys = unit_system(&model, &eff, &[DVector::from_element(1, *th)], params.delta.as_slice()).unwrap();
        let f = kalman_filter(&sys, &data.unit_observations(&[i])).unwrap();
        for t in 0..data.n_time {
            let row = run.rows.iter().find(|r| r.individual == i && r.t == t + 1).unwrap();
            let sd = f.filtered_cov[t][(0, 0)].sqrt();
            let pred_sd = (f.predicted_cov[t][(0, 0)] + params.delta[0]).sqrt();
            worst_a = worst_a
                .max((row.filtered_mean - f.filtered_mean[t][0]).abs() / f.filtered_mean[t][0].abs().max(sd))
                .max((row.filtered_sd - sd).abs() / sd)
                .max((row.pred_mean - f.predicted_mean[t][0]).abs() / f.predicted_mean[t][0].abs().max(pred_sd))
                .max((row.pred_sd - pred_sd).abs() / pred_sd);
        }
    }

    // (b), (c) random θ on an autoregressive panel, oracle filter at the true θ
    let (model, eff) = build_ar_noise(15);
    let truth = Params::new(vec![0.3], vec![0.3, 3.0, 0.1]);
    let (data, tr) = simulate_panel(&model, &eff, &sim(truth.clone(), 15, 100, 73, Missingness::None)).unwrap();
    let run = run_filter(&data, &model, &eff, &truth, &MkfConfig { particles: 2000, h: 0.1, seed: 74 }, Some(&tr.theta)).unwrap();
    let oracle = run.oracle_mse.as_ref().unwrap();
    let ratios: Vec<f64> = run.mse.iter().zip(oracle).map(|(a, b)| a / b).collect();
    let median_ratio = median(&ratios);
    let observed: Vec<_> = run.rows.iter().filter(|r| r.observed).collect();
    let covered = observed
        .iter()
        .filter(|r| (r.y.unwrap() - r.pred_mean).abs() <= 1.959964 * r.pred_sd)
        .count();
    let coverage = covered as f64 / observed.len() as f64;

    let secs = clock.elapsed().as_secs_f64();
    let pass_a = worst_a < 0.02;
    let pass_b = median_ratio <= 1.5;
    let pass_c = (0.90..=0.99).contains(&coverage);
    let pass = pass_a && pass_b && pass_c && secs < 600.0;
    report(
        7,
        "mixture Kalman filter",
        pass,
        &format!(
            "(a) known θ, 5000 particles, worst relative gap {worst_a:.1e} (< 0.02); (b) m=15, T=100 median MSE ratio {median_ratio:.3} (≤ 1.5); (c) 95% coverage {coverage:.3} (in [0.90, 0.99]); {secs:.0} s (< 600 s)"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

/// The same panel written three ways: unobserved rows with junk values,
/// unobserved rows dropped, and `NA` values without an `observed` column.
fn csv_variants(data: &PanelData) -> [String; 3] {
    let mut junk = String::from("individual,t,component,value,observed\n");
    let mut dropped = junk.clone();
    let mut na = String::from("individual,t,component,value\n");
    for i in 0..data.m {
        for t in 0..data.n_time {
            let key = format!("{},{},1", i + 1, t + 1);
            if data.is_observed(i, t) {
                let v = data.get(i, t)[0];
                junk.push_str(&format!("{key},{v},1\n"));
                dropped.push_str(&format!("{key},{v},1\n"));
                na.push_str(&format!("{key},{v}\n"));
            } else {
                junk.push_str(&format!("{key},{},0\n", 1e6 * (i + t + 1) as f64));
                na.push_str(&format!("{key},NA\n"));
            }
        }
    }
    [junk, dropped, na]
}

fn same_panel(a: &PanelData, b: &PanelData) -> bool {
    (a.m, a.n_time, a.obs_dim) == (b.m, b.n_time, b.obs_dim)
        && (0..a.m).all(|i| {
            (0..a.n_time).all(|t| {
                a.is_observed(i, t) == b.is_observed(i, t)
                    && (!a.is_observed(i, t) || bits(a.get(i, t).iter().copied()) == bits(b.get(i, t).iter().copied()))
            })
        })
}

fn bits(v: impl IntoIterator<Item = f64>) -> Vec<u64> {
    v.into_iter().map(f64::to_bits).collect()
}

#[test]
fn criterion_8_missing_data_equivalence() {
    let clock = Instant::now();
    let mut failures: Vec<String> = Vec::new();

    // filter and smoother: junk in masked coordinates vs the explicitly reduced system
    let mut rng = ChaCha8Rng::seed_from_u64(8008);
    for _ in 0..20 {
        let (sys, obs) = random_system(&mut rng, 2, 3, 4);
        let mut junk = obs.clone();
        for t in 0..4 {
            for r in 0..3 {
                if !obs.observed[t][r] {
                    junk.y[t][r] = 1e9 * rng.random::<f64>();
                }
            }
        }
        let reduced: Vec<ObservationStep> = (0..4)
            .map(|t| {
                let rows = obs.rows(t);
                let z = sys.observation_at(t + 1);
                ObservationStep {
                    y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| obs.y[t][r])),
                    z: DMatrix::from_fn(rows.len(), 2, |a, b| z[(rows[a], b)]),
                    h: DMatrix::from_fn(rows.len(), rows.len(), |a, b| sys.obs_cov[(rows[a], rows[b])]),
                    rows,
                }
            })
            .collect();
        if observation_steps(&sys, &junk).unwrap() != reduced {
            failures.push("observation steps differ from the reduced construction".into());
        }
        let a = kalman_filter(&sys, &junk).unwrap();
        let b = filter_steps(&sys, &reduced).unwrap();
        let (sa, sb) = (disturbance_smoother(&sys, &a), disturbance_smoother(&sys, &b));
        if a.loglik.to_bits() != b.loglik.to_bits()
            || a.filtered_mean != b.filtered_mean
            || a.filtered_cov != b.filtered_cov
            || sa.r != sb.r
            || sa.n != sb.n
            || sa.e != sb.e
        {
            failures.push("filter or smoother output differs from the reduced system".into());
        }
    }

    // panel likelihood on the scalar fast path vs the reduced matrix filter
    let (model, eff) = build_ar_noise(6);
    let truth = Params::new(vec![0.3], vec![0.3, 3.0, 0.1]);
    let (data, tr) = simulate_panel(&model, &eff, &sim(truth.clone(), 6, 25, 8009, Missingness::Bernoulli { rate: 0.25 })).unwrap();
    let fast = conditional_loglik(&data, &model, &eff, &tr.theta, truth.delta.as_slice()).unwrap();
    let mut slow = 0.0;
    for i in 0..6 {
        let sys = unit_system(&model, &eff, &[tr.theta[i].clone()], truth.delta.as_slice()).unwrap();
        let obs = data.unit_observations(&[i]);
        slow += filter_steps(&sys, &observation_steps(&sys, &obs).unwrap()).unwrap().loglik;
    }
    let ll_gap = (fast - slow).abs();
    if ll_gap > 1e-9 {
        failures.push(format!("scalar and matrix likelihoods differ by {ll_gap:e}"));
    }

    // fit and filter on three encodings of the same gaps
    let qn = QuasiNewtonConfig {
        max_iter: 5,
        mcmc: McmcConfig {
            draws: 50,
            burn_in: 100,
            thin: 2,
            ..McmcConfig::default()
        },
        ..Default::default()
    };
    let mkf = MkfConfig { particles: 300, h: 0.1, seed: 81 };
    let mut fits = Vec::new();
    let mut filters = Vec::new();
    for text in csv_variants(&data) {
        let parsed = PanelData::read_csv(text.as_bytes()).unwrap();
        if !same_panel(&parsed, &data) {
            failures.push("a CSV encoding did not reproduce the panel".into());
        }
        let fit = fit_quasi_newton(&parsed, &model, &eff, &truth, &qn).unwrap();
        fits.push((bits(fit.params.to_vec()), bits(fit.criterion.clone())));
        let run = run_filter(&parsed, &model, &eff, &truth, &mkf, Some(&tr.theta)).unwrap();
        filters.push(bits(
            run.rows.iter().flat_map(|r| [r.filtered_mean, r.filtered_sd, r.pred_mean, r.pred_sd]).chain(run.mse.iter().copied()),
        ));
    }
    if fits.windows(2).any(|w| w[0] != w[1]) {
        failures.push("fits differ between encodings".into());
    }
    if filters.windows(2).any(|w| w[0] != w[1]) {
        failures.push("particle filter output differs between encodings".into());
    }

    let secs = clock.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 30.0;
    let detail = if failures.is_empty() {
        format!("20 random masks bitwise equal to reduced systems; fit and filter bitwise equal across 3 encodings; scalar/matrix log-likelihood gap {ll_gap:.1e}; {secs:.1} s (< 30 s)")
    } else {
        format!("{}; {secs:.1} s", failures.join("; "))
    };
    report(8, "missing-data equivalence", pass, &detail);
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_two_regime_pipeline() {
    let clock = Instant::now();
    let (base, base_eff) = build_ar_noise(48);
    let (model, eff) = build_two_regime(base, base_eff, 10).unwrap();
    let truth = Params::new(vec![0.85, 0.86], vec![0.33, 0.76, 0.007, 0.044]);
    let (data, tr) = simulate_panel(&model, &eff, &sim(truth.clone(), 48, 20, 9009, Missingness::Bernoulli { rate: 0.1 })).unwrap();
    let start = Params::new(vec![0.7, 0.7], vec![0.5, 0.5, 0.02, 0.02]);
    let fit = fit_quasi_newton(&data, &model, &eff, &start, &QuasiNewtonConfig { seed: 91, ..Default::default() }).unwrap();
    let samples = sample_posterior(
        &data,
        &model,
        &eff,
        &fit.params,
        &McmcConfig {
            draws: 1000,
            seed: 92,
            ..McmcConfig::default()
        },
    )
    .unwrap();
    let info = observed_information(&data, &model, &eff, &fit.params, &samples).unwrap();
    let est = fit.params.to_vec();
    let true_v = truth.to_vec();
    let z: Option<Vec<f64>> = info
        .std_errors
        .as_ref()
        .map(|se| est.iter().zip(&true_v).zip(se.iter()).map(|((e, t), s)| (e - t).abs() / s).collect());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trajectory.csv");
    let run = run_filter(&data, &model, &eff, &fit.params, &MkfConfig { particles: 2000, h: 0.1, seed: 93 }, Some(&tr.theta)).unwrap();
    run.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    let written = std::fs::read_to_string(&path).unwrap();
    let mut lines = written.lines();
    let header_ok = lines.next() == Some("individual,t,component,y,filtered_mean,filtered_sd,pred_mean,pred_sd,observed");
    let rows = lines.count();
    let csv_ok = header_ok && rows == 48 * 20;

    let secs = clock.elapsed().as_secs_f64();
    let within = z.as_ref().is_some_and(|z| z.iter().all(|v| *v <= 3.0));
    let pass = fit.converged && within && csv_ok;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    report(
        9,
        "two-regime fit and trajectory",
        pass,
        &format!(
            "estimate ({}), |error|/SE ({}) (≤ 3); converged {}; trajectory.csv {rows} rows, header {}; median MSE ratio {:.3}; {secs:.0} s",
            fmt(&est),
            z.as_deref().map_or("information not positive definite".into(), fmt),
            fit.converged,
            if header_ok { "ok" } else { "wrong" },
            median(&run.mse.iter().zip(run.oracle_mse.as_ref().unwrap()).map(|(a, b)| a / b).collect::<Vec<_>>()),
        ),
    );
    assert!(pass);
}
