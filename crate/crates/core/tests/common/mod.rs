#![allow(dead_code)]

use messm::kalman::{Observations, StateSpace};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Moments of the states and disturbances obtained by conditioning the full
/// joint Gaussian of `(x_1..x_T, observed y)` directly.
pub struct DenseOracle {
    pub loglik: f64,
    /// `E[x_t | y_1..y_t]`, `Var[x_t | y_1..y_t]`
    pub filtered: Vec<(DVector<f64>, DMatrix<f64>)>,
    /// `E[x_t | y]`, `Var[x_t | y]`
    pub smoothed: Vec<(DVector<f64>, DMatrix<f64>)>,
    /// `E[x_1 − a_1 | y]` followed by `E[x_{k+1} − T_k x_k | y]`, with variances.
    pub state_disturbance: Vec<(DVector<f64>, DMatrix<f64>)>,
    /// `E[y_t − Z_t x_t | y]` on the observed rows, with variance.
    pub obs_disturbance: Vec<(DVector<f64>, DMatrix<f64>)>,
}

struct Joint {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// (time, row, index into the joint vector) of each observed component
    obs: Vec<(usize, usize, usize)>,
    y: DVector<f64>,
}

fn joint(sys: &StateSpace, obs: &Observations) -> Joint {
    let n = obs.n_time();
    let p = sys.state_dim();
    let q = sys.obs_dim();
    let mut cx = vec![vec![DMatrix::zeros(p, p); n]; n];
    let mut mx = vec![sys.init_mean.clone(); n];
    cx[0][0] = sys.init_cov.clone();
    for t in 1..n {
        let tr = sys.transition_at(t);
        mx[t] = tr * &mx[t - 1];
        for s in 0..t {
            cx[t][s] = tr * &cx[t - 1][s];
            cx[s][t] = cx[t][s].transpose();
        }
        cx[t][t] = tr * &cx[t - 1][t - 1] * tr.transpose() + &sys.state_cov;
    }
    let mut obs_idx = Vec::new();
    let mut yv = Vec::new();
    for t in 0..n {
        for r in obs.rows(t) {
            obs_idx.push((t, r, n * p + obs_idx.len()));
            yv.push(obs.y[t][r]);
        }
    }
    let dim = n * p + obs_idx.len();
    let mut cov = DMatrix::zeros(dim, dim);
    let mut mean = DVector::zeros(dim);
    for t in 0..n {
        mean.rows_mut(t * p, p).copy_from(&mx[t]);
        for s in 0..n {
            cov.view_mut((t * p, s * p), (p, p)).copy_from(&cx[t][s]);
        }
    }
    for (a, &(t, r, ia)) in obs_idx.iter().enumerate() {
        let z = sys.observation_at(t + 1).row(r).clone_owned();
        mean[ia] = (&z * &mx[t])[0];
        for s in 0..n {
            let c = &z * &cx[t][s];
            for k in 0..p {
                cov[(ia, s * p + k)] = c[k];
                cov[(s * p + k, ia)] = c[k];
            }
        }
        for &(t2, r2, ib) in &obs_idx[..=a] {
            let z2 = sys.observation_at(t2 + 1).row(r2).clone_owned();
            let mut v = (&z * &cx[t][t2] * z2.transpose())[0];
            if t == t2 {
                v += sys.obs_cov[(r, r2)];
            }
            cov[(ia, ib)] = v;
            cov[(ib, ia)] = v;
        }
    }
    let _ = q;
    Joint {
        mean,
        cov,
        obs: obs_idx,
        y: DVector::from_vec(yv),
    }
}

/// Conditions the joint on the observations whose positions are in `given`
/// and returns the full conditional mean and covariance.
fn condition(j: &Joint, given: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    if given.is_empty() {
        return (j.mean.clone(), j.cov.clone());
    }
    let idx: Vec<usize> = given.iter().map(|&g| j.obs[g].2).collect();
    let syy = DMatrix::from_fn(idx.len(), idx.len(), |a, b| j.cov[(idx[a], idx[b])]);
    let sxy = DMatrix::from_fn(j.cov.nrows(), idx.len(), |a, b| j.cov[(a, idx[b])]);
    let dev = DVector::from_fn(idx.len(), |a, _| j.y[given[a]] - j.mean[idx[a]]);
    let inv = syy.try_inverse().expect("observation covariance is invertible");
    let mean = &j.mean + &sxy * &inv * dev;
    let cov = &j.cov - &sxy * &inv * sxy.transpose();
    (mean, cov)
}

pub fn dense_oracle(sys: &StateSpace, obs: &Observations) -> DenseOracle {
    let n = obs.n_time();
    let p = sys.state_dim();
    let j = joint(sys, obs);

    let k = j.obs.len();
    let loglik = if k == 0 {
        0.0
    } else {
        let idx: Vec<usize> = j.obs.iter().map(|o| o.2).collect();
        let syy = DMatrix::from_fn(k, k, |a, b| j.cov[(idx[a], idx[b])]);
        let dev = DVector::from_fn(k, |a, _| j.y[a] - j.mean[idx[a]]);
        let chol = syy.cholesky().expect("observation covariance is positive definite");
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + dev.dot(&chol.solve(&dev)))
    };

    let block = |m: &DVector<f64>, c: &DMatrix<f64>, t: usize| {
        (m.rows(t * p, p).clone_owned(), c.view((t * p, t * p), (p, p)).clone_owned())
    };
    let filtered = (0..n)
        .map(|t| {
            let given: Vec<usize> = (0..k).filter(|&g| j.obs[g].0 <= t).collect();
            let (m, c) = condition(&j, &given);
            block(&m, &c, t)
        })
        .collect();

    let all: Vec<usize> = (0..k).collect();
    let (m, c) = condition(&j, &all);
    let smoothed: Vec<_> = (0..n).map(|t| block(&m, &c, t)).collect();

    let mut state_disturbance = vec![(&smoothed[0].0 - &sys.init_mean, smoothed[0].1.clone())];
    for t in 1..n {
        // v = x_{t+1} − T x_t as a linear map of the stacked states
        let tr = sys.transition_at(t);
        let mut a = DMatrix::zeros(p, n * p);
        a.view_mut((0, t * p), (p, p)).copy_from(&DMatrix::identity(p, p));
        a.view_mut((0, (t - 1) * p), (p, p)).copy_from(&(-tr));
        let cx = c.view((0, 0), (n * p, n * p));
        let mean = &a * m.rows(0, n * p);
        let var = &a * cx * a.transpose();
        state_disturbance.push((mean, var));
    }

    let mut obs_disturbance = Vec::with_capacity(n);
    for t in 0..n {
        let rows = obs.rows(t);
        let z = sys.observation_at(t + 1);
        let zr = DMatrix::from_fn(rows.len(), p, |a, b| z[(rows[a], b)]);
        let y = DVector::from_fn(rows.len(), |a, _| obs.y[t][rows[a]]);
        let (mx, vx) = &smoothed[t];
        obs_disturbance.push((y - &zr * mx, &zr * vx * zr.transpose()));
    }

    DenseOracle {
        loglik,
        filtered,
        smoothed,
        state_disturbance,
        obs_disturbance,
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| normal(rng));
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * floor
}

/// A random time-invariant system with state dimension `p` and observation
/// dimension `q`, plus observations with random gaps (about one cell in five).
pub fn random_system(rng: &mut ChaCha8Rng, p: usize, q: usize, n_time: usize) -> (StateSpace, Observations) {
    let t = DMatrix::from_fn(p, p, |_, _| 0.7 * normal(rng));
    let z = DMatrix::from_fn(q, p, |_, _| normal(rng));
    let sys = StateSpace::simple(
        t,
        z,
        random_spd(rng, p, 0.05),
        random_spd(rng, q, 0.05),
        DVector::from_fn(p, |_, _| normal(rng)),
        random_spd(rng, p, 0.1),
    );
    let y: Vec<DVector<f64>> = (0..n_time).map(|_| DVector::from_fn(q, |_, _| 2.0 * normal(rng))).collect();
    let observed: Vec<Vec<bool>> = (0..n_time).map(|_| (0..q).map(|_| rng.random::<f64>() > 0.2).collect()).collect();
    (sys, Observations { y, observed })
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs_diff_v(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest discrepancy between the Kalman filter/smoother and the dense oracle.
pub fn kalman_vs_dense(sys: &StateSpace, obs: &Observations) -> f64 {
    let f = messm::kalman::kalman_filter(sys, obs).unwrap();
    let s = messm::kalman::disturbance_smoother(sys, &f);
    let o = dense_oracle(sys, obs);
    let mut err = (f.loglik - o.loglik).abs();
    for t in 0..obs.n_time() {
        err = err.max(max_abs_diff_v(&f.filtered_mean[t], &o.filtered[t].0));
        err = err.max(max_abs_diff(&f.filtered_cov[t], &o.filtered[t].1));
        err = err.max(max_abs_diff_v(&s.state_disturbance[t], &o.state_disturbance[t].0));
        err = err.max(max_abs_diff(&s.state_disturbance_var[t], &o.state_disturbance[t].1));
        err = err.max(max_abs_diff_v(&s.obs_disturbance[t], &o.obs_disturbance[t].0));
        err = err.max(max_abs_diff(&s.obs_disturbance_var[t], &o.obs_disturbance[t].1));
    }
    err
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
