//! Small dense linear-algebra helpers shared by the filters and estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Cholesky-based factorization of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
    /// Lower bound on the 2-norm condition number, `(max L_ii / min L_ii)^2`.
    pub condition: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        let chol = m.clone().cholesky()?;
        let l = chol.l_dirty();
        let n = m.nrows();
        let mut log_det = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = l[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            log_det += 2.0 * d.ln();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let condition = if n == 0 { 1.0 } else { (hi / lo).powi(2) };
        let inverse = chol.inverse();
        Some(SpdFactor {
            inverse,
            log_det,
            condition,
            chol,
        })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// Log-density of `N(mean, cov)` at `x`.
pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let f = SpdFactor::new(cov)
        .ok_or_else(|| Error::NotPositiveDefinite("Gaussian covariance".into()))?;
    let d = x - mean;
    let quad = d.dot(&f.solve(&d));
    Ok(-0.5 * (x.len() as f64 * LN_2PI + f.log_det + quad))
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Symmetric square root factor `S` with `S S^T = m` for a PSD matrix; small
/// negative eigenvalues from rounding are clamped to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    let eig = symmetrized(m.clone()).symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let mut sqrt_vals = DVector::zeros(n);
    for i in 0..n {
        let v = eig.eigenvalues[i];
        if v < -1e-10 * scale {
            return Err(Error::NotPositiveDefinite(format!(
                "matrix has negative eigenvalue {v:.3e}"
            )));
        }
        sqrt_vals[i] = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals))
}

pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    let eig = symmetrized(m.clone()).symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    eig.eigenvalues.iter().all(|&v| v >= -tol * scale)
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn select_square(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(A B) without forming the product.
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA_13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with Padé approximants
/// (orders 3 through 13, selected by the 1-norm of the argument).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm requires a square matrix");
    let ident = DMatrix::<f64>::identity(n, n);
    if n == 0 {
        return ident;
    }
    let norm = one_norm(a);
    for &(order, theta) in THETA.iter() {
        if norm <= theta {
            let coef: &[f64] = match order {
                3 => &PADE_3,
                5 => &PADE_5,
                7 => &PADE_7,
                _ => &PADE_9,
            };
            let a2 = a * a;
            let mut u = DMatrix::zeros(n, n);
            let mut v = DMatrix::zeros(n, n);
            let mut pow = ident.clone();
            for k in 0..=order / 2 {
                v += coef[2 * k] * &pow;
                u += coef[2 * k + 1] * &pow;
                pow = &pow * &a2;
            }
            let u = a * u;
            return pade_solve(&u, &v);
        }
    }
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let a = a / 2f64.powi(s);
    let b = &PADE_13;
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (b[13] * &a6 + b[11] * &a4 + b[9] * &a2)
        + b[7] * &a6
        + b[5] * &a4
        + b[3] * &a2
        + b[1] * &ident;
    let u = &a * u_inner;
    let v = &a6 * (b[12] * &a6 + b[10] * &a4 + b[8] * &a2)
        + b[6] * &a6
        + b[4] * &a4
        + b[2] * &a2
        + b[0] * &ident;
    let mut r = pade_solve(&u, &v);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

fn pade_solve(u: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let p = v + u;
    let q = v - u;
    q.lu().solve(&p).expect("Pade denominator is nonsingular for admissible norms")
}

/// Stationary covariance `P = T P T^T + Q` by the doubling iteration.
/// Returns `None` when `T` is not stable (spectral radius >= 1).
pub fn stationary_covariance(t: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut a = t.clone();
    let mut p = q.clone();
    for _ in 0..64 {
        let inc = &a * &p * a.transpose();
        p += &inc;
        a = &a * &a;
        let an = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !an.is_finite() || p.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let pn = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let incn = inc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if an < 1e-13 && incn <= 1e-15 * pn.max(f64::MIN_POSITIVE) {
            return Some(symmetrized(p));
        }
    }
    None
}
