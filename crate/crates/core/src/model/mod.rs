//! Model description: per-individual system matrices as functions of the
//! individual parameter `θ_i`, variance components as functions of `δ`, and the
//! fixed/random effects design that generates `θ_i`.

mod builtin;
pub mod config;
mod effects;
pub mod swarm;
mod system;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

pub use builtin::{build_ar_noise, build_damped_local_linear, build_two_regime};
pub use effects::{EffectsDesign, EffectsKind, Params};
pub use system::{assemble_block_system, unit_system, units, StateSpace, Unit};

/// A matrix that is affine in `θ`: `constant + Σ_k θ_k · coefficients[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrix {
    pub constant: DMatrix<f64>,
    pub coefficients: Vec<DMatrix<f64>>,
}

impl AffineMatrix {
    pub fn constant(m: DMatrix<f64>) -> Self {
        AffineMatrix {
            constant: m,
            coefficients: Vec::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.constant.shape()
    }

    pub fn eval(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (c, &t) in self.coefficients.iter().zip(theta) {
            if t != 0.0 {
                out += c * t;
            }
        }
        out
    }

    fn validate(&self, rows: usize, cols: usize, theta_dim: usize, what: &str) -> Result<()> {
        if self.constant.shape() != (rows, cols) {
            return Err(Error::dim(format!(
                "{what} constant is {:?}, expected ({rows}, {cols})",
                self.constant.shape()
            )));
        }
        if self.coefficients.len() > theta_dim {
            return Err(Error::dim(format!(
                "{what} has {} coefficient matrices but θ has dimension {theta_dim}",
                self.coefficients.len()
            )));
        }
        if let Some(c) = self.coefficients.iter().find(|c| c.shape() != (rows, cols)) {
            return Err(Error::dim(format!(
                "{what} coefficient is {:?}, expected ({rows}, {cols})",
                c.shape()
            )));
        }
        Ok(())
    }
}

/// One term `δ_j · B` of a covariance that is linear in the variance parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CovTerm {
    pub delta: usize,
    pub basis: DMatrix<f64>,
}

/// Covariance `Σ_terms δ_{term.delta} · term.basis` with PSD basis matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CovStructure {
    pub dim: usize,
    pub terms: Vec<CovTerm>,
}

/// A term whose support does not overlap any other term of its structure,
/// which is what makes the M-step for its `δ` closed form.
#[derive(Debug, Clone)]
pub(crate) struct IsolatedTerm {
    pub delta: usize,
    pub support: Vec<usize>,
    pub basis_inverse: DMatrix<f64>,
}

impl CovStructure {
    pub fn zero(dim: usize) -> Self {
        CovStructure {
            dim,
            terms: Vec::new(),
        }
    }

    /// `δ_j · I_dim`.
    pub fn scaled_identity(dim: usize, delta: usize) -> Self {
        CovStructure {
            dim,
            terms: vec![CovTerm {
                delta,
                basis: DMatrix::identity(dim, dim),
            }],
        }
    }

    /// `diag(δ_{j_1}, δ_{j_2}, …)`.
    pub fn diagonal(deltas: &[usize]) -> Self {
        let dim = deltas.len();
        let terms = deltas
            .iter()
            .enumerate()
            .map(|(k, &delta)| {
                let mut basis = DMatrix::zeros(dim, dim);
                basis[(k, k)] = 1.0;
                CovTerm { delta, basis }
            })
            .collect();
        CovStructure { dim, terms }
    }

    pub fn eval(&self, delta: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            out += &term.basis * delta[term.delta];
        }
        out
    }

    /// `∂/∂δ_j` of the covariance (independent of `δ`).
    pub fn derivative(&self, j: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for term in self.terms.iter().filter(|t| t.delta == j) {
            out += &term.basis;
        }
        out
    }

    pub fn uses(&self, j: usize) -> bool {
        self.terms.iter().any(|t| t.delta == j)
    }

    /// `Σ_terms δ · B` for a structure lifted to a block system: diagonal
    /// blocks follow `self`, off-diagonal blocks follow `cross`.
    pub fn lift(&self, n: usize, cross: Option<&CovStructure>) -> CovStructure {
        let d = self.dim;
        let mut terms = Vec::new();
        for t in &self.terms {
            let mut basis = DMatrix::zeros(n * d, n * d);
            for i in 0..n {
                basis.view_mut((i * d, i * d), (d, d)).copy_from(&t.basis);
            }
            terms.push(CovTerm {
                delta: t.delta,
                basis,
            });
        }
        if let Some(cross) = cross {
            for t in &cross.terms {
                let mut basis = DMatrix::zeros(n * d, n * d);
                for i in 0..n {
                    for k in 0..n {
                        if i != k {
                            basis.view_mut((i * d, k * d), (d, d)).copy_from(&t.basis);
                        }
                    }
                }
                terms.push(CovTerm {
                    delta: t.delta,
                    basis,
                });
            }
        }
        CovStructure { dim: n * d, terms }
    }

    fn support(basis: &DMatrix<f64>) -> Vec<usize> {
        (0..basis.nrows())
            .filter(|&i| {
                basis.row(i).iter().any(|v| *v != 0.0) || basis.column(i).iter().any(|v| *v != 0.0)
            })
            .collect()
    }

    /// Terms with pairwise disjoint supports and invertible restricted bases,
    /// or `None` when the structure does not have that shape.
    pub(crate) fn isolated_terms(&self) -> Option<Vec<IsolatedTerm>> {
        let mut used = vec![false; self.dim];
        let mut out = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            let support = Self::support(&term.basis);
            if support.is_empty() {
                continue;
            }
            if support.iter().any(|&i| used[i]) {
                return None;
            }
            for &i in &support {
                used[i] = true;
            }
            let restricted = linalg::select_square(&term.basis, &support);
            let inv = linalg::SpdFactor::new(&restricted)?.inverse;
            out.push(IsolatedTerm {
                delta: term.delta,
                support,
                basis_inverse: inv,
            });
        }
        Some(out)
    }

    fn validate(&self, n_delta: usize, what: &str) -> Result<()> {
        for t in &self.terms {
            if t.delta >= n_delta {
                return Err(Error::config(format!(
                    "{what} refers to δ index {} but the model has {n_delta} variance parameters",
                    t.delta
                )));
            }
            if t.basis.shape() != (self.dim, self.dim) {
                return Err(Error::dim(format!(
                    "{what} basis is {:?}, expected ({1}, {1})",
                    t.basis.shape(),
                    self.dim
                )));
            }
            if !linalg::is_psd(&t.basis, 1e-12) || (&t.basis - t.basis.transpose()).amax() > 1e-12 {
                return Err(Error::config(format!("{what} basis must be symmetric PSD")));
            }
        }
        Ok(())
    }
}

/// Distribution of the first state `x_1` of each individual.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    /// `x_1 ~ N(mean, cov)`, known.
    Fixed { mean: DVector<f64>, cov: DMatrix<f64> },
    /// Stationary distribution of the regime-1 dynamics when they are stable,
    /// `N(mean, fallback_cov)` otherwise.
    Stationary {
        mean: DVector<f64>,
        fallback_cov: DMatrix<f64>,
    },
}

impl InitialState {
    pub fn mean(&self) -> &DVector<f64> {
        match self {
            InitialState::Fixed { mean, .. } | InitialState::Stationary { mean, .. } => mean,
        }
    }
}

/// How the per-individual transition matrices are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Transition {
    /// Block-diagonal system with `T(θ_i)` affine in `θ_i`.
    Affine(AffineMatrix),
    /// Group-tracking dynamics `exp(A(θ) τ)` coupling all individuals.
    Swarm { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ArNoise,
    DampedLocalLinear,
    Custom,
    Swarm,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::ArNoise => "ar_noise",
            ModelKind::DampedLocalLinear => "damped_local_linear",
            ModelKind::Custom => "custom_matrix",
            ModelKind::Swarm => "swarm",
        }
    }
}

/// System matrices and variance structure for one individual.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `p`
    pub state_dim: usize,
    /// `q`
    pub obs_dim: usize,
    /// `r`, per regime
    pub theta_dim: usize,
    pub n_delta: usize,
    pub delta_names: Vec<String>,
    /// Feasible-region lower bounds per `δ` component.
    pub delta_lower: Vec<f64>,
    pub transition: Transition,
    pub observation: AffineMatrix,
    /// `Q(δ)`
    pub state_noise: CovStructure,
    /// `Q(i,i')(δ)` for `i != i'`; `None` means independent individuals.
    pub cross_state_noise: Option<CovStructure>,
    /// `R(δ)`
    pub obs_noise: CovStructure,
    /// `D(δ)`, or `D₁(δ), D₂(δ)` in two-regime mode. Empty when `θ` is known.
    pub effects_noise: Vec<CovStructure>,
    pub initial: InitialState,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let (p, q, r) = (self.state_dim, self.obs_dim, self.theta_dim);
        if p == 0 || q == 0 {
            return Err(Error::dim("state and observation dimensions must be positive"));
        }
        if self.delta_names.len() != self.n_delta || self.delta_lower.len() != self.n_delta {
            return Err(Error::config("δ names/bounds must have one entry per variance parameter"));
        }
        match &self.transition {
            Transition::Affine(t) => t.validate(p, p, r, "transition")?,
            Transition::Swarm { tau } => {
                if !(*tau > 0.0) {
                    return Err(Error::config("swarm sampling interval τ must be positive"));
                }
                if p != 4 || r != 3 {
                    return Err(Error::dim("swarm model requires p = 4 and θ_i = (α, β, γ)"));
                }
            }
        }
        self.observation.validate(q, p, r, "observation")?;
        if self.state_noise.dim != p || self.obs_noise.dim != q {
            return Err(Error::dim("noise covariance dimensions do not match p/q"));
        }
        self.state_noise.validate(self.n_delta, "Q")?;
        self.obs_noise.validate(self.n_delta, "R")?;
        if let Some(c) = &self.cross_state_noise {
            if c.dim != p {
                return Err(Error::dim("cross-individual covariance must be p×p"));
            }
            c.validate(self.n_delta, "Q(i,i')")?;
        }
        for (g, d) in self.effects_noise.iter().enumerate() {
            if d.dim != r {
                return Err(Error::dim(format!("D{} must be r×r", g + 1)));
            }
            d.validate(self.n_delta, "D")?;
        }
        let (mean, cov) = match &self.initial {
            InitialState::Fixed { mean, cov } => (mean, cov),
            InitialState::Stationary { mean, fallback_cov } => (mean, fallback_cov),
        };
        if mean.len() != p || cov.shape() != (p, p) {
            return Err(Error::dim("initial state must be p-dimensional"));
        }
        if linalg::SpdFactor::new(cov).is_none() {
            return Err(Error::NotPositiveDefinite("initial state covariance P₁".into()));
        }
        Ok(())
    }

    /// Variance parameters must lie strictly above their lower bounds.
    pub fn check_feasible(&self, delta: &DVector<f64>) -> Result<()> {
        if delta.len() != self.n_delta {
            return Err(Error::dim(format!(
                "expected {} variance parameters, got {}",
                self.n_delta,
                delta.len()
            )));
        }
        for (j, (&d, &lo)) in delta.iter().zip(&self.delta_lower).enumerate() {
            if !d.is_finite() || d <= lo {
                return Err(Error::Parameter(format!(
                    "{} = {d} is outside the feasible region (> {lo})",
                    self.delta_names[j]
                )));
            }
        }
        Ok(())
    }

    pub fn transition_matrix(&self, theta_i: &[f64]) -> Result<DMatrix<f64>> {
        match &self.transition {
            Transition::Affine(t) => Ok(t.eval(theta_i)),
            Transition::Swarm { .. } => Err(Error::Unsupported(
                "swarm transitions couple individuals; use assemble_block_system".into(),
            )),
        }
    }

    pub fn observation_matrix(&self, theta_i: &[f64]) -> DMatrix<f64> {
        self.observation.eval(theta_i)
    }

    pub fn state_cov(&self, delta: &[f64]) -> DMatrix<f64> {
        self.state_noise.eval(delta)
    }

    pub fn obs_cov(&self, delta: &[f64]) -> DMatrix<f64> {
        self.obs_noise.eval(delta)
    }

    pub fn effects_cov(&self, regime: usize, delta: &[f64]) -> DMatrix<f64> {
        self.effects_noise[regime].eval(delta)
    }

    /// `(∂Q/∂δ_j, ∂R/∂δ_j, [∂D_g/∂δ_j])`.
    pub fn d_cov(&self, j: usize) -> (DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>) {
        (
            self.state_noise.derivative(j),
            self.obs_noise.derivative(j),
            self.effects_noise.iter().map(|d| d.derivative(j)).collect(),
        )
    }

    /// True when the likelihood factorizes over individuals.
    pub fn independent_individuals(&self) -> bool {
        self.cross_state_noise.is_none() && matches!(self.transition, Transition::Affine(_))
    }

    pub fn has_random_effects(&self) -> bool {
        !self.effects_noise.is_empty()
    }
}
