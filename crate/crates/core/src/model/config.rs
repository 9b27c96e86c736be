//! JSON model configuration (`"schema": 1`).
//!
//! ```json
//! { "schema": 1, "kind": "two_regime", "base": "ar_noise", "t_prime": 5 }
//! ```
//!
//! Recognised kinds: `ar_noise`, `damped_local_linear`, `two_regime` (with
//! `base` and `t_prime`), `swarm` and `custom_matrix` (alias
//! `custom-matrix`). Swarm and custom models spell out their matrices; each
//! covariance is a list of `{ "delta": j, "basis": [[..]] }` terms. Matrices
//! are written as arrays of rows.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    build_ar_noise, build_damped_local_linear, build_two_regime, AffineMatrix, CovStructure, CovTerm, EffectsDesign,
    EffectsKind, InitialState, ModelKind, ModelSpec, Transition,
};

pub const SCHEMA_VERSION: u32 = 1;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    pub constant: Rows,
    #[serde(default)]
    pub coefficients: Vec<Rows>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub delta: usize,
    pub basis: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Fixed { mean: Vec<f64>, cov: Rows },
    Stationary { mean: Vec<f64>, fallback_cov: Rows },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema: u32,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_prime: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialConfig>,
    /// Known individual parameters (stacked per individual); disables random effects.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_theta: Option<Vec<Vec<f64>>>,
    /// Per-individual design matrices `Ψ_i`, shared by both regimes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub designs: Option<Vec<Rows>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_names: Option<Vec<String>>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_delta: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<AffineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<AffineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_noise: Option<Vec<TermConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_state_noise: Option<Vec<TermConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_noise: Option<Vec<TermConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effects_noise: Option<Vec<Vec<TermConfig>>>,
}

pub fn matrix(rows: &Rows, what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::config(format!("{what}: rows have unequal length")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config(format!("{what}: entries must be finite")));
    }
    Ok(DMatrix::from_row_iterator(n, k, rows.iter().flatten().copied()))
}

pub fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn affine(cfg: &Option<AffineConfig>, what: &str) -> Result<AffineMatrix> {
    let cfg = cfg.as_ref().ok_or_else(|| Error::config(format!("`{what}` is required")))?;
    Ok(AffineMatrix {
        constant: matrix(&cfg.constant, what)?,
        coefficients: cfg.coefficients.iter().map(|c| matrix(c, what)).collect::<Result<_>>()?,
    })
}

fn structure(terms: &[TermConfig], dim: usize, what: &str) -> Result<CovStructure> {
    Ok(CovStructure {
        dim,
        terms: terms
            .iter()
            .map(|t| {
                Ok(CovTerm {
                    delta: t.delta,
                    basis: matrix(&t.basis, what)?,
                })
            })
            .collect::<Result<_>>()?,
    })
}

fn required<T: Copy>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(format!("`{what}` is required")))
}

impl ModelConfig {
    pub fn builtin(kind: ModelKind) -> Self {
        ModelConfig {
            schema: SCHEMA_VERSION,
            kind: kind.as_str().to_string(),
            ..Default::default()
        }
    }

    pub fn two_regime(base: ModelKind, t_prime: usize) -> Self {
        ModelConfig {
            schema: SCHEMA_VERSION,
            kind: "two_regime".into(),
            base: Some(base.as_str().into()),
            t_prime: Some(t_prime),
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if cfg.schema != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported model schema {} (expected {SCHEMA_VERSION})",
                cfg.schema
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Builds the model and effects design for a panel of `m` individuals.
    pub fn build(&self, m: usize) -> Result<(ModelSpec, EffectsDesign)> {
        let (mut model, mut effects) = match self.kind.as_str() {
            "two_regime" => {
                let base = self.base.as_deref().unwrap_or("ar_noise");
                let inner = ModelConfig {
                    kind: base.to_string(),
                    base: None,
                    t_prime: None,
                    known_theta: None,
                    designs: None,
                    fixed_names: None,
                    ..self.clone()
                };
                if inner.kind == "two_regime" {
                    return Err(Error::config("two_regime base cannot itself be two_regime"));
                }
                let (model, effects) = inner.build(m)?;
                build_two_regime(model, effects, required(self.t_prime, "t_prime")?)?
            }
            kind => {
                let built = self.build_single(kind, m)?;
                if self.t_prime.is_some() {
                    return Err(Error::config("`t_prime` is only valid for two_regime models"));
                }
                built
            }
        };

        if let Some(designs) = &self.designs {
            if designs.len() != m {
                return Err(Error::config(format!("`designs` has {} entries for {m} individuals", designs.len())));
            }
            let per: Vec<_> = designs.iter().map(|d| matrix(d, "designs")).collect::<Result<_>>()?;
            let k = per[0].ncols();
            effects.kind = EffectsKind::Mixed {
                designs: vec![per; effects.n_regimes()],
            };
            effects.fixed_names = match &self.fixed_names {
                Some(n) => n.clone(),
                None => (0..effects.n_regimes())
                    .flat_map(|g| (0..k).map(move |c| format!("a{}_{}", g + 1, c + 1)))
                    .collect(),
            };
        } else if let Some(names) = &self.fixed_names {
            effects.fixed_names = names.clone();
        }
        if let Some(known) = &self.known_theta {
            if known.len() != m {
                return Err(Error::config(format!("`known_theta` has {} entries for {m} individuals", known.len())));
            }
            let theta = known.iter().map(|t| DVector::from_column_slice(t)).collect();
            effects = EffectsDesign::known(theta, effects.theta_dim, effects.boundary);
            model = model.without_random_effects();
        }
        if let Some(names) = &self.delta_names {
            model.delta_names = names.clone();
        }
        if let Some(lower) = &self.delta_lower {
            model.delta_lower = lower.clone();
        }
        if let Some(init) = &self.initial {
            model.initial = match init {
                InitialConfig::Fixed { mean, cov } => InitialState::Fixed {
                    mean: DVector::from_column_slice(mean),
                    cov: matrix(cov, "initial.cov")?,
                },
                InitialConfig::Stationary { mean, fallback_cov } => InitialState::Stationary {
                    mean: DVector::from_column_slice(mean),
                    fallback_cov: matrix(fallback_cov, "initial.fallback_cov")?,
                },
            };
        }
        model.validate().map_err(as_config)?;
        effects.validate(&model).map_err(as_config)?;
        Ok((model, effects))
    }

    fn build_single(&self, kind: &str, m: usize) -> Result<(ModelSpec, EffectsDesign)> {
        match kind {
            "ar_noise" => Ok(build_ar_noise(m)),
            "damped_local_linear" => {
                log::info!(
                    "damped_local_linear: using transition [[1, 1], [0, θ]] and observation (1, 0); \
                     the opposite assignment is dimensionally inconsistent"
                );
                Ok(build_damped_local_linear(m))
            }
            "swarm" | "custom_matrix" | "custom-matrix" => self.build_custom(kind == "swarm", m),
            other => Err(Error::config(format!("unknown model kind `{other}`"))),
        }
    }

    fn build_custom(&self, swarm: bool, m: usize) -> Result<(ModelSpec, EffectsDesign)> {
        let p = if swarm { 4 } else { required(self.state_dim, "state_dim")? };
        let r = if swarm { 3 } else { required(self.theta_dim, "theta_dim")? };
        let q = required(self.obs_dim, "obs_dim")?;
        let n_delta = required(self.n_delta, "n_delta")?;
        let transition = if swarm {
            Transition::Swarm {
                tau: required(self.tau, "tau")?,
            }
        } else {
            Transition::Affine(affine(&self.transition, "transition")?)
        };
        let state_noise = structure(self.state_noise.as_deref().unwrap_or_default(), p, "state_noise")?;
        let cross_state_noise = match &self.cross_state_noise {
            Some(t) => Some(structure(t, p, "cross_state_noise")?),
            None => None,
        };
        let obs_noise = structure(self.obs_noise.as_deref().unwrap_or_default(), q, "obs_noise")?;
        let effects_noise = match &self.effects_noise {
            Some(list) => list.iter().map(|t| structure(t, r, "effects_noise")).collect::<Result<_>>()?,
            None => return Err(Error::config("`effects_noise` is required (or give `known_theta`)")),
        };
        let model = ModelSpec {
            kind: if swarm { ModelKind::Swarm } else { ModelKind::Custom },
            state_dim: p,
            obs_dim: q,
            theta_dim: r,
            n_delta,
            delta_names: (1..=n_delta).map(|j| format!("d{j}")).collect(),
            delta_lower: vec![0.0; n_delta],
            transition,
            observation: affine(&self.observation, "observation")?,
            state_noise,
            cross_state_noise,
            obs_noise,
            effects_noise,
            initial: InitialState::Fixed {
                mean: DVector::zeros(p),
                cov: DMatrix::identity(p, p),
            },
        };
        if swarm && m < 2 {
            return Err(Error::config("swarm models need at least two individuals"));
        }
        Ok((model, EffectsDesign::intercept(m, r, None)))
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Dimension(m) => Error::Config(m),
        e => e,
    }
}
