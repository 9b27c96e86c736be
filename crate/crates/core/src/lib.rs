//! Estimation and filtering for linear mixed-effects state space models.
//!
//! A panel of `m` individuals each follows a linear-Gaussian state space
//! model whose parameters `θ_i = Ψ_i a + b_i` combine fixed effects `a` with
//! Gaussian random effects `b_i ~ N(0, D)`. The crate provides
//!
//! * exact Kalman filtering and disturbance smoothing for fixed `θ`,
//! * random-walk Metropolis sampling of `θ | y`,
//! * Monte-Carlo EM and score-based quasi-Newton maximum likelihood,
//! * a mixture Kalman filter with kernel-smoothed parameter particles for
//!   joint recursive estimation of states and random effects,
//! * simulation of panels for all built-in models.

pub mod cli;
pub mod data;
pub mod em;
pub mod error;
pub mod fit;
pub mod kalman;
pub mod likelihood;
pub mod linalg;
pub mod mcmc;
pub mod mkf;
pub mod model;
pub mod optim;
pub mod rng;
pub mod score;
pub mod simulate;

pub use data::PanelData;
pub use error::{Error, Result};
pub use model::{EffectsDesign, ModelSpec, Params};
