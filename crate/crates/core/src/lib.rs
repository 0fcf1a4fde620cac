//! Gradient-noise analysis of SGD on small differentiable problems.
//!
//! The crate simulates three discrete processes (mini-batch SGD, its
//! Euler-Maruyama SDE approximation with state-dependent Gaussian noise, and
//! gradient Langevin dynamics), measures the gradient-noise, Hessian and
//! stationary-distribution statistics those processes induce, and evaluates
//! trajectory-based and terminal-state-based information-theoretic
//! generalization bounds from them.
//!
//! Module map:
//!
//! - [`linalg`]: symmetric / SPD matrices, Gaussian KL, the stationary
//!   covariance solver.
//! - [`problems`]: quadratic, logistic and MLP problems with synthetic data.
//! - [`gradstats`]: full-batch gradient and gradient-noise covariances.
//! - [`dynamics`]: SGD / SDE / GLD steps, training runs, ensembles.
//! - [`spectral`]: top Hessian eigenvalue, Hutchinson trace, stability gap.
//! - [`bounds`]: every generalization-bound estimator.

pub mod bounds;
pub mod dynamics;
pub mod error;
pub mod gradstats;
pub mod linalg;
pub mod problems;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
pub use linalg::{GaussianDist, ParamVector, SpdMatrix, SymmetricMatrix};
