//! Hessian spectrum diagnostics: top eigenvalue by power iteration,
//! Hutchinson trace, and the distance to the edge of stability.

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::ParamVector;
use crate::problems::{Example, Problem};
use crate::rng;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_PROBES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    /// Dominant-magnitude eigenvalue, with its sign.
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub lambda_1: f64,
    pub trace_estimate: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// `2/η - λ₁`.
    pub gap: f64,
    /// `η/2 - λ₁`, logged alongside for comparison with figure conventions.
    pub gap_half_eta: f64,
    /// Set when `gap <= 0`.
    pub edge_of_stability: bool,
}

/// Power iteration on a symmetric linear operator of dimension `d`.
pub fn power_iteration(
    op: impl Fn(&DVector<f64>) -> DVector<f64>,
    d: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> PowerResult {
    let mut r = rng::rng_for(seed, rng::stream::PROBE);
    let mut v = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut r));
    let norm = v.norm();
    if d == 0 || norm == 0.0 {
        return PowerResult { lambda: 0.0, converged: true, iterations: 0 };
    }
    v /= norm;
    let mut lambda = 0.0;
    for it in 1..=max_iter.max(1) {
        let hv = op(&v);
        lambda = v.dot(&hv);
        let residual = (&hv - &v * lambda).norm();
        let hv_norm = hv.norm();
        if hv_norm == 0.0 || residual <= tol * lambda.abs() {
            return PowerResult { lambda, converged: true, iterations: it };
        }
        v = hv / hv_norm;
    }
    PowerResult { lambda, converged: false, iterations: max_iter }
}

/// Top eigenvalue of the mean Hessian over `examples`, via HVPs.
pub fn top_eigenvalue(
    problem: &dyn Problem,
    w: &ParamVector,
    examples: &[Example],
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> PowerResult {
    power_iteration(|v| problem.hvp(w, examples, v), problem.dim(), tol, max_iter, seed)
}

/// Hutchinson estimate of `tr H` with Rademacher probes; returns the mean and
/// its standard error.
pub fn hutchinson_trace(
    op: impl Fn(&DVector<f64>) -> DVector<f64> + Sync,
    d: usize,
    n_probes: usize,
    seed: u64,
) -> (f64, f64) {
    let mut r = rng::rng_for(seed, rng::stream::PROBE);
    let probes: Vec<DVector<f64>> = (0..n_probes)
        .map(|_| DVector::from_fn(d, |_, _| if r.random::<bool>() { 1.0 } else { -1.0 }))
        .collect();
    let values: Vec<f64> = probes.par_iter().map(|v| v.dot(&op(v))).collect();
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, (var / n).sqrt())
}

pub fn hessian_trace(problem: &dyn Problem, w: &ParamVector, examples: &[Example], n_probes: usize, seed: u64) -> f64 {
    hutchinson_trace(|v| problem.hvp(w, examples, v), problem.dim(), n_probes, seed).0
}

/// `2/η - λ₁`; non-positive values mean the stationary closed forms do not
/// exist.
pub fn stability_gap(lambda_1: f64, eta: f64) -> f64 {
    2.0 / eta - lambda_1
}

pub fn spectral_report(
    problem: &dyn Problem,
    w: &ParamVector,
    examples: &[Example],
    eta: f64,
    n_probes: usize,
    seed: u64,
) -> SpectralReport {
    let top = top_eigenvalue(problem, w, examples, DEFAULT_TOL, DEFAULT_MAX_ITER, seed);
    let trace = hessian_trace(problem, w, examples, n_probes, seed);
    let gap = stability_gap(top.lambda, eta);
    SpectralReport {
        lambda_1: top.lambda,
        trace_estimate: trace,
        iterations_used: top.iterations,
        converged: top.converged,
        gap,
        gap_half_eta: eta / 2.0 - top.lambda,
        edge_of_stability: gap <= 0.0,
    }
}
