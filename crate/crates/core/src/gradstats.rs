//! Full-batch gradients and gradient-noise covariances (GNC).
//!
//! Conventions: `Σ` is the single-draw GNC, the plug-in covariance of the
//! per-example gradients; `C = (n - b) / (b (n - 1)) · Σ` is the exact
//! covariance of a without-replacement mini-batch mean; `Σ / b` is its
//! large-`n` simplification.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ParamVector, SymmetricMatrix};
use crate::problems::{Example, Problem};
use crate::rng;

/// Default largest dimension for which full d×d GNC matrices are formed.
pub const DEFAULT_MATRIX_CAP: usize = 512;

const PAR_THRESHOLD: usize = 1 << 15;

/// Mean gradient over `examples[i]` for `i` in `indices`, accumulated in index
/// order into `out`. `grad_buf` must have length d.
///
/// Every code path that needs a batch mean goes through here, so the
/// full-batch step of SGD, SDE and GLD produce the same bits.
pub fn batch_mean_gradient_into(
    problem: &dyn Problem,
    w: &[f64],
    examples: &[Example],
    indices: impl Iterator<Item = usize>,
    grad_buf: &mut [f64],
    out: &mut [f64],
) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut count = 0usize;
    for i in indices {
        problem.grad_into(w, &examples[i], grad_buf);
        for (o, g) in out.iter_mut().zip(grad_buf.iter()) {
            *o += g;
        }
        count += 1;
    }
    let inv = count.max(1) as f64;
    out.iter_mut().for_each(|o| *o /= inv);
}

/// `G = (1/n) Σ_i ∇l(w, z_i)`.
pub fn full_gradient(problem: &dyn Problem, w: &ParamVector, examples: &[Example]) -> ParamVector {
    let d = problem.dim();
    let mut buf = vec![0.0; d];
    let mut out = DVector::zeros(d);
    batch_mean_gradient_into(problem, w.as_slice(), examples, 0..examples.len(), &mut buf, out.as_mut_slice());
    out
}

/// Per-example gradients as the columns of a d×n matrix.
pub fn per_example_gradients(problem: &dyn Problem, w: &ParamVector, examples: &[Example]) -> DMatrix<f64> {
    let d = problem.dim();
    let mut m = DMatrix::zeros(d, examples.len());
    if d == 0 {
        return m;
    }
    let fill = |(col, z): (&mut [f64], &Example)| problem.grad_into(w.as_slice(), z, col);
    if d * examples.len() >= PAR_THRESHOLD {
        m.as_mut_slice().par_chunks_mut(d).zip(examples.par_iter()).for_each(fill);
    } else {
        m.as_mut_slice().chunks_mut(d).zip(examples.iter()).for_each(fill);
    }
    m
}

/// Column mean, summed in column order.
pub fn column_mean(g: &DMatrix<f64>) -> DVector<f64> {
    let mut mean = DVector::zeros(g.nrows());
    for col in g.column_iter() {
        mean += col;
    }
    mean / g.ncols().max(1) as f64
}

fn all_columns_equal(g: &DMatrix<f64>) -> bool {
    g.ncols() <= 1 || g.column_iter().skip(1).all(|c| c == g.column(0))
}

/// Plug-in covariance `(1/n) Σ g gᵀ - ḡ ḡᵀ` of the columns of `g`, computed
/// in centered form. Exactly zero when all columns coincide.
pub fn plug_in_covariance(g: &DMatrix<f64>) -> SymmetricMatrix {
    let d = g.nrows();
    if all_columns_equal(g) {
        return SymmetricMatrix::zeros(d);
    }
    let mean = column_mean(g);
    let mut centered = g.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    SymmetricMatrix::symmetrize(&centered * centered.transpose() / g.ncols() as f64)
}

/// Diagonal of the plug-in covariance, for dimensions above the matrix cap.
pub fn plug_in_variance(g: &DMatrix<f64>) -> Vec<f64> {
    let mean = column_mean(g);
    let n = g.ncols().max(1) as f64;
    (0..g.nrows())
        .map(|k| g.row(k).iter().map(|x| (x - mean[k]).powi(2)).sum::<f64>() / n)
        .collect()
}

/// Single-draw GNC `Σ_t`.
pub fn empirical_gnc(problem: &dyn Problem, w: &ParamVector, examples: &[Example]) -> SymmetricMatrix {
    plug_in_covariance(&per_example_gradients(problem, w, examples))
}

/// `(n - b) / (b (n - 1))`; zero for a batch that is the whole dataset.
pub fn minibatch_factor(n: usize, b: usize) -> Result<f64> {
    if b == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if b > n {
        return Err(Error::Config(format!("batch size {b} exceeds dataset size {n}")));
    }
    if b == n {
        return Ok(0.0);
    }
    Ok((n - b) as f64 / (b as f64 * (n - 1) as f64))
}

/// Mini-batch GNC `C_t = (n - b) / (b (n - 1)) · Σ_t`.
pub fn minibatch_gnc(sigma: &SymmetricMatrix, n: usize, b: usize) -> Result<SymmetricMatrix> {
    Ok(sigma.scale(minibatch_factor(n, b)?))
}

/// Plug-in estimate of the population GNC on an oracle sample.
pub fn population_gnc_estimate(problem: &dyn Problem, w: &ParamVector, oracle: &[Example]) -> SymmetricMatrix {
    empirical_gnc(problem, w, oracle)
}

/// Gradient statistics at one training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSnapshot {
    pub step: usize,
    #[serde(skip)]
    pub full_grad: ParamVector,
    /// `Σ_t`; absent above the matrix cap.
    #[serde(skip)]
    pub single_draw_gnc: Option<SymmetricMatrix>,
    /// `C_t`; absent above the matrix cap.
    #[serde(skip)]
    pub minibatch_gnc: Option<SymmetricMatrix>,
    /// Oracle estimate of `Σ_t^μ`, when an oracle sample was supplied and d
    /// is within the cap.
    #[serde(skip)]
    pub pop_gnc: Option<SymmetricMatrix>,
    /// Oracle estimate of the population gradient `E_Z ∇l(w, Z)`.
    #[serde(skip)]
    pub pop_grad: Option<ParamVector>,
    pub grad_norm_sq: f64,
    pub trace_sigma: f64,
    pub trace_c: f64,
    pub trace_pop: Option<f64>,
    /// Diagonals, always available (used by the diagonal fallback).
    pub diag_sigma: Vec<f64>,
    pub diag_pop: Option<Vec<f64>>,
    pub n: usize,
    pub b: usize,
}

impl GradSnapshot {
    pub fn dim(&self) -> usize {
        self.full_grad.len()
    }

    /// `Σ_t / b`, the large-n form of the mini-batch GNC.
    pub fn gnc_over_b(&self) -> Option<SymmetricMatrix> {
        self.single_draw_gnc.as_ref().map(|s| s.scale(1.0 / self.b as f64))
    }
}

/// Computes a [`GradSnapshot`] at `w`.
pub fn snapshot(
    problem: &dyn Problem,
    w: &ParamVector,
    examples: &[Example],
    b: usize,
    oracle: Option<&[Example]>,
    step: usize,
    matrix_cap: usize,
) -> Result<GradSnapshot> {
    let n = examples.len();
    if n == 0 {
        return Err(Error::InvalidInput("snapshot of an empty dataset".into()));
    }
    let factor = minibatch_factor(n, b)?;
    let grads = per_example_gradients(problem, w, examples);
    let full_grad = full_gradient(problem, w, examples);
    let dense = problem.dim() <= matrix_cap;
    let (sigma, diag_sigma) = if dense {
        let s = plug_in_covariance(&grads);
        let diag = s.diagonal();
        (Some(s), diag)
    } else {
        (None, plug_in_variance(&grads))
    };
    let trace_sigma: f64 = diag_sigma.iter().sum();
    let c = sigma.as_ref().map(|s| s.scale(factor));
    let trace_c = match &c {
        Some(c) => c.trace(),
        None => factor * trace_sigma,
    };
    let (pop_gnc, pop_grad, diag_pop) = match oracle {
        Some(o) if !o.is_empty() => {
            let og = per_example_gradients(problem, w, o);
            let pg = column_mean(&og);
            if dense {
                let p = plug_in_covariance(&og);
                let diag = p.diagonal();
                (Some(p), Some(pg), Some(diag))
            } else {
                (None, Some(pg), Some(plug_in_variance(&og)))
            }
        }
        _ => (None, None, None),
    };
    let trace_pop = diag_pop.as_ref().map(|d| d.iter().sum());
    Ok(GradSnapshot {
        step,
        grad_norm_sq: full_grad.norm_squared(),
        full_grad,
        single_draw_gnc: sigma,
        minibatch_gnc: c,
        pop_gnc,
        pop_grad,
        trace_sigma,
        trace_c,
        trace_pop,
        diag_sigma,
        diag_pop,
        n,
        b,
    })
}

/// Quantities of a parallel process trained on the sub-sample `S_J`.
#[derive(Debug, Clone, PartialEq)]
pub struct LooQuantities {
    pub subset: Vec<usize>,
    /// `ξ_t = G_{J,t} - G_t`.
    pub xi: ParamVector,
    /// `C_{J,t} = (1/b) · plug-in GNC on S_J`.
    pub loo_gnc: SymmetricMatrix,
}

pub fn validate_subset(subset: &[usize], n: usize, b: usize) -> Result<()> {
    if subset.len() <= b {
        return Err(Error::Config(format!("subset size {} must exceed batch size {b}", subset.len())));
    }
    let mut seen = vec![false; n];
    for &i in subset {
        if i >= n {
            return Err(Error::Config(format!("subset index {i} out of range for n = {n}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Config(format!("subset index {i} repeated")));
        }
    }
    Ok(())
}

pub fn loo_quantities(
    problem: &dyn Problem,
    w: &ParamVector,
    examples: &[Example],
    subset: &[usize],
    b: usize,
) -> Result<LooQuantities> {
    validate_subset(subset, examples.len(), b)?;
    let grads = per_example_gradients(problem, w, examples);
    Ok(loo_from_gradients(&grads, subset, b))
}

/// [`loo_quantities`] from precomputed per-example gradients (columns).
pub fn loo_from_gradients(grads: &DMatrix<f64>, subset: &[usize], b: usize) -> LooQuantities {
    let sub = grads.select_columns(subset);
    let g = column_mean(grads);
    let g_j = column_mean(&sub);
    let xi = if all_columns_equal(grads) { DVector::zeros(grads.nrows()) } else { g_j - g };
    LooQuantities { subset: subset.to_vec(), xi, loo_gnc: plug_in_covariance(&sub).scale(1.0 / b as f64) }
}

/// All `n` subsets of size `n - 1`, each dropping one index.
pub fn leave_one_out_subsets(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|k| (0..n).filter(|&i| i != k).collect()).collect()
}

/// `count` distinct indices of examples to drop, drawn from the
/// leave-one-out stream of `seed`.
pub fn sample_loo_drops(seed: u64, n: usize, count: usize) -> Vec<usize> {
    let mut r = rng::rng_for(seed, rng::stream::LOO_SUBSET);
    rand::seq::index::sample(&mut r, n, count.min(n)).into_vec()
}
