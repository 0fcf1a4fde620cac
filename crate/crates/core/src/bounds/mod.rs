//! Generalization-bound estimators.
//!
//! Trajectory bounds fold per-step gradient statistics of a training run;
//! terminal bounds use the spread of final weights across an ensemble of
//! runs. Every estimator returns a [`BoundReport`] whose `core` is the bound
//! with the loss constant (`R` or `M`) set to 1, and whose `value` is
//! `core · constant`.

mod terminal;
mod trajectory;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::linalg::ParamVector;

pub use terminal::{
    fim_takeuchi_bound, fisher_estimate, influence_estimate, takeuchi_trace, terminal_bound_anisotropic,
    terminal_bound_general, terminal_bound_gradient_accum, terminal_bound_isotropic, terminal_bound_loo,
    terminal_curvature, EnsembleSamples, InfluenceEstimate, LooPair, Reference, RunSample, TerminalCurvature,
    TerminalOptions,
};
pub use trajectory::{
    data_dependent_step_term, traj_bound_anisotropic, traj_bound_data_dependent, traj_bound_isotropic,
    traj_bound_langevin, DataDependentRun, TrajectoryInputs, LOO_ENUMERATE_MAX, LOO_SAMPLES,
};

/// Which loss constant scales a bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleKind {
    /// Sub-Gaussian constant `R`.
    R,
    /// Loss range `M`.
    M,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub r: f64,
    pub m: f64,
    pub n: usize,
    pub b: usize,
    pub eta: f64,
    pub steps: usize,
    pub g_tilde: Option<String>,
    pub scale: ScaleKind,
}

impl BoundConfig {
    pub fn new(n: usize, b: usize, eta: f64, steps: usize, scale: ScaleKind) -> Self {
        BoundConfig { r: 1.0, m: 1.0, n, b, eta, steps, g_tilde: None, scale }
    }

    pub fn with_constants(mut self, r: f64, m: f64) -> Self {
        self.r = r;
        self.m = m;
        self
    }

    fn constant(&self) -> f64 {
        match self.scale {
            ScaleKind::R => self.r,
            ScaleKind::M => self.m,
        }
    }
}

/// One evaluated bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub value: f64,
    pub core: f64,
    pub components: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_step_terms: Option<Vec<f64>>,
    /// Named per-step series (e.g. the running core) for plotting.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub series: BTreeMap<String, Vec<f64>>,
    pub config: BoundConfig,
    pub n_runs_used: usize,
    pub flags: Vec<String>,
}

impl BoundReport {
    pub fn new(name: &str, core: f64, config: BoundConfig, n_runs_used: usize) -> Self {
        BoundReport {
            name: name.to_string(),
            value: core * config.constant(),
            core,
            components: BTreeMap::new(),
            per_step_terms: None,
            series: BTreeMap::new(),
            config,
            n_runs_used,
            flags: Vec::new(),
        }
    }

    pub fn component(mut self, key: &str, v: f64) -> Self {
        self.components.insert(key.to_string(), v);
        self
    }

    pub fn flag(&mut self, f: impl Into<String>) {
        let f = f.into();
        if !self.flags.contains(&f) {
            self.flags.push(f);
        }
    }

    pub fn has_flag(&self, f: &str) -> bool {
        self.flags.iter().any(|x| x == f)
    }
}

/// Flag names used across estimators.
pub mod flags {
    pub const NEGATIVE_SUM: &str = "negative-sum";
    pub const FLOOR_ACTIVE: &str = "floor-active";
    pub const APPROXIMATE: &str = "approximate";
    pub const DIAGONAL_FALLBACK: &str = "diagonal-fallback";
    pub const COUNTERFACTUAL: &str = "counterfactual";
    pub const DETERMINISTIC_FAILURE: &str = "deterministic-failure";
    pub const UNDERSAMPLED: &str = "undersampled";
    pub const SINGLE_DATASET: &str = "single-dataset";
    pub const SINGULAR_HESSIAN: &str = "singular-hessian";
    pub const DIVERGED_RUNS: &str = "diverged-runs";
}

/// `sign(x) · sqrt(|x|)`; negative sums are surfaced rather than clipped.
pub fn signed_sqrt(x: f64) -> f64 {
    x.signum() * x.abs().sqrt()
}

/// Choice of the reference "gradient" `g̃_t` in the isotropic prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GTildeChoice {
    #[default]
    Zero,
    PopulationGradient,
    Custom(Vec<f64>),
}

impl GTildeChoice {
    pub fn label(&self) -> String {
        match self {
            GTildeChoice::Zero => "zero".into(),
            GTildeChoice::PopulationGradient => "population-gradient".into(),
            GTildeChoice::Custom(_) => "custom".into(),
        }
    }
}

/// Per-step isotropic-prior term `d·log(h₁/d) - h₂` (twice the optimized
/// per-step KL).
pub fn isotropic_step_term(h1: f64, logdet_c: f64, d: usize) -> f64 {
    let d = d as f64;
    d * (h1 / d).ln() - logdet_c
}

/// The prior scale minimizing the isotropic per-step KL: `σ* = sqrt(h₁/d)`.
pub fn isotropic_optimal_sigma(h1: f64, d: usize) -> f64 {
    (h1 / d as f64).sqrt()
}

/// Per-step anisotropic-prior term `log det Σ^μ - log det(b C)`.
pub fn anisotropic_step_term(logdet_pop: f64, logdet_bc: f64) -> f64 {
    logdet_pop - logdet_bc
}

/// Twice the minimized KL of the isotropic terminal prior:
/// `d · log(2b/(η d) · E‖W - ŵ‖² + 1)`.
pub fn terminal_isotropic_term(dist_sq: f64, eta: f64, b: usize, d: usize) -> f64 {
    let d = d as f64;
    d * (2.0 * b as f64 / (eta * d) * dist_sq + 1.0).ln()
}

/// Optimal prior scale of the isotropic terminal prior:
/// `σ* = sqrt(E‖W - ŵ‖²/d + η/(2b))`.
pub fn terminal_isotropic_optimal_sigma(dist_sq: f64, eta: f64, b: usize, d: usize) -> f64 {
    (dist_sq / d as f64 + eta / (2.0 * b as f64)).sqrt()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0;
    let mut k = 0usize;
    for x in xs {
        s += x;
        k += 1;
    }
    if k == 0 {
        f64::NAN
    } else {
        s / k as f64
    }
}

fn sq_dist(a: &ParamVector, b: &ParamVector) -> f64 {
    (a - b).norm_squared()
}
