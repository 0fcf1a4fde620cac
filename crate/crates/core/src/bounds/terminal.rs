//! Terminal-state bounds built from the spread of final weights.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{flags, mean, signed_sqrt, sq_dist, terminal_isotropic_term, BoundConfig, BoundReport, ScaleKind};
use crate::dynamics::{TerminalEnsemble, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::gradstats;
use crate::linalg::{self, log_det, Floor, ParamVector, SpdMatrix, SymmetricMatrix, ZERO_SCALE_FLOOR};
use crate::problems::{self, Example, Problem};

/// Shared knobs of the terminal estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminalOptions {
    pub r: f64,
    pub m: f64,
    /// Relative eigenvalue floor, applied as `eps_rel · tr(pooled)/d` to
    /// every weight covariance.
    pub eps_rel: f64,
    /// Add tail checkpoints to the terminal weights.
    pub include_tail: bool,
}

impl Default for TerminalOptions {
    fn default() -> Self {
        TerminalOptions { r: 1.0, m: 1.0, eps_rel: linalg::DEFAULT_EPS_REL, include_tail: true }
    }
}

/// Terminal weights of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSample {
    pub w_final: ParamVector,
    pub w0: ParamVector,
    pub tail: Vec<ParamVector>,
}

/// Terminal weights grouped by dataset, plus the settings needed by the
/// closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSamples {
    pub groups: Vec<Vec<RunSample>>,
    pub n: usize,
    pub b: usize,
    /// Learning rate at the end of training.
    pub eta: f64,
    pub steps: usize,
    /// Diverged runs that were left out.
    pub diverged: usize,
}

impl EnsembleSamples {
    pub fn from_ensemble(ens: &TerminalEnsemble) -> Self {
        let mut diverged = 0;
        let groups = ens
            .groups()
            .into_iter()
            .map(|g| {
                g.into_iter()
                    .filter(|r| {
                        let ok = r.record.diverged.is_none();
                        diverged += usize::from(!ok);
                        ok
                    })
                    .map(|r| RunSample {
                        w_final: r.record.w_final.clone(),
                        w0: r.record.w0.clone(),
                        tail: r.record.tail.clone(),
                    })
                    .collect()
            })
            .collect();
        EnsembleSamples {
            groups,
            n: ens.datasets.first().map_or(0, |d| d.len()),
            b: ens.config.b,
            eta: ens.config.lr.terminal(ens.config.steps),
            steps: ens.config.steps,
            diverged,
        }
    }

    fn dim(&self) -> Result<usize> {
        self.groups
            .iter()
            .flatten()
            .map(|r| r.w_final.len())
            .next()
            .ok_or_else(|| Error::Config("ensemble has no usable runs".into()))
    }

    fn config(&self, opts: &TerminalOptions, scale: ScaleKind) -> BoundConfig {
        BoundConfig::new(self.n, self.b, self.eta, self.steps, scale).with_constants(opts.r, opts.m)
    }

    fn group_points(&self, g: &[RunSample], include_tail: bool) -> Vec<ParamVector> {
        let mut pts: Vec<ParamVector> = g.iter().map(|r| r.w_final.clone()).collect();
        if include_tail {
            pts.extend(g.iter().flat_map(|r| r.tail.iter().cloned()));
        }
        pts
    }
}

/// Weight-covariance estimates shared by the general and anisotropic forms.
struct Spread {
    d: usize,
    pooled: SymmetricMatrix,
    within: Vec<SymmetricMatrix>,
    min_points: usize,
    floor: f64,
}

fn spread(s: &EnsembleSamples, opts: &TerminalOptions, need_within: bool) -> Result<Spread> {
    let d = s.dim()?;
    let groups: Vec<Vec<ParamVector>> = s.groups.iter().map(|g| s.group_points(g, opts.include_tail)).collect();
    let groups: Vec<Vec<ParamVector>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    let min_points = groups.iter().map(Vec::len).min().unwrap_or(0);
    if need_within && min_points < 2 {
        return Err(Error::Config(format!(
            "each dataset needs at least 2 terminal samples (runs or tail checkpoints), got {min_points}"
        )));
    }
    let all: Vec<ParamVector> = groups.iter().flatten().cloned().collect();
    let (_, pooled) = linalg::covariance(&all)?;
    let floor = {
        let f = opts.eps_rel * pooled.trace() / d as f64;
        if f > 0.0 && f.is_finite() {
            f
        } else {
            ZERO_SCALE_FLOOR
        }
    };
    let within = if need_within {
        groups.iter().map(|g| linalg::covariance(g).map(|c| c.1)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(Spread { d, pooled, within, min_points, floor })
}

fn common_flags(rep: &mut BoundReport, s: &EnsembleSamples, sp: &Spread) {
    if s.groups.iter().filter(|g| !g.is_empty()).count() < 2 {
        rep.flag(flags::SINGLE_DATASET);
    }
    if sp.min_points < 4 * sp.d {
        rep.flag(flags::UNDERSAMPLED);
    }
    if s.diverged > 0 {
        rep.flag(flags::DIVERGED_RUNS);
        rep.components.insert("diverged_runs".into(), s.diverged as f64);
    }
}

/// General terminal bound `(R/sqrt(2n)) · sqrt(E_S[log det Λ_μ - log det Λ_S])`
/// with `Λ_S` the within-dataset weight covariance and `Λ_μ` the covariance of
/// all terminal weights around their grand mean.
pub fn terminal_bound_general(s: &EnsembleSamples, opts: &TerminalOptions) -> Result<BoundReport> {
    let sp = spread(s, opts, true)?;
    let n = s.n as f64;
    let eval = |floor: f64| -> Result<(f64, f64, usize, usize)> {
        let pooled = SpdMatrix::with_floor(&sp.pooled, floor)?;
        let ld_pooled = log_det(&pooled)?;
        let mut terms = Vec::with_capacity(sp.within.len());
        let mut max_floored = pooled.floored_count();
        let mut fully_floored = 0;
        for w in &sp.within {
            let spd = SpdMatrix::with_floor(w, floor)?;
            max_floored = max_floored.max(spd.floored_count());
            fully_floored += usize::from(spd.floored_count() == sp.d);
            terms.push(ld_pooled - log_det(&spd)?);
        }
        Ok((mean(terms), ld_pooled, max_floored, fully_floored))
    };
    let (term, ld_pooled, max_floored, fully_floored) = eval(sp.floor)?;
    let core = signed_sqrt(term / (2.0 * n));
    let cap = signed_sqrt((ld_pooled - sp.d as f64 * sp.floor.ln()) / (2.0 * n));
    let mut rep = BoundReport::new("terminal-general", core, s.config(opts, ScaleKind::R), s.groups.iter().map(Vec::len).sum())
        .component("mean_trace_log", term)
        .component("logdet_pooled", ld_pooled)
        .component("flooring_cap", cap)
        .component("floor", sp.floor)
        .component("min_samples_per_dataset", sp.min_points as f64)
        .component("min_effective_rank", (sp.d - max_floored) as f64);
    if term < 0.0 {
        rep.flag(flags::NEGATIVE_SUM);
    }
    if max_floored > 0 {
        rep.flag(flags::FLOOR_ACTIVE);
        let (t10, ..) = eval(10.0 * sp.floor)?;
        rep.components.insert("core_floor_x10".into(), signed_sqrt(t10 / (2.0 * n)));
    }
    if fully_floored > 0 && fully_floored == sp.within.len() {
        rep.flag(flags::DETERMINISTIC_FAILURE);
    }
    common_flags(&mut rep, s, &sp);
    Ok(rep)
}

/// Curvature and gradient noise at the terminal state of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCurvature {
    pub hessian: SymmetricMatrix,
    /// Mini-batch GNC `C_T`.
    pub gnc: SymmetricMatrix,
}

/// Evaluates `H` and `C_T` at the mean terminal weight of each dataset.
pub fn terminal_curvature(problem: &dyn Problem, ens: &TerminalEnsemble, s: &EnsembleSamples) -> Result<Vec<TerminalCurvature>> {
    s.groups
        .iter()
        .zip(&ens.datasets)
        .filter(|(g, _)| !g.is_empty())
        .map(|(g, ds)| {
            let pts: Vec<ParamVector> = g.iter().map(|r| r.w_final.clone()).collect();
            let (center, _) = linalg::covariance(&pts)?;
            let grads = gradstats::per_example_gradients(problem, &center, &ds.examples);
            let gnc = gradstats::minibatch_gnc(&gradstats::plug_in_covariance(&grads), ds.len(), s.b)?;
            Ok(TerminalCurvature { hessian: problems::hessian_matrix(problem, &center, &ds.examples), gnc })
        })
        .collect()
}

/// Anisotropic terminal bound: the general form with `Λ_S` replaced by the
/// small-step stationary covariance `(η/2) H⁻¹ C_T`.
///
/// Also reports the variant with `[H(2/η - H)]⁻¹ C_T` and the printed
/// `(R/sqrt(nη)) · sqrt(E tr log(H C_T⁻¹ Λ_μ))` form as components.
pub fn terminal_bound_anisotropic(
    s: &EnsembleSamples,
    curvature: &[TerminalCurvature],
    opts: &TerminalOptions,
) -> Result<BoundReport> {
    let sp = spread(s, opts, false)?;
    if curvature.is_empty() {
        return Err(Error::Config("no per-dataset curvature supplied".into()));
    }
    let d = sp.d as f64;
    let n = s.n as f64;
    let eta = s.eta;
    let pooled = SpdMatrix::with_floor(&sp.pooled, sp.floor)?;
    let ld_pooled = log_det(&pooled)?;

    let mut terms = Vec::new();
    let mut terms_commuting = Vec::new();
    let mut terms_literal = Vec::new();
    let mut commutators = Vec::new();
    let mut lambda_max = f64::NEG_INFINITY;
    let mut singular = false;
    let mut floor_hit = pooled.floored_count() > 0;
    for c in curvature {
        let eig = c.hessian.eigenvalues()?;
        let l1 = eig[0];
        lambda_max = lambda_max.max(l1);
        if l1 >= 2.0 / eta {
            return Err(Error::EdgeOfStability { eigenvalue: l1, limit: 2.0 / eta });
        }
        let h = SpdMatrix::regularize_with(&c.hessian, Floor::default())?;
        singular |= h.floored_count() > 0;
        let cg = SpdMatrix::regularize_with(&c.gnc, Floor::default())?;
        floor_hit |= cg.floored_count() > 0;
        let (ld_h, ld_c) = (log_det(&h)?, log_det(&cg)?);
        let ld_small_lr = d * (eta / 2.0).ln() - ld_h + ld_c;
        let ld_commuting = ld_c - ld_h - h.eigenvalues().iter().map(|&l| (2.0 / eta - l).ln()).sum::<f64>();
        terms.push(ld_pooled - ld_small_lr);
        terms_commuting.push(ld_pooled - ld_commuting);
        terms_literal.push(ld_h - ld_c + ld_pooled);
        let (hm, cm) = (c.hessian.as_matrix(), c.gnc.as_matrix());
        let scale = hm.norm() * cm.norm();
        commutators.push(if scale > 0.0 { (hm * cm - cm * hm).norm() / scale } else { 0.0 });
    }
    let term = mean(terms.iter().copied());
    let core = signed_sqrt(term / (2.0 * n));
    let gap = 2.0 / eta - lambda_max;
    let mut rep = BoundReport::new(
        "terminal-anisotropic",
        core,
        s.config(opts, ScaleKind::R),
        s.groups.iter().map(Vec::len).sum(),
    )
    .component("mean_trace_log", term)
    .component("logdet_pooled", ld_pooled)
    .component("core_commuting_form", signed_sqrt(mean(terms_commuting) / (2.0 * n)))
    .component("core_printed_form", signed_sqrt(mean(terms_literal) / (n * eta)))
    .component("lambda1_max", lambda_max)
    .component("gap", gap)
    .component("gap_half_eta", eta / 2.0 - lambda_max)
    .component("commutator_rel", mean(commutators));
    if term < 0.0 {
        rep.flag(flags::NEGATIVE_SUM);
    }
    if singular {
        rep.flag(flags::SINGULAR_HESSIAN);
    }
    if floor_hit {
        rep.flag(flags::FLOOR_ACTIVE);
    }
    common_flags(&mut rep, s, &sp);
    Ok(rep)
}

/// Reference point `ŵ` of the isotropic terminal prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// Mean of all terminal weights.
    #[default]
    GrandMean,
    /// Each run's own initial weights.
    Init,
    Custom(Vec<f64>),
}

/// Isotropic terminal bound
/// `sqrt((d R²/n) · log(2b/(η d) · E‖W_T - ŵ‖² + 1))`.
pub fn terminal_bound_isotropic(s: &EnsembleSamples, reference: &Reference, opts: &TerminalOptions) -> Result<BoundReport> {
    let d = s.dim()?;
    let runs: Vec<&RunSample> = s.groups.iter().flatten().collect();
    let dist = match reference {
        Reference::GrandMean => {
            let pts: Vec<ParamVector> = runs.iter().map(|r| r.w_final.clone()).collect();
            let (c, _) = linalg::covariance(&pts)?;
            mean(runs.iter().map(|r| sq_dist(&r.w_final, &c)))
        }
        Reference::Init => mean(runs.iter().map(|r| sq_dist(&r.w_final, &r.w0))),
        Reference::Custom(v) => {
            if v.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: v.len() });
            }
            let c = DVector::from_column_slice(v);
            mean(runs.iter().map(|r| sq_dist(&r.w_final, &c)))
        }
    };
    let inner = terminal_isotropic_term(dist, s.eta, s.b, d);
    let core = (inner / s.n as f64).sqrt();
    let name = match reference {
        Reference::Init => "terminal-isotropic-init",
        _ => "terminal-isotropic",
    };
    Ok(BoundReport::new(name, core, s.config(opts, ScaleKind::R), runs.len())
        .component("mean_sq_distance", dist)
        .component("optimal_sigma", super::terminal_isotropic_optimal_sigma(dist, s.eta, s.b, d)))
}

/// Gradient-accumulation terminal bound
/// `sqrt((d R²/n) · log(4bT/(η_T d) · Σ_t η_t² E[‖G_t‖² + tr C_t] + 1))`,
/// which is the printed form when the learning rate is constant.
pub fn terminal_bound_gradient_accum(records: &[&TrajectoryRecord], d: usize, opts: &TerminalOptions) -> Result<BoundReport> {
    let first = records.first().ok_or_else(|| Error::Config("no trajectories supplied".into()))?;
    let cfg = &first.config;
    let steps = cfg.steps;
    let rows: Vec<_> = first.rows.iter().filter(|r| r.step < steps).collect();
    match rows.first() {
        Some(r) if r.step == 0 => {}
        _ => return Err(Error::Config("trajectory rows must start at step 0".into())),
    }
    let grid: Vec<usize> = rows.iter().map(|r| r.step).collect();
    let mut total = 0.0;
    let mut approx = false;
    for (k, &step) in grid.iter().enumerate() {
        let weight = grid.get(k + 1).copied().unwrap_or(steps) - step;
        approx |= weight > 1;
        let mut acc = 0.0;
        let mut lr = 0.0;
        for rec in records {
            let row = rec
                .rows
                .get(k)
                .filter(|r| r.step == step)
                .ok_or_else(|| Error::Config("runs were logged on different step grids".into()))?;
            acc += row.grad_norm_sq + row.trace_c;
            lr = row.lr;
        }
        total += weight as f64 * lr * lr * acc / records.len() as f64;
    }
    let eta_t = cfg.lr.terminal(steps);
    let b = cfg.b as f64;
    let inner = 4.0 * b * steps as f64 / (eta_t * d as f64) * total + 1.0;
    let n = first.n;
    let core = (d as f64 / n as f64 * inner.ln()).sqrt();
    let config = BoundConfig::new(n, cfg.b, eta_t, steps, ScaleKind::R).with_constants(opts.r, opts.m);
    let mut rep = BoundReport::new("terminal-gradient-accum", core, config, records.len())
        .component("weighted_sum", total)
        .component("log_argument", inner);
    if approx {
        rep.flag(flags::APPROXIMATE);
    }
    Ok(rep)
}

/// Terminal weights of a full run and its leave-one-out partner.
#[derive(Debug, Clone, PartialEq)]
pub struct LooPair {
    pub dataset_index: usize,
    /// Identifies the dropped subset within the dataset.
    pub subset_id: usize,
    pub run_index: usize,
    pub w_full: ParamVector,
    pub w_loo: ParamVector,
}

/// Leave-one-out stability bound `E_{S,J} sqrt((M² b/(2η)) · E_W ‖W_S - W_{S_J}‖²)`.
pub fn terminal_bound_loo(pairs: &[LooPair], n: usize, b: usize, eta: f64, steps: usize, opts: &TerminalOptions) -> Result<BoundReport> {
    if pairs.is_empty() {
        return Err(Error::Config("no leave-one-out pairs supplied".into()));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<&LooPair>> = BTreeMap::new();
    for p in pairs {
        if p.w_full.len() != p.w_loo.len() {
            return Err(Error::Config("unpaired runs: full and leave-one-out weights differ in dimension".into()));
        }
        let g = groups.entry((p.dataset_index, p.subset_id)).or_default();
        if g.iter().any(|q| q.run_index == p.run_index) {
            return Err(Error::Config(format!(
                "unpaired runs: run {} appears twice for dataset {} subset {}",
                p.run_index, p.dataset_index, p.subset_id
            )));
        }
        g.push(p);
    }
    let k = b as f64 / (2.0 * eta);
    let mut roots = Vec::new();
    let mut frob = Vec::new();
    for g in groups.values() {
        let msd = mean(g.iter().map(|p| sq_dist(&p.w_full, &p.w_loo)));
        roots.push((k * msd).sqrt());
        if g.len() >= 2 {
            let full: Vec<ParamVector> = g.iter().map(|p| p.w_full.clone()).collect();
            let loo: Vec<ParamVector> = g.iter().map(|p| p.w_loo.clone()).collect();
            let (_, cf) = linalg::covariance(&full)?;
            let (_, cl) = linalg::covariance(&loo)?;
            frob.push((&cf - &cl).frobenius_norm());
        }
    }
    let core = mean(roots);
    let config = BoundConfig::new(n, b, eta, steps, ScaleKind::M).with_constants(opts.r, opts.m);
    let mut rep = BoundReport::new("terminal-loo", core, config, pairs.len()).component("pairs", groups.len() as f64);
    if !frob.is_empty() {
        rep.components.insert("covariance_mismatch_frobenius".into(), mean(frob));
    }
    Ok(rep)
}

/// Result of [`influence_estimate`].
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceEstimate {
    /// Estimated `w*_{S_J} - w*_S`.
    pub shift: ParamVector,
    /// `‖∇L_S(w*)‖`; large values mean `w*` is not near a minimum.
    pub grad_norm: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Influence-function estimate `(1/n) (H + δI)⁻¹ ∇l(w*, z_i)` of the
/// parameter shift caused by dropping example `i`, by conjugate gradients on
/// the HVP operator.
pub fn influence_estimate(
    problem: &dyn Problem,
    w_star: &ParamVector,
    examples: &[Example],
    i: usize,
    cg_tol: f64,
    damping: f64,
) -> Result<InfluenceEstimate> {
    let n = examples.len();
    if i >= n {
        return Err(Error::InvalidInput(format!("dropped index {i} out of range for n = {n}")));
    }
    let d = problem.dim();
    let rhs = problem.grad(w_star, &examples[i]);
    let grad_norm = gradstats::full_gradient(problem, w_star, examples).norm();
    let op = |v: &DVector<f64>| problem.hvp(w_star, examples, v) + v * damping;

    let b_norm = rhs.norm();
    let mut x = DVector::zeros(d);
    if b_norm == 0.0 {
        return Ok(InfluenceEstimate { shift: x, grad_norm, iterations: 0, residual: 0.0 });
    }
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let max_iter = 10 * d.max(10);
    for it in 1..=max_iter {
        let ap = op(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            return Err(Error::Numerical(format!(
                "conjugate gradients hit non-positive curvature {pap:e} at iteration {it}; increase damping"
            )));
        }
        let alpha = rs / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rs_new = r.norm_squared();
        if rs_new.sqrt() <= cg_tol * b_norm {
            return Ok(InfluenceEstimate { shift: x / n as f64, grad_norm, iterations: it, residual: rs_new.sqrt() });
        }
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
    }
    Err(Error::Numerical(format!(
        "conjugate gradients did not converge in {max_iter} iterations (residual {:e})",
        rs.sqrt()
    )))
}

/// `tr(H⁻¹ F)` with `H` regularized; the flag reports whether the floor
/// was active.
pub fn takeuchi_trace(h: &SymmetricMatrix, f: &SymmetricMatrix, floor: Floor) -> Result<(f64, bool)> {
    let hs = SpdMatrix::regularize_with(h, floor)?;
    let t = (hs.inverse().as_matrix() * f.as_matrix()).trace();
    Ok((t, hs.floored_count() > 0))
}

/// Uncentered second moment `(1/N) Σ ∇l ∇lᵀ` over a sample.
pub fn fisher_estimate(problem: &dyn Problem, w: &ParamVector, sample: &[Example]) -> SymmetricMatrix {
    let g = gradstats::per_example_gradients(problem, w, sample);
    SymmetricMatrix::new(&g * g.transpose() / sample.len().max(1) as f64).expect("square by construction")
}

/// Takeuchi-quantity bound `(M/(2n)) · E_S sqrt(E_W tr(H⁻¹ F^μ))`.
pub fn fim_takeuchi_bound(
    problem: &dyn Problem,
    ens: &TerminalEnsemble,
    oracle: &[Example],
    opts: &TerminalOptions,
) -> Result<BoundReport> {
    if oracle.is_empty() {
        return Err(Error::Config("the Takeuchi bound needs an oracle sample".into()));
    }
    let s = EnsembleSamples::from_ensemble(ens);
    let mut roots = Vec::new();
    let mut traces = Vec::new();
    let mut singular = false;
    for (g, ds) in s.groups.iter().zip(&ens.datasets) {
        if g.is_empty() {
            continue;
        }
        let mut tr = Vec::with_capacity(g.len());
        for r in g {
            let h = problems::hessian_matrix(problem, &r.w_final, &ds.examples);
            let f = fisher_estimate(problem, &r.w_final, oracle);
            let (t, hit) = takeuchi_trace(&h, &f, Floor::default())?;
            singular |= hit;
            tr.push(t);
        }
        let m = mean(tr);
        traces.push(m);
        roots.push(signed_sqrt(m));
    }
    let core = mean(roots) / (2.0 * s.n as f64);
    let mut rep = BoundReport::new("fim-takeuchi", core, s.config(opts, ScaleKind::M), s.groups.iter().map(Vec::len).sum())
        .component("mean_takeuchi_trace", mean(traces));
    if singular {
        rep.flag(flags::SINGULAR_HESSIAN);
    }
    Ok(rep)
}
