//! Trajectory-based bounds: per-step KL surrogates folded over training.

use nalgebra::DVector;
use rayon::prelude::*;

use super::{
    anisotropic_step_term, flags, isotropic_step_term, mean, signed_sqrt, BoundConfig, BoundReport, GTildeChoice,
    ScaleKind,
};
use crate::dynamics::{Mode, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::gradstats::{self, GradSnapshot};
use crate::linalg::{log_det, Floor, ParamVector, SpdMatrix, SymmetricMatrix};
use crate::problems::{Example, Problem};
use crate::rng;

/// Logged gradient statistics of one or more runs sharing a step grid.
#[derive(Debug, Clone)]
pub struct TrajectoryInputs<'a> {
    /// One snapshot series per run, ascending in step, starting at step 0.
    pub runs: Vec<&'a [GradSnapshot]>,
    pub n: usize,
    pub b: usize,
    /// Number of updates `T`; snapshots at steps `< T` are accumulated.
    pub steps: usize,
    pub eta: f64,
    pub mode: Option<Mode>,
    pub r: f64,
    pub m: f64,
    pub floor: Floor,
}

impl<'a> TrajectoryInputs<'a> {
    pub fn from_records(records: impl IntoIterator<Item = &'a TrajectoryRecord>) -> Result<Self> {
        let records: Vec<&TrajectoryRecord> = records.into_iter().collect();
        let first = records.first().ok_or_else(|| Error::Config("no trajectories supplied".into()))?;
        let cfg = &first.config;
        Ok(TrajectoryInputs {
            runs: records.iter().map(|r| r.snapshots.as_slice()).collect(),
            n: first.n,
            b: cfg.b,
            steps: cfg.steps,
            eta: cfg.lr.at(0),
            mode: Some(cfg.mode),
            r: 1.0,
            m: 1.0,
            floor: cfg.floor,
        })
    }

    pub fn with_constants(mut self, r: f64, m: f64) -> Self {
        self.r = r;
        self.m = m;
        self
    }

    fn config(&self, g: Option<&GTildeChoice>, scale: ScaleKind) -> BoundConfig {
        let mut c = BoundConfig::new(self.n, self.b, self.eta, self.steps, scale).with_constants(self.r, self.m);
        c.g_tilde = g.map(GTildeChoice::label);
        c
    }

    /// Indices of accumulated snapshots and the number of updates each one
    /// stands for.
    fn grid(&self) -> Result<Vec<(usize, usize)>> {
        let first = self.runs.first().ok_or_else(|| Error::Config("no trajectories supplied".into()))?;
        let steps: Vec<usize> = first.iter().map(|s| s.step).filter(|&s| s < self.steps).collect();
        if steps.is_empty() {
            return Err(Error::Config("trajectory has no gradient snapshots; enable snapshot tracking".into()));
        }
        if steps[0] != 0 {
            return Err(Error::Config(format!("snapshots must start at step 0, first is {}", steps[0])));
        }
        for r in &self.runs[1..] {
            let other: Vec<usize> = r.iter().map(|s| s.step).filter(|&s| s < self.steps).collect();
            if other != steps {
                return Err(Error::Config("runs were logged on different step grids".into()));
            }
        }
        Ok(steps
            .iter()
            .enumerate()
            .map(|(i, &s)| (i, steps.get(i + 1).copied().unwrap_or(self.steps) - s))
            .collect())
    }

    fn d(&self) -> usize {
        self.runs[0][0].dim()
    }
}

/// Folds weighted per-step terms into `core = signed_sqrt(coef · Σ w_i t_i)`
/// with the running series.
struct Folded {
    core: f64,
    running: Vec<f64>,
    negative: bool,
}

fn fold(terms: &[f64], grid: &[(usize, usize)], coef: f64) -> Folded {
    let mut acc = 0.0;
    let mut running = Vec::with_capacity(terms.len());
    for (t, &(_, w)) in terms.iter().zip(grid) {
        acc += w as f64 * t;
        running.push(signed_sqrt(coef * acc));
    }
    Folded { core: signed_sqrt(coef * acc), running, negative: acc < 0.0 }
}

fn finish(
    name: &str,
    inputs: &TrajectoryInputs,
    grid: &[(usize, usize)],
    terms: Vec<f64>,
    coef: f64,
    config: BoundConfig,
) -> BoundReport {
    let f = fold(&terms, grid, coef);
    let mut rep = BoundReport::new(name, f.core, config, inputs.runs.len());
    if f.negative {
        rep.flag(flags::NEGATIVE_SUM);
    }
    if grid.iter().any(|&(_, w)| w > 1) {
        rep.flag(flags::APPROXIMATE);
    }
    rep.series.insert("running_core".into(), f.running);
    rep.series.insert("step".into(), grid.iter().map(|&(i, _)| inputs.runs[0][i].step as f64).collect());
    rep.per_step_terms = Some(terms);
    rep
}

fn g_tilde_for(choice: &GTildeChoice, snap: &GradSnapshot) -> Result<ParamVector> {
    match choice {
        GTildeChoice::Zero => Ok(DVector::zeros(snap.dim())),
        GTildeChoice::PopulationGradient => snap
            .pop_grad
            .clone()
            .ok_or_else(|| Error::Config("population-gradient reference needs an oracle sample".into())),
        GTildeChoice::Custom(v) => {
            if v.len() != snap.dim() {
                return Err(Error::DimensionMismatch { expected: snap.dim(), got: v.len() });
            }
            Ok(DVector::from_column_slice(v))
        }
    }
}

/// `log det` of the regularized matrix, or the sum of floored log-diagonal
/// entries when only the diagonal is available. Returns the value and
/// whether the floor was active.
fn logdet_or_diag(m: Option<&SymmetricMatrix>, diag: &[f64], floor: Floor) -> Result<(f64, bool)> {
    match m {
        Some(m) => {
            let s = SpdMatrix::regularize_with(m, floor)?;
            Ok((log_det(&s)?, s.floored_count() > 0))
        }
        None => {
            let dm = SymmetricMatrix::from_diagonal(diag);
            let f = floor.value_for(&dm);
            let mut hit = false;
            let v = diag
                .iter()
                .map(|&x| {
                    if x < f {
                        hit = true;
                        f.ln()
                    } else {
                        x.ln()
                    }
                })
                .sum();
            Ok((v, hit))
        }
    }
}

fn minibatch_diag(s: &GradSnapshot) -> Result<Vec<f64>> {
    let k = gradstats::minibatch_factor(s.n, s.b)?;
    Ok(s.diag_sigma.iter().map(|x| k * x).collect())
}

/// Isotropic-prior trajectory bound
/// `sqrt((R²/n) Σ_t [d·log(h₁/d) - h₂])`.
pub fn traj_bound_isotropic(inputs: &TrajectoryInputs, g: &GTildeChoice) -> Result<BoundReport> {
    let grid = inputs.grid()?;
    let d = inputs.d();
    let runs = inputs.runs.len() as f64;
    let mut floor_hit = false;
    let mut diag_fallback = false;
    let mut terms = Vec::with_capacity(grid.len());
    let mut terms_x10 = Vec::with_capacity(grid.len());
    let mut h1s = Vec::with_capacity(grid.len());
    let mut h2s = Vec::with_capacity(grid.len());
    let mut identity_h1 = Vec::new();
    let mut identity_terms = Vec::new();
    for &(i, _) in &grid {
        let (mut h1, mut h2, mut h2_x10) = (0.0, 0.0, 0.0);
        let mut pop_trace = 0.0;
        let mut have_pop = true;
        for run in &inputs.runs {
            let s = &run[i];
            let gt = g_tilde_for(g, s)?;
            h1 += (&s.full_grad - gt).norm_squared() + s.trace_c;
            let diag = if s.minibatch_gnc.is_none() {
                diag_fallback = true;
                minibatch_diag(s)?
            } else {
                Vec::new()
            };
            let (v, hit) = logdet_or_diag(s.minibatch_gnc.as_ref(), &diag, inputs.floor)?;
            floor_hit |= hit;
            h2 += v;
            h2_x10 += logdet_or_diag(s.minibatch_gnc.as_ref(), &diag, inputs.floor.scaled(10.0))?.0;
            match s.trace_pop {
                Some(t) => pop_trace += t,
                None => have_pop = false,
            }
        }
        let (h1, h2, h2_x10) = (h1 / runs, h2 / runs, h2_x10 / runs);
        if !(h1 > 0.0) {
            return Err(Error::Numerical(format!("isotropic h1 = {h1} is not positive at snapshot {i}")));
        }
        terms.push(isotropic_step_term(h1, h2, d));
        terms_x10.push(isotropic_step_term(h1, h2_x10, d));
        h1s.push(h1);
        h2s.push(h2);
        if *g == GTildeChoice::PopulationGradient && have_pop {
            let ih1 = pop_trace / runs / inputs.b as f64;
            identity_h1.push(ih1);
            identity_terms.push(isotropic_step_term(ih1, h2, d));
        }
    }
    let coef = 1.0 / inputs.n as f64;
    let mut rep = finish("traj-isotropic", inputs, &grid, terms, coef, inputs.config(Some(g), ScaleKind::R));
    rep.components.insert("h1_sum".into(), h1s.iter().sum());
    rep.components.insert("h2_sum".into(), h2s.iter().sum());
    rep.series.insert("h1".into(), h1s.clone());
    rep.series.insert("h2".into(), h2s);
    if identity_terms.len() == grid.len() {
        let f = fold(&identity_terms, &grid, coef);
        rep.components.insert("core_identity_h1".into(), f.core);
        let disc = mean(identity_h1.iter().zip(&h1s).map(|(a, b)| ((a - b) / b).abs()));
        rep.components.insert("identity_h1_rel_discrepancy".into(), disc);
        rep.series.insert("h1_identity".into(), identity_h1);
        rep.series.insert("running_core_identity_h1".into(), f.running);
    }
    if floor_hit {
        rep.flag(flags::FLOOR_ACTIVE);
        rep.components.insert("core_floor_x10".into(), fold(&terms_x10, &grid, coef).core);
    }
    if diag_fallback {
        rep.flag(flags::DIAGONAL_FALLBACK);
    }
    Ok(rep)
}

/// Langevin trajectory bound `sqrt((R² d/n) Σ_t log(‖G_t - g̃_t‖²/d + 1))`.
pub fn traj_bound_langevin(inputs: &TrajectoryInputs, g: &GTildeChoice) -> Result<BoundReport> {
    let grid = inputs.grid()?;
    let d = inputs.d() as f64;
    let mut terms = Vec::with_capacity(grid.len());
    let mut looser = Vec::with_capacity(grid.len());
    for &(i, _) in &grid {
        let mut dist = 0.0;
        for run in &inputs.runs {
            let s = &run[i];
            dist += (&s.full_grad - g_tilde_for(g, s)?).norm_squared();
        }
        let x = dist / inputs.runs.len() as f64 / d;
        terms.push(x.ln_1p());
        looser.push(x);
    }
    let coef = d / inputs.n as f64;
    let mut rep = finish("traj-langevin", inputs, &grid, terms, coef, inputs.config(Some(g), ScaleKind::R));
    rep.components.insert("core_linearized".into(), fold(&looser, &grid, coef).core);
    if inputs.mode != Some(Mode::Gld) {
        rep.flag(flags::COUNTERFACTUAL);
    }
    Ok(rep)
}

/// Anisotropic-prior trajectory bound
/// `sqrt((R²/n) Σ_t [log det Σ_t^μ - log det(b C_t)])`, with `b C_t` taken
/// as the single-draw GNC `Σ_t`.
pub fn traj_bound_anisotropic(inputs: &TrajectoryInputs) -> Result<BoundReport> {
    let grid = inputs.grid()?;
    let runs = inputs.runs.len() as f64;
    let mut floor_hit = false;
    let mut diag_fallback = false;
    let mut terms = Vec::with_capacity(grid.len());
    let mut terms_x10 = Vec::with_capacity(grid.len());
    let mut alignment = Vec::with_capacity(grid.len());
    for &(i, _) in &grid {
        let (mut t, mut t10, mut al) = (0.0, 0.0, 0.0);
        for run in &inputs.runs {
            let s = &run[i];
            let diag_pop = s
                .diag_pop
                .as_ref()
                .ok_or_else(|| Error::Config("anisotropic bound needs population GNC estimates (oracle sample)".into()))?;
            let dense = s.pop_gnc.is_some() && s.single_draw_gnc.is_some();
            if !dense {
                diag_fallback = true;
            }
            let (pop_m, sig_m) = if dense { (s.pop_gnc.as_ref(), s.single_draw_gnc.as_ref()) } else { (None, None) };
            let (lp, h1) = logdet_or_diag(pop_m, diag_pop, inputs.floor)?;
            let (ls, h2) = logdet_or_diag(sig_m, &s.diag_sigma, inputs.floor)?;
            floor_hit |= h1 || h2;
            t += anisotropic_step_term(lp, ls);
            let f10 = inputs.floor.scaled(10.0);
            t10 += anisotropic_step_term(logdet_or_diag(pop_m, diag_pop, f10)?.0, logdet_or_diag(sig_m, &s.diag_sigma, f10)?.0);
            let (da, _) = logdet_or_diag(None, diag_pop, inputs.floor)?;
            let (db, _) = logdet_or_diag(None, &s.diag_sigma, inputs.floor)?;
            al += da - db;
        }
        terms.push(t / runs);
        terms_x10.push(t10 / runs);
        alignment.push(al / runs);
    }
    let coef = 1.0 / inputs.n as f64;
    let mut rep = finish("traj-anisotropic", inputs, &grid, terms, coef, inputs.config(None, ScaleKind::R));
    let weighted: f64 = alignment.iter().zip(&grid).map(|(a, &(_, w))| a * w as f64).sum();
    rep.components.insert("diagonal_alignment_sum".into(), weighted);
    rep.series.insert("diagonal_alignment".into(), alignment);
    if floor_hit {
        rep.flag(flags::FLOOR_ACTIVE);
        rep.components.insert("core_floor_x10".into(), fold(&terms_x10, &grid, coef).core);
    }
    if diag_fallback {
        rep.flag(flags::DIAGONAL_FALLBACK);
    }
    Ok(rep)
}

/// Recorded weights of one run on one dataset.
#[derive(Debug, Clone, Copy)]
pub struct DataDependentRun<'a> {
    pub dataset_index: usize,
    pub examples: &'a [Example],
    /// `(step, weights)` ascending, starting at step 0.
    pub weights: &'a [(usize, ParamVector)],
}

/// Number of leave-one-out subsets sampled per step above the enumeration
/// threshold.
pub const LOO_SAMPLES: usize = 64;
/// Largest `n` for which all leave-one-out subsets are enumerated.
pub const LOO_ENUMERATE_MAX: usize = 12;

/// Per-step term `(b-1)d/(n-1)² + E_J[log det C_t - log det C_{J,t}]`,
/// with `C = Σ/b` on both the full set and the subsets.
pub fn data_dependent_step_term(
    problem: &dyn Problem,
    w: &ParamVector,
    examples: &[Example],
    b: usize,
    floor: Floor,
    drops: &[usize],
) -> Result<(f64, bool)> {
    let n = examples.len();
    let d = problem.dim();
    let grads = gradstats::per_example_gradients(problem, w, examples);
    let c = gradstats::plug_in_covariance(&grads).scale(1.0 / b as f64);
    let c_spd = SpdMatrix::regularize_with(&c, floor)?;
    let mut hit = c_spd.floored_count() > 0;
    let ld = log_det(&c_spd)?;
    let mut acc = 0.0;
    for &k in drops {
        let subset: Vec<usize> = (0..n).filter(|&i| i != k).collect();
        let q = gradstats::loo_from_gradients(&grads, &subset, b);
        let cj = SpdMatrix::regularize_with(&q.loo_gnc, floor)?;
        hit |= cj.floored_count() > 0;
        acc += ld - log_det(&cj)?;
    }
    let nm1 = (n - 1) as f64;
    Ok(((b as f64 - 1.0) * d as f64 / (nm1 * nm1) + acc / drops.len() as f64, hit))
}

/// Data-dependent (leave-one-out prior) trajectory bound
/// `E_S sqrt(M² Σ_t E_W[term_t])`.
pub fn traj_bound_data_dependent(
    problem: &dyn Problem,
    runs: &[DataDependentRun],
    b: usize,
    steps: usize,
    eta: f64,
    m: f64,
    floor: Floor,
    seed: u64,
) -> Result<BoundReport> {
    let first = runs.first().ok_or_else(|| Error::Config("no runs supplied".into()))?;
    let n = first.examples.len();
    if n < 2 || n - 1 <= b {
        return Err(Error::Config(format!("leave-one-out subset size {} must exceed batch size {b}", n.saturating_sub(1))));
    }
    let per_run: Vec<(usize, f64, bool, bool)> = runs
        .par_iter()
        .map(|run| {
            if run.examples.len() != n {
                return Err(Error::Config("runs use datasets of different sizes".into()));
            }
            let used: Vec<&(usize, ParamVector)> = run.weights.iter().filter(|(s, _)| *s < steps).collect();
            match used.first() {
                Some((0, _)) => {}
                _ => return Err(Error::Config("recorded weights must start at step 0".into())),
            }
            let mut sum = 0.0;
            let mut hit = false;
            let mut approx = false;
            for (k, (s, w)) in used.iter().enumerate() {
                let next = used.get(k + 1).map_or(steps, |(t, _)| *t);
                let weight = next - s;
                approx |= weight > 1;
                let drops: Vec<usize> = if n <= LOO_ENUMERATE_MAX {
                    (0..n).collect()
                } else {
                    gradstats::sample_loo_drops(rng::derive_seed(seed, *s as u64), n, LOO_SAMPLES)
                };
                let (t, h) = data_dependent_step_term(problem, w, run.examples, b, floor, &drops)?;
                hit |= h;
                sum += weight as f64 * t;
            }
            Ok((run.dataset_index, sum, hit, approx))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_dataset: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for (ds, s, _, _) in &per_run {
        by_dataset.entry(*ds).or_default().push(*s);
    }
    let sums: Vec<f64> = by_dataset.values().map(|v| mean(v.iter().copied())).collect();
    let core = mean(sums.iter().map(|&s| signed_sqrt(s)));
    let mut config = BoundConfig::new(n, b, eta, steps, ScaleKind::M).with_constants(1.0, m);
    config.g_tilde = None;
    let mut rep = BoundReport::new("traj-data-dependent", core, config, runs.len());
    rep.components.insert("mean_step_sum".into(), mean(sums.iter().copied()));
    rep.components.insert("subsets_per_step".into(), if n <= LOO_ENUMERATE_MAX { n } else { LOO_SAMPLES.min(n) } as f64);
    if sums.iter().any(|&s| s < 0.0) {
        rep.flag(flags::NEGATIVE_SUM);
    }
    if per_run.iter().any(|r| r.2) {
        rep.flag(flags::FLOOR_ACTIVE);
    }
    if per_run.iter().any(|r| r.3) {
        rep.flag(flags::APPROXIMATE);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_kl, GaussianDist};
    use crate::problems::{generate_dataset, DataSpec};

    fn snap(step: usize, g: Vec<f64>, sigma: SymmetricMatrix, pop: Option<SymmetricMatrix>, n: usize, b: usize) -> GradSnapshot {
        let factor = gradstats::minibatch_factor(n, b).unwrap();
        let c = sigma.scale(factor);
        GradSnapshot {
            step,
            grad_norm_sq: g.iter().map(|x| x * x).sum(),
            full_grad: DVector::from_vec(g),
            trace_sigma: sigma.trace(),
            trace_c: c.trace(),
            diag_sigma: sigma.diagonal(),
            trace_pop: pop.as_ref().map(|p| p.trace()),
            diag_pop: pop.as_ref().map(|p| p.diagonal()),
            pop_grad: None,
            single_draw_gnc: Some(sigma),
            minibatch_gnc: Some(c),
            pop_gnc: pop,
            n,
            b,
        }
    }

    fn inputs<'a>(runs: Vec<&'a [GradSnapshot]>, n: usize, b: usize, steps: usize) -> TrajectoryInputs<'a> {
        TrajectoryInputs { runs, n, b, steps, eta: 0.1, mode: None, r: 1.0, m: 1.0, floor: Floor::default() }
    }

    // With n huge and b = 1 the mini-batch factor is 1, so C = Σ.
    const BIG_N: usize = 1_000_000_000;

    #[test]
    fn isotropic_examples() {
        // matched prior: C = I, g̃ = G
        let s = [snap(0, vec![0.3, -0.2], SymmetricMatrix::identity(2), None, BIG_N, 1)];
        let rep = traj_bound_isotropic(&inputs(vec![&s], BIG_N, 1, 1), &GTildeChoice::Custom(vec![0.3, -0.2])).unwrap();
        assert!(rep.per_step_terms.as_ref().unwrap()[0].abs() < 1e-12);
        // d = 1, h1 = 2, C = 1
        let n = 40;
        let s = [snap(0, vec![1.0], SymmetricMatrix::identity(1), None, BIG_N, 1)];
        let mut inp = inputs(vec![&s], BIG_N, 1, 1);
        inp.n = n;
        let rep = traj_bound_isotropic(&inp, &GTildeChoice::Zero).unwrap();
        assert!((rep.core - (2f64.ln() / n as f64).sqrt()).abs() < 1e-12);
        assert_eq!(rep.value, rep.core);
    }

    #[test]
    fn langevin_examples() {
        let e1 = (std::f64::consts::E - 1.0).sqrt();
        let s = [snap(0, vec![e1], SymmetricMatrix::identity(1), None, BIG_N, 1)];
        let mut inp = inputs(vec![&s], BIG_N, 1, 1);
        inp.n = 25;
        let rep = traj_bound_langevin(&inp, &GTildeChoice::Zero).unwrap();
        assert!((rep.core - 0.2).abs() < 1e-12);
        assert!(rep.has_flag(flags::COUNTERFACTUAL));
        assert!(rep.core <= rep.components["core_linearized"]);
        let rep = traj_bound_langevin(&inp, &GTildeChoice::Custom(vec![e1])).unwrap();
        assert_eq!(rep.core, 0.0);
    }

    #[test]
    fn anisotropic_examples() {
        let s = [snap(0, vec![0.0, 0.0], SymmetricMatrix::identity(2), Some(SymmetricMatrix::from_diagonal(&[1.0, 4.0])), BIG_N, 1)];
        let rep = traj_bound_anisotropic(&inputs(vec![&s], BIG_N, 1, 1)).unwrap();
        assert!((rep.per_step_terms.as_ref().unwrap()[0] - 4f64.ln()).abs() < 1e-12);
        assert!((rep.components["diagonal_alignment_sum"] - 4f64.ln()).abs() < 1e-12);
        let m = SymmetricMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let s = [snap(0, vec![0.0, 0.0], m.clone(), Some(m), 100, 3)];
        let rep = traj_bound_anisotropic(&inputs(vec![&s], 100, 3, 1)).unwrap();
        assert!(rep.core.abs() < 1e-7);
    }

    #[test]
    fn stride_scales_and_flags() {
        let s: Vec<GradSnapshot> =
            (0..3).map(|k| snap(k * 10, vec![1.0], SymmetricMatrix::identity(1), None, BIG_N, 1)).collect();
        let rep = traj_bound_isotropic(&inputs(vec![&s], BIG_N, 1, 25), &GTildeChoice::Zero).unwrap();
        assert!(rep.has_flag(flags::APPROXIMATE));
        let expected = (25.0 * 2f64.ln() / BIG_N as f64).sqrt();
        assert!((rep.core - expected).abs() < 1e-15);
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = [snap(0, vec![1.0], SymmetricMatrix::identity(1), None, BIG_N, 1)];
        let b = [snap(1, vec![1.0], SymmetricMatrix::identity(1), None, BIG_N, 1)];
        assert!(matches!(traj_bound_isotropic(&inputs(vec![&a, &b], BIG_N, 1, 2), &GTildeChoice::Zero), Err(Error::Config(_))));
        assert!(matches!(
            traj_bound_isotropic(&inputs(vec![&a], BIG_N, 1, 1), &GTildeChoice::PopulationGradient),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn data_dependent_matches_kl_sum() {
        // n = 4, b = 1, d = 2, one step: the term equals 2 · mean_J KL(P_J ‖ Q).
        let a = SymmetricMatrix::from_rows(&[vec![1.0, 0.3], vec![0.3, 2.0]]).unwrap();
        let spec = DataSpec::quadratic(&a, &[0.5, -1.0], &SymmetricMatrix::identity(2));
        let p = spec.build().unwrap();
        let ds = generate_dataset(&spec, 11, 4).unwrap();
        let w = DVector::from_vec(vec![0.2, 0.1]);
        let (term, _) =
            data_dependent_step_term(p.as_ref(), &w, &ds.examples, 1, Floor::default(), &[0, 1, 2, 3]).unwrap();

        let grads = gradstats::per_example_gradients(p.as_ref(), &w, &ds.examples);
        let full = GaussianDist::new(
            gradstats::column_mean(&grads),
            SpdMatrix::strict(&gradstats::plug_in_covariance(&grads)).unwrap(),
        )
        .unwrap();
        let mut kl = 0.0;
        for k in 0..4 {
            let sub: Vec<usize> = (0..4).filter(|&i| i != k).collect();
            let g = grads.select_columns(&sub);
            let pj = GaussianDist::new(
                gradstats::column_mean(&g),
                SpdMatrix::strict(&gradstats::plug_in_covariance(&g)).unwrap(),
            )
            .unwrap();
            kl += gaussian_kl(&pj, &full).unwrap();
        }
        assert!((term - 2.0 * kl / 4.0).abs() < 1e-10, "{term} vs {}", 2.0 * kl / 4.0);

        let weights = vec![(0usize, w.clone())];
        let runs = [DataDependentRun { dataset_index: 0, examples: &ds.examples, weights: &weights }];
        let rep = traj_bound_data_dependent(p.as_ref(), &runs, 1, 1, 0.1, 2.0, Floor::default(), 0).unwrap();
        assert!((rep.core - signed_sqrt(term)).abs() < 1e-12);
        assert_eq!(rep.value, 2.0 * rep.core);
    }

    #[test]
    fn data_dependent_degenerate_gradients() {
        let spec = DataSpec::quadratic(&SymmetricMatrix::identity(2), &[0.0, 0.0], &SymmetricMatrix::zeros(2));
        let p = spec.build().unwrap();
        let ds = generate_dataset(&spec, 0, 5).unwrap();
        let w = DVector::from_vec(vec![1.0, -1.0]);
        let drops: Vec<usize> = (0..5).collect();
        let (t1, _) = data_dependent_step_term(p.as_ref(), &w, &ds.examples, 1, Floor::default(), &drops).unwrap();
        assert_eq!(t1, 0.0);
        let (t2, hit) = data_dependent_step_term(p.as_ref(), &w, &ds.examples, 2, Floor::default(), &drops).unwrap();
        assert!(hit);
        assert!((t2 - 2.0 / 16.0).abs() < 1e-15);
        let weights = vec![(0usize, w)];
        let runs = [DataDependentRun { dataset_index: 0, examples: &ds.examples, weights: &weights }];
        assert!(matches!(
            traj_bound_data_dependent(p.as_ref(), &runs, 4, 1, 0.1, 1.0, Floor::default(), 0),
            Err(Error::Config(_))
        ));
    }
}
