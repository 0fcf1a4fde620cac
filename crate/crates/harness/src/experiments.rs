//! Subcommand implementations. Each experiment has a library function that
//! returns its results and a `cmd_*` wrapper that writes them to disk.
//!
//! Seeds: dataset `k` uses `seed_family(seed, DATASET_SEED)[k]` and run `k`
//! uses `seed_family(seed, RUN_SEED)[k]`; the oracle sample uses `seed` on its
//! own stream. `train` is therefore run (0, 0) of any ensemble with the same
//! config.

use std::path::Path;

use gradnoise_core::bounds::{
    self, BoundReport, DataDependentRun, EnsembleSamples, LooPair, Reference, TrajectoryInputs,
};
use gradnoise_core::dynamics::{self, EnsemblePlan, Mode, TerminalEnsemble, TrainConfig, TrajectoryRecord};
use gradnoise_core::gradstats;
use gradnoise_core::linalg::{self, StationaryMode, SymmetricMatrix};
use gradnoise_core::problems::{self, Dataset, Example, Family, Problem};
use gradnoise_core::rng::stream;
use gradnoise_core::{spectral, ParamVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BoundKind, ExperimentConfig};
use crate::output::{fmt_f64, fmt_opt, write_csv, write_json};
use crate::stats::spearman;
use crate::HarnessError;

type Result<T> = std::result::Result<T, HarnessError>;

pub const TRAJECTORY_HEADER: [&str; 8] =
    ["step", "train_loss", "test_loss", "grad_norm_sq", "trace_c", "dist_init", "lambda1", "gap"];
pub const COMPARE_HEADER: [&str; 5] = ["step", "train_loss", "test_loss", "train_acc", "test_acc"];
pub const BOUNDS_HEADER: [&str; 9] = ["name", "value", "core", "n", "b", "eta", "steps", "n_runs_used", "flags"];
pub const BOUNDS_STEPS_HEADER: [&str; 4] = ["bound", "step", "term", "running_core"];
pub const SWEEP_HEADER: [&str; 7] = ["n", "bound", "core", "value", "gen_error", "gen_error_raw", "seeds_used"];

/// The problem and its oracle sample, built once per invocation.
pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub problem: Box<dyn Problem>,
    pub oracle: Dataset,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        let problem = cfg.problem.build()?;
        let oracle = problems::population_oracle_sample(&cfg.problem, cfg.seed)?;
        Ok(Context { cfg, problem, oracle })
    }

    pub fn dataset(&self, k: usize, n: usize) -> Result<Dataset> {
        let seed = dynamics::seed_family(self.cfg.seed, stream::DATASET_SEED, k + 1)[k];
        Ok(problems::generate_dataset(&self.cfg.problem, seed, n)?)
    }

    pub fn run_seed(&self, k: usize) -> u64 {
        dynamics::seed_family(self.cfg.seed, stream::RUN_SEED, k + 1)[k]
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

// ---------------------------------------------------------------- train

pub fn train(ctx: &Context) -> Result<TrajectoryRecord> {
    let ds = ctx.dataset(0, ctx.cfg.n)?;
    let mut tc = ctx.cfg.train.clone();
    tc.seed = ctx.run_seed(0);
    Ok(dynamics::train_run(ctx.problem.as_ref(), &ds, Some(&ctx.oracle), &tc)?)
}

pub fn trajectory_rows(rec: &TrajectoryRecord) -> Vec<Vec<String>> {
    rec.rows
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                fmt_f64(r.train_loss),
                fmt_opt(r.test_loss),
                fmt_f64(r.grad_norm_sq),
                fmt_f64(r.trace_c),
                fmt_f64(r.dist_init),
                fmt_opt(r.lambda1),
                fmt_opt(r.gap),
            ]
        })
        .collect()
}

#[derive(Serialize)]
struct WeightRow<'a> {
    step: usize,
    w: &'a [f64],
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    n: usize,
    d: usize,
    steps: usize,
    final_row: Option<&'a dynamics::LogRow>,
    diverged_at: Option<usize>,
    max_example_loss: f64,
    loss_bound_m: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let ctx = Context::new(cfg)?;
    let rec = train(&ctx)?;
    ensure_out(&cfg.out)?;
    write_csv(&cfg.out.join("trajectory.csv"), &TRAJECTORY_HEADER, &trajectory_rows(&rec))?;
    if cfg.train.record_weights {
        let w: Vec<WeightRow> = rec.weights.iter().map(|(s, w)| WeightRow { step: *s, w: w.as_slice() }).collect();
        write_json(&cfg.out.join("weights.json"), &w)?;
    }
    let summary = TrainSummary {
        n: rec.n,
        d: ctx.problem.dim(),
        steps: cfg.train.steps,
        final_row: rec.final_row(),
        diverged_at: rec.diverged.as_ref().map(|d| d.step),
        max_example_loss: rec.max_example_loss,
        loss_bound_m: cfg.problem.m(),
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    if let Some(d) = &rec.diverged {
        return Err(HarnessError::Diverged(format!("training diverged at step {}", d.step)));
    }
    Ok(())
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    let v = v?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Seed-averaged curve over runs that did not diverge.
pub fn average_curves(records: &[&TrajectoryRecord]) -> Result<Vec<CurveRow>> {
    let first = records.first().ok_or_else(|| HarnessError::Diverged("every run diverged".into()))?;
    for r in records {
        if r.rows.len() != first.rows.len() || r.rows.iter().zip(&first.rows).any(|(a, b)| a.step != b.step) {
            return Err(HarnessError::Output("runs were logged on different step grids".into()));
        }
    }
    let k = records.len() as f64;
    Ok((0..first.rows.len())
        .map(|i| CurveRow {
            step: first.rows[i].step,
            train_loss: records.iter().map(|r| r.rows[i].train_loss).sum::<f64>() / k,
            test_loss: mean_opt(records.iter().map(|r| r.rows[i].test_loss)),
            train_acc: mean_opt(records.iter().map(|r| r.rows[i].train_acc)),
            test_acc: mean_opt(records.iter().map(|r| r.rows[i].test_acc)),
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub seeds: usize,
    pub sgd_runs_used: usize,
    pub sde_runs_used: usize,
    pub terminal_sgd: CurveRow,
    pub terminal_sde: CurveRow,
    /// `|acc_SGD - acc_SDE|` at the terminal step, in percentage points.
    pub test_acc_abs_diff_pp: Option<f64>,
    pub train_acc_abs_diff_pp: Option<f64>,
    pub test_loss_abs_diff: Option<f64>,
    pub train_loss_abs_diff: f64,
}

#[derive(Debug, Clone)]
pub struct CompareResult {
    pub sgd: Vec<CurveRow>,
    pub sde: Vec<CurveRow>,
    pub summary: CompareSummary,
}

/// Paired SGD and SDE runs: seed `k` of both uses dataset `k` and run seed `k`.
pub fn compare(ctx: &Context) -> Result<CompareResult> {
    let seeds = ctx.cfg.compare.seeds;
    if seeds == 0 {
        return Err(HarnessError::Config("compare.seeds must be at least 1".into()));
    }
    let datasets = (0..seeds).map(|k| ctx.dataset(k, ctx.cfg.n)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, Mode)> = (0..seeds).flat_map(|k| [(k, Mode::Sgd), (k, Mode::Sde)]).collect();
    let records = jobs
        .par_iter()
        .map(|&(k, mode)| {
            let mut tc = ctx.cfg.train.clone();
            tc.mode = mode;
            tc.seed = ctx.run_seed(k);
            Ok(dynamics::train_run(ctx.problem.as_ref(), &datasets[k], Some(&ctx.oracle), &tc)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |mode: Mode| -> Vec<&TrajectoryRecord> {
        jobs.iter().zip(&records).filter(|((_, m), r)| *m == mode && r.diverged.is_none()).map(|(_, r)| r).collect()
    };
    let (sgd_runs, sde_runs) = (pick(Mode::Sgd), pick(Mode::Sde));
    let sgd = average_curves(&sgd_runs)?;
    let sde = average_curves(&sde_runs)?;
    let (a, b) = (sgd.last().cloned().expect("non-empty"), sde.last().cloned().expect("non-empty"));
    let diff = |x: Option<f64>, y: Option<f64>| Some((x? - y?).abs());
    let summary = CompareSummary {
        seeds,
        sgd_runs_used: sgd_runs.len(),
        sde_runs_used: sde_runs.len(),
        test_acc_abs_diff_pp: diff(a.test_acc, b.test_acc).map(|x| 100.0 * x),
        train_acc_abs_diff_pp: diff(a.train_acc, b.train_acc).map(|x| 100.0 * x),
        test_loss_abs_diff: diff(a.test_loss, b.test_loss),
        train_loss_abs_diff: (a.train_loss - b.train_loss).abs(),
        terminal_sgd: a,
        terminal_sde: b,
    };
    Ok(CompareResult { sgd, sde, summary })
}

fn curve_rows(c: &[CurveRow]) -> Vec<Vec<String>> {
    c.iter()
        .map(|r| {
            vec![r.step.to_string(), fmt_f64(r.train_loss), fmt_opt(r.test_loss), fmt_opt(r.train_acc), fmt_opt(r.test_acc)]
        })
        .collect()
}

pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<()> {
    let ctx = Context::new(cfg)?;
    let res = compare(&ctx)?;
    ensure_out(&cfg.out)?;
    write_csv(&cfg.out.join("compare_sgd.csv"), &COMPARE_HEADER, &curve_rows(&res.sgd))?;
    write_csv(&cfg.out.join("compare_sde.csv"), &COMPARE_HEADER, &curve_rows(&res.sde))?;
    write_json(&cfg.out.join("compare_summary.json"), &res.summary)
}

// ---------------------------------------------------------------- generalization error

/// Mean over runs of oracle loss minus training loss at the terminal weight.
pub fn estimate_generalization_error(problem: &dyn Problem, runs: &[(&ParamVector, &[Example])], oracle: &[Example]) -> f64 {
    if runs.is_empty() {
        return f64::NAN;
    }
    let s: f64 = runs.iter().map(|(w, ex)| problems::mean_loss(problem, w, oracle) - problems::mean_loss(problem, w, ex)).sum();
    s / runs.len() as f64
}

/// Population minimizer approximated by damped Newton on the oracle sample.
/// `None` for non-convex families.
pub fn reference_minimizer(problem: &dyn Problem, family: &Family, oracle: &[Example]) -> Option<ParamVector> {
    if matches!(family, Family::MlpTeacher { .. }) {
        return None;
    }
    let mut w = ParamVector::zeros(problem.dim());
    let mut loss = problems::mean_loss(problem, &w, oracle);
    for _ in 0..100 {
        let g = gradstats::full_gradient(problem, &w, oracle);
        if g.norm() < 1e-12 {
            break;
        }
        let h = problems::hessian_matrix(problem, &w, oracle);
        let step = h.as_matrix().clone().cholesky()?.solve(&g);
        let mut t = 1.0;
        loop {
            let cand = &w - &step * t;
            let l = problems::mean_loss(problem, &cand, oracle);
            if l <= loss {
                w = cand;
                loss = l;
                break;
            }
            t /= 2.0;
            if t < 1e-10 {
                return w.iter().all(|x| x.is_finite()).then_some(w);
            }
        }
    }
    w.iter().all(|x| x.is_finite()).then_some(w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenError {
    /// Control-variate estimate when enabled and available, else the raw one.
    pub value: f64,
    pub raw: f64,
    pub control_variate: Option<f64>,
    pub runs: usize,
}

fn generalization_error(ctx: &Context, ens: &TerminalEnsemble) -> GenError {
    let p = ctx.problem.as_ref();
    let ok: Vec<_> = ens.runs.iter().filter(|r| r.record.diverged.is_none()).collect();
    let pairs: Vec<(&ParamVector, &[Example])> =
        ok.iter().map(|r| (&r.record.w_final, ens.datasets[r.dataset_index].examples.as_slice())).collect();
    let raw = estimate_generalization_error(p, &pairs, &ctx.oracle.examples);
    let cv = if ctx.cfg.control_variate && !ok.is_empty() {
        reference_minimizer(p, &ctx.cfg.problem.family, &ctx.oracle.examples).map(|w_ref| {
            let pop = problems::mean_loss(p, &w_ref, &ctx.oracle.examples);
            let gaps: Vec<f64> = ens.datasets.iter().map(|ds| pop - problems::mean_loss(p, &w_ref, &ds.examples)).collect();
            raw - ok.iter().map(|r| gaps[r.dataset_index]).sum::<f64>() / ok.len() as f64
        })
    } else {
        None
    };
    GenError { value: cv.unwrap_or(raw), raw, control_variate: cv, runs: ok.len() }
}

// ---------------------------------------------------------------- bounds

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub n: usize,
    pub seeds_used: usize,
    pub generalization_error: GenError,
    pub bounds: Vec<BoundReport>,
}

fn loo_pairs(ctx: &Context, ens: &TerminalEnsemble) -> Result<Vec<LooPair>> {
    let subsets = ctx.cfg.loo.subsets;
    if subsets == 0 {
        return Err(HarnessError::Config("loo.subsets must be at least 1".into()));
    }
    let mut jobs = Vec::new();
    for (i, ds) in ens.datasets.iter().enumerate() {
        let drops = gradstats::sample_loo_drops(ds.seed, ds.len(), subsets);
        for (k, &drop) in drops.iter().enumerate() {
            for r in ens.runs.iter().filter(|r| r.dataset_index == i && r.record.diverged.is_none()) {
                jobs.push((i, k, drop, r));
            }
        }
    }
    jobs.par_iter()
        .map(|&(i, k, drop, r)| {
            let ds = &ens.datasets[i];
            let subset: Vec<usize> = (0..ds.len()).filter(|&j| j != drop).collect();
            let mut tc = r.record.config.clone();
            tc.track = Default::default();
            tc.record_weights = false;
            tc.log_every = tc.steps;
            let rec = dynamics::loo_train(ctx.problem.as_ref(), ds, None, &subset, &tc)?;
            if rec.diverged.is_some() {
                return Ok(None);
            }
            Ok(Some(LooPair {
                dataset_index: i,
                subset_id: k,
                run_index: r.run_index,
                w_full: r.record.w_final.clone(),
                w_loo: rec.w_final,
            }))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

fn bound_for(ctx: &Context, ens: &TerminalEnsemble, kind: BoundKind) -> Result<BoundReport> {
    let cfg = ctx.cfg;
    let p = ctx.problem.as_ref();
    let opts = cfg.terminal_options();
    let ok: Vec<_> = ens.runs.iter().filter(|r| r.record.diverged.is_none()).collect();
    let traj = || TrajectoryInputs::from_records(ok.iter().map(|r| &r.record)).map(|i| i.with_constants(opts.r, opts.m));
    let samples = || EnsembleSamples::from_ensemble(ens);
    let tc = &ens.config;
    let rep = match kind {
        BoundKind::TrajIsotropic => bounds::traj_bound_isotropic(&traj()?, &cfg.g_tilde)?,
        BoundKind::TrajLangevin => bounds::traj_bound_langevin(&traj()?, &cfg.g_tilde)?,
        BoundKind::TrajAnisotropic => bounds::traj_bound_anisotropic(&traj()?)?,
        BoundKind::TrajDataDependent => {
            let runs: Vec<DataDependentRun> = ok
                .iter()
                .map(|r| DataDependentRun {
                    dataset_index: r.dataset_index,
                    examples: &ens.datasets[r.dataset_index].examples,
                    weights: &r.record.weights,
                })
                .collect();
            bounds::traj_bound_data_dependent(p, &runs, tc.b, tc.steps, tc.lr.at(0), opts.m, tc.floor, cfg.seed)?
        }
        BoundKind::TerminalGeneral => bounds::terminal_bound_general(&samples(), &opts)?,
        BoundKind::TerminalAnisotropic => {
            let s = samples();
            let curv = bounds::terminal_curvature(p, ens, &s)?;
            bounds::terminal_bound_anisotropic(&s, &curv, &opts)?
        }
        BoundKind::TerminalIsotropic => bounds::terminal_bound_isotropic(&samples(), &cfg.reference, &opts)?,
        BoundKind::TerminalIsotropicInit => bounds::terminal_bound_isotropic(&samples(), &Reference::Init, &opts)?,
        BoundKind::TerminalGradientAccum => {
            let recs: Vec<&TrajectoryRecord> = ok.iter().map(|r| &r.record).collect();
            bounds::terminal_bound_gradient_accum(&recs, p.dim(), &opts)?
        }
        BoundKind::TerminalLoo => {
            let pairs = loo_pairs(ctx, ens)?;
            bounds::terminal_bound_loo(&pairs, ens.datasets[0].len(), tc.b, tc.lr.terminal(tc.steps), tc.steps, &opts)?
        }
        BoundKind::FimTakeuchi => bounds::fim_takeuchi_bound(p, ens, &ctx.oracle.examples, &opts)?,
    };
    Ok(rep)
}

/// Trains the configured ensemble at training-set size `n` and evaluates the
/// requested bounds and the generalization error on it.
pub fn evaluate(ctx: &Context, n: usize, kinds: &[BoundKind]) -> Result<Evaluation> {
    let cfg = ctx.cfg;
    let d = ctx.problem.dim();
    let mut tc: TrainConfig = cfg.train.clone();
    if kinds.iter().any(|k| matches!(k, BoundKind::TrajIsotropic | BoundKind::TrajLangevin | BoundKind::TrajAnisotropic)) {
        tc.track.snapshots = true;
    }
    if kinds.contains(&BoundKind::TrajDataDependent) {
        tc.record_weights = true;
    }
    let anisotropic = kinds.iter().any(|k| matches!(k, BoundKind::TrajAnisotropic | BoundKind::TerminalAnisotropic));
    if anisotropic && d > tc.matrix_cap && !cfg.diagonal_fallback {
        return Err(gradnoise_core::Error::Capability(format!(
            "anisotropic bounds need d = {d} within the matrix cap {}; enable diagonal_fallback",
            tc.matrix_cap
        ))
        .into());
    }
    let plan = EnsemblePlan { n, n_datasets: cfg.ensemble.datasets, n_runs: cfg.ensemble.runs, base_seed: cfg.seed };
    let ens = dynamics::run_ensemble(ctx.problem.as_ref(), &cfg.problem, Some(&ctx.oracle), &tc, &plan)?;
    let seeds_used = ens.runs.len() - ens.diverged_count();
    if seeds_used == 0 {
        return Err(HarnessError::Diverged(format!("every run of the n = {n} ensemble diverged")));
    }
    let bounds = kinds.iter().map(|&k| bound_for(ctx, &ens, k)).collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { n, seeds_used, generalization_error: generalization_error(ctx, &ens), bounds })
}

fn select(cfg: &ExperimentConfig, trajectory: bool) -> Result<Vec<BoundKind>> {
    if cfg.bounds.is_empty() {
        return Ok(if trajectory { BoundKind::TRAJECTORY.to_vec() } else { BoundKind::TERMINAL.to_vec() });
    }
    let kinds: Vec<BoundKind> = cfg.bounds.iter().copied().filter(|k| k.is_trajectory() == trajectory).collect();
    if kinds.is_empty() {
        let what = if trajectory { "trajectory" } else { "terminal" };
        return Err(HarnessError::Config(format!("the bounds list selects no {what} bounds")));
    }
    Ok(kinds)
}

pub fn bounds_rows(reports: &[BoundReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                fmt_f64(r.value),
                fmt_f64(r.core),
                r.config.n.to_string(),
                r.config.b.to_string(),
                fmt_f64(r.config.eta),
                r.config.steps.to_string(),
                r.n_runs_used.to_string(),
                r.flags.join(";"),
            ]
        })
        .collect()
}

fn bounds_step_rows(reports: &[BoundReport]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in reports {
        let (Some(terms), Some(steps)) = (&r.per_step_terms, r.series.get("step")) else {
            continue;
        };
        let running = r.series.get("running_core");
        for (k, (t, s)) in terms.iter().zip(steps).enumerate() {
            rows.push(vec![
                r.name.clone(),
                (*s as usize).to_string(),
                fmt_f64(*t),
                fmt_opt(running.and_then(|v| v.get(k).copied())),
            ]);
        }
    }
    rows
}

fn write_evaluation(out: &Path, ev: &Evaluation) -> Result<()> {
    ensure_out(out)?;
    write_json(&out.join("bounds.json"), ev)?;
    write_csv(&out.join("bounds.csv"), &BOUNDS_HEADER, &bounds_rows(&ev.bounds))?;
    write_csv(&out.join("bounds_steps.csv"), &BOUNDS_STEPS_HEADER, &bounds_step_rows(&ev.bounds))
}

pub fn cmd_bounds_traj(cfg: &ExperimentConfig) -> Result<()> {
    let kinds = select(cfg, true)?;
    let ctx = Context::new(cfg)?;
    write_evaluation(&cfg.out, &evaluate(&ctx, cfg.n, &kinds)?)
}

pub fn cmd_bounds_terminal(cfg: &ExperimentConfig) -> Result<()> {
    let kinds = select(cfg, false)?;
    let ctx = Context::new(cfg)?;
    write_evaluation(&cfg.out, &evaluate(&ctx, cfg.n, &kinds)?)
}

// ---------------------------------------------------------------- stationary

#[derive(Debug, Clone, Serialize)]
pub struct StationarySolve {
    pub mode: StationaryMode,
    pub lambda: Option<Vec<Vec<f64>>>,
    pub residual: Option<f64>,
    /// `‖Λ_solved - Λ_empirical‖_F / ‖Λ_empirical‖_F`.
    pub rel_frobenius: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StationaryReport {
    pub n: usize,
    pub d: usize,
    pub b: usize,
    pub eta: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub samples: usize,
    pub tail_mean: Vec<f64>,
    pub empirical: Vec<Vec<f64>>,
    pub hessian: Vec<Vec<f64>>,
    pub gnc: Vec<Vec<f64>>,
    pub lambda1: f64,
    /// `2/η - λ₁`.
    pub gap: f64,
    /// `η/2 - λ₁`.
    pub gap_half_eta: f64,
    pub solves: Vec<StationarySolve>,
}

/// One long run; compares the post-burn-in iterate covariance with every
/// stationary-covariance solve at the tail mean.
pub fn stationary(ctx: &Context) -> Result<StationaryReport> {
    let cfg = ctx.cfg;
    let p = ctx.problem.as_ref();
    let ds = ctx.dataset(0, cfg.n)?;
    let mut tc = cfg.train.clone();
    tc.seed = ctx.run_seed(0);
    tc.tail_moments = true;
    if tc.burn_in == 0 {
        tc.burn_in = tc.steps / 2;
    }
    let rec = dynamics::train_run(p, &ds, None, &tc)?;
    if let Some(d) = &rec.diverged {
        return Err(HarnessError::Diverged(format!("stationary run diverged at step {}", d.step)));
    }
    let ts = rec.tail_stats.as_ref().filter(|t| t.count >= 2).ok_or_else(|| {
        HarnessError::Config("fewer than two post-burn-in iterates; raise steps or lower burn_in".into())
    })?;
    let empirical = ts.covariance();
    let w = &ts.mean;
    let h = problems::hessian_matrix(p, w, &ds.examples);
    let c = match tc.mode {
        Mode::Gld => SymmetricMatrix::identity(p.dim()),
        _ => gradstats::minibatch_gnc(&gradstats::plug_in_covariance(&gradstats::per_example_gradients(p, w, &ds.examples)), ds.len(), tc.b)?,
    };
    let eta = tc.lr.terminal(tc.steps);
    let lambda1 = h.max_eigenvalue()?;
    let emp_norm = empirical.frobenius_norm();
    let solves = [StationaryMode::General, StationaryMode::Commuting, StationaryMode::HessianMatchesGnc, StationaryMode::SmallLr]
        .into_iter()
        .map(|mode| match linalg::solve_stationary_covariance(&h, &c, eta, mode, tc.b) {
            Ok(l) => StationarySolve {
                mode,
                residual: Some(linalg::stationary_residual(&l, &h, &c, eta)),
                rel_frobenius: Some((&l - &empirical).frobenius_norm() / emp_norm),
                lambda: Some(l.to_rows()),
                error: None,
            },
            Err(e) => StationarySolve { mode, lambda: None, residual: None, rel_frobenius: None, error: Some(e.to_string()) },
        })
        .collect();
    Ok(StationaryReport {
        n: ds.len(),
        d: p.dim(),
        b: tc.b,
        eta,
        steps: tc.steps,
        burn_in: tc.burn_in,
        samples: ts.count,
        tail_mean: w.iter().copied().collect(),
        empirical: empirical.to_rows(),
        hessian: h.to_rows(),
        gnc: c.to_rows(),
        lambda1,
        gap: spectral::stability_gap(lambda1, eta),
        gap_half_eta: eta / 2.0 - lambda1,
        solves,
    })
}

pub fn cmd_stationary(cfg: &ExperimentConfig) -> Result<()> {
    let ctx = Context::new(cfg)?;
    let rep = stationary(&ctx)?;
    ensure_out(&cfg.out)?;
    write_json(&cfg.out.join("stationary.json"), &rep)
}

// ---------------------------------------------------------------- sweep-n

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub bound: String,
    pub core: f64,
    pub value: f64,
    pub gen_error: f64,
    pub gen_error_raw: f64,
    pub seeds_used: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundTrend {
    pub bound: String,
    pub core: Vec<f64>,
    /// Spearman correlation of the core with `n`.
    pub spearman: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub n: Vec<usize>,
    pub gen_error: Vec<f64>,
    pub gen_error_spearman: f64,
    pub bounds: Vec<BoundTrend>,
    /// Bounds whose core strictly decreases with `n`.
    pub decreasing_with_n: Vec<String>,
    /// Bounds whose core is positively rank-correlated with `n`, unlike the
    /// measured generalization error.
    pub grows_with_n: Vec<String>,
}

const SWEEP_DEFAULT: [BoundKind; 3] = [BoundKind::TerminalGeneral, BoundKind::TerminalAnisotropic, BoundKind::TerminalIsotropic];

pub fn sweep(ctx: &Context) -> Result<(Vec<SweepRow>, SweepSummary)> {
    let cfg = ctx.cfg;
    if cfg.n_sweep.is_empty() {
        return Err(HarnessError::Config("sweep-n needs a non-empty n_sweep list".into()));
    }
    let kinds: Vec<BoundKind> = if cfg.bounds.is_empty() { SWEEP_DEFAULT.to_vec() } else { cfg.bounds.clone() };
    let mut rows = Vec::new();
    let mut gen = Vec::new();
    let mut cores = vec![Vec::new(); kinds.len()];
    for &n in &cfg.n_sweep {
        let ev = evaluate(ctx, n, &kinds)?;
        gen.push(ev.generalization_error.value);
        for (k, r) in ev.bounds.iter().enumerate() {
            cores[k].push(r.core);
            rows.push(SweepRow {
                n,
                bound: r.name.clone(),
                core: r.core,
                value: r.value,
                gen_error: ev.generalization_error.value,
                gen_error_raw: ev.generalization_error.raw,
                seeds_used: ev.seeds_used,
            });
        }
    }
    let ns: Vec<f64> = cfg.n_sweep.iter().map(|&n| n as f64).collect();
    let trends: Vec<BoundTrend> = kinds
        .iter()
        .zip(cores)
        .map(|(k, core)| BoundTrend { bound: k.name(), spearman: spearman(&ns, &core), core })
        .collect();
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let summary = SweepSummary {
        n: cfg.n_sweep.clone(),
        gen_error_spearman: spearman(&ns, &gen),
        decreasing_with_n: trends.iter().filter(|t| decreasing(&t.core)).map(|t| t.bound.clone()).collect(),
        grows_with_n: trends.iter().filter(|t| t.spearman > 0.0).map(|t| t.bound.clone()).collect(),
        gen_error: gen,
        bounds: trends,
    };
    Ok((rows, summary))
}

pub fn sweep_rows(rows: &[SweepRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                r.bound.clone(),
                fmt_f64(r.core),
                fmt_f64(r.value),
                fmt_f64(r.gen_error),
                fmt_f64(r.gen_error_raw),
                r.seeds_used.to_string(),
            ]
        })
        .collect()
}

pub fn cmd_sweep_n(cfg: &ExperimentConfig) -> Result<()> {
    let ctx = Context::new(cfg)?;
    let (rows, summary) = sweep(&ctx)?;
    ensure_out(&cfg.out)?;
    write_csv(&cfg.out.join("sweep.csv"), &SWEEP_HEADER, &sweep_rows(&rows))?;
    write_json(&cfg.out.join("sweep_summary.json"), &summary)
}
