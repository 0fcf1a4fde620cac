//! The three discrete processes (mini-batch SGD, Euler-Maruyama SDE with
//! state-dependent Gaussian noise, gradient Langevin dynamics), training runs
//! that log gradient and Hessian statistics, leave-one-out runs, and
//! multi-seed terminal ensembles.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradstats::{self, GradSnapshot, DEFAULT_MATRIX_CAP};
use crate::linalg::{self, Floor, ParamVector, SpdMatrix, SymmetricMatrix};
use crate::problems::{self, Dataset, Example, Problem};
use crate::rng::{self, Rng};
use crate::spectral;

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sgd,
    Sde,
    Gld,
}

/// Piecewise-constant learning rate: `(first_step, eta)` segments, sorted,
/// the first starting at step 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "LrSpec", into = "LrSpec")]
pub struct LrSchedule(Vec<(usize, f64)>);

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LrSpec {
    Constant(f64),
    Piecewise(Vec<(usize, f64)>),
}

impl From<LrSpec> for LrSchedule {
    fn from(s: LrSpec) -> Self {
        match s {
            LrSpec::Constant(eta) => LrSchedule(vec![(0, eta)]),
            LrSpec::Piecewise(v) => LrSchedule(v),
        }
    }
}

impl From<LrSchedule> for LrSpec {
    fn from(s: LrSchedule) -> Self {
        if s.0.len() == 1 && s.0[0].0 == 0 {
            LrSpec::Constant(s.0[0].1)
        } else {
            LrSpec::Piecewise(s.0)
        }
    }
}

impl LrSchedule {
    pub fn constant(eta: f64) -> Self {
        LrSchedule(vec![(0, eta)])
    }

    pub fn piecewise(segments: Vec<(usize, f64)>) -> Result<Self> {
        let s = LrSchedule(segments);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.0.first().ok_or_else(|| Error::Config("learning-rate schedule is empty".into()))?;
        if first.0 != 0 {
            return Err(Error::Config("learning-rate schedule must start at step 0".into()));
        }
        if self.0.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("learning-rate schedule steps must be strictly increasing".into()));
        }
        if let Some(&(_, eta)) = self.0.iter().find(|(_, eta)| !(*eta > 0.0 && eta.is_finite())) {
            return Err(Error::Config(format!("learning rate must be positive, got {eta}")));
        }
        Ok(())
    }

    /// Learning rate of the update taken from iteration index `t` (0-based).
    pub fn at(&self, t: usize) -> f64 {
        let k = self.0.partition_point(|&(s, _)| s <= t);
        self.0[k.saturating_sub(1)].1
    }

    /// Rate in effect at the end of a run of `steps` updates.
    pub fn terminal(&self, steps: usize) -> f64 {
        self.at(steps.saturating_sub(1))
    }

    pub fn segments(&self) -> &[(usize, f64)] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// The problem's own default (zeros for convex problems, seeded random
    /// weights for the MLP).
    #[default]
    Default,
    Zeros,
    Vector(Vec<f64>),
}

/// What to compute at each logged step besides losses and gradient norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tracking {
    /// Store a full [`GradSnapshot`] (with oracle population statistics).
    pub snapshots: bool,
    /// Power-iteration λ₁ and the stability gap.
    pub spectral: bool,
    /// `log det Σ̂^μ - log det Σ` (needs an oracle and d within the cap).
    pub alignment: bool,
}

impl Default for Tracking {
    fn default() -> Self {
        Tracking { snapshots: false, spectral: false, alignment: false }
    }
}

fn default_log_every() -> usize {
    100
}

fn default_refresh() -> usize {
    1
}

fn default_cap() -> usize {
    DEFAULT_MATRIX_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub b: usize,
    pub lr: LrSchedule,
    pub steps: usize,
    pub mode: Mode,
    /// Run seed: batch sampling, Gaussian noise and random init derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Keep the weights of every logged step.
    #[serde(default)]
    pub record_weights: bool,
    /// Steps discarded before stationary (tail) statistics are collected.
    #[serde(default)]
    pub burn_in: usize,
    /// Keep a tail checkpoint every this many steps after burn-in (0: none).
    #[serde(default)]
    pub tail_every: usize,
    /// Accumulate the running mean/covariance of every post-burn-in iterate.
    #[serde(default)]
    pub tail_moments: bool,
    /// SDE noise factor recomputed every this many steps (1: every step).
    #[serde(default = "default_refresh")]
    pub cov_refresh: usize,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub track: Tracking,
    #[serde(default)]
    pub floor: Floor,
    #[serde(default = "default_cap")]
    pub matrix_cap: usize,
}

impl TrainConfig {
    pub fn new(mode: Mode, b: usize, eta: f64, steps: usize) -> Self {
        TrainConfig {
            b,
            lr: LrSchedule::constant(eta),
            steps,
            mode,
            seed: 0,
            log_every: default_log_every(),
            record_weights: false,
            burn_in: 0,
            tail_every: 0,
            tail_moments: false,
            cov_refresh: 1,
            init: Init::Default,
            track: Tracking::default(),
            floor: Floor::default(),
            matrix_cap: DEFAULT_MATRIX_CAP,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        self.lr.validate()?;
        if self.b == 0 || self.b > n {
            return Err(Error::Config(format!("batch size {} must lie in 1..={n}", self.b)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if self.cov_refresh == 0 {
            return Err(Error::Config("cov_refresh must be at least 1".into()));
        }
        if self.burn_in >= self.steps && (self.tail_every > 0 || self.tail_moments) {
            return Err(Error::Config(format!("burn_in {} must be below steps {}", self.burn_in, self.steps)));
        }
        Ok(())
    }

    pub fn initial_weights(&self, problem: &dyn Problem) -> Result<ParamVector> {
        let d = problem.dim();
        match &self.init {
            Init::Default => Ok(problem.default_init(self.seed)),
            Init::Zeros => Ok(DVector::zeros(d)),
            Init::Vector(v) if v.len() == d => Ok(DVector::from_column_slice(v)),
            Init::Vector(v) => Err(Error::Config(format!("init vector has length {}, problem dimension is {d}", v.len()))),
        }
    }
}

/// One logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub grad_norm_sq: f64,
    pub trace_c: f64,
    pub dist_init: f64,
    pub lambda1: Option<f64>,
    /// `2/η - λ₁`.
    pub gap: Option<f64>,
    /// `η/2 - λ₁`.
    pub gap_half_eta: Option<f64>,
    pub alignment: Option<f64>,
}

/// Running mean and covariance of iterates (Welford).
#[derive(Debug, Clone, PartialEq)]
pub struct TailStats {
    pub count: usize,
    pub mean: ParamVector,
    m2: DMatrix<f64>,
}

impl TailStats {
    pub fn new(d: usize) -> Self {
        TailStats { count: 0, mean: DVector::zeros(d), m2: DMatrix::zeros(d, d) }
    }

    pub fn push(&mut self, x: &ParamVector) {
        self.count += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = x - &self.mean;
        self.m2.ger(1.0, &delta, &delta2, 1.0);
    }

    /// Covariance around the running mean (divisor = count).
    pub fn covariance(&self) -> SymmetricMatrix {
        SymmetricMatrix::symmetrize(&self.m2 / self.count.max(1) as f64)
    }

    /// Second moment around `center`.
    pub fn second_moment_about(&self, center: &ParamVector) -> SymmetricMatrix {
        let shift = &self.mean - center;
        let c = self.covariance();
        SymmetricMatrix::symmetrize(c.as_matrix() + &shift * shift.transpose())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub config: TrainConfig,
    pub n: usize,
    pub rows: Vec<LogRow>,
    pub snapshots: Vec<GradSnapshot>,
    pub weights: Vec<(usize, ParamVector)>,
    pub w0: ParamVector,
    pub w_final: ParamVector,
    pub tail: Vec<ParamVector>,
    pub tail_stats: Option<TailStats>,
    pub diverged: Option<Divergence>,
    /// Largest per-example training loss seen at logged steps.
    pub max_example_loss: f64,
}

impl TrajectoryRecord {
    pub fn final_row(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

/// Noise factor `F` with `F Fᵀ = C`, cached between covariance refreshes.
enum NoiseFactor {
    Dense(DMatrix<f64>),
    /// `sqrt(factor / n) · (centered per-example gradients)`, d×n.
    LowRank(DMatrix<f64>),
}

impl NoiseFactor {
    fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        match self {
            NoiseFactor::Dense(f) | NoiseFactor::LowRank(f) => {
                let z = DVector::from_fn(f.ncols(), |_, _| StandardNormal.sample(rng));
                f * z
            }
        }
    }
}

fn noise_factor(
    problem: &dyn Problem,
    w: &ParamVector,
    examples: &[Example],
    b: usize,
    floor: Floor,
    cap: usize,
) -> Result<Option<NoiseFactor>> {
    let n = examples.len();
    let factor = gradstats::minibatch_factor(n, b)?;
    if factor == 0.0 {
        return Ok(None);
    }
    let grads = gradstats::per_example_gradients(problem, w, examples);
    if problem.dim() <= cap {
        let sigma = gradstats::plug_in_covariance(&grads);
        if sigma.is_zero() {
            return Ok(None);
        }
        let c = SpdMatrix::regularize_with(&sigma.scale(factor), floor)?;
        Ok(Some(NoiseFactor::Dense(linalg::spd_sqrt(&c).into_matrix())))
    } else {
        let mean = gradstats::column_mean(&grads);
        let mut centered = grads;
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        if centered.iter().all(|&x| x == 0.0) {
            return Ok(None);
        }
        Ok(Some(NoiseFactor::LowRank(centered * (factor / n as f64).sqrt())))
    }
}

fn descend(w: &mut [f64], grad: &[f64], eta: f64) {
    for (wi, gi) in w.iter_mut().zip(grad) {
        *wi -= eta * gi;
    }
}

/// `w - η · (1/b) Σ_{i∈B} ∇l(w, z_i)`.
pub fn sgd_step(problem: &dyn Problem, w: &ParamVector, examples: &[Example], batch: &[usize], eta: f64) -> ParamVector {
    let d = problem.dim();
    let mut buf = vec![0.0; d];
    let mut g = vec![0.0; d];
    gradstats::batch_mean_gradient_into(problem, w.as_slice(), examples, batch.iter().copied(), &mut buf, &mut g);
    let mut out = w.clone();
    descend(out.as_mut_slice(), &g, eta);
    out
}

/// `w - η G + η C^{1/2} N` with the exact mini-batch GNC `C` at `w`.
pub fn sde_step(
    problem: &dyn Problem,
    w: &ParamVector,
    examples: &[Example],
    b: usize,
    eta: f64,
    floor: Floor,
    rng: &mut Rng,
) -> Result<ParamVector> {
    let g = gradstats::full_gradient(problem, w, examples);
    let mut out = w.clone();
    descend(out.as_mut_slice(), g.as_slice(), eta);
    if let Some(f) = noise_factor(problem, w, examples, b, floor, DEFAULT_MATRIX_CAP)? {
        out += f.sample(rng) * eta;
    }
    Ok(out)
}

/// `w - η G + η N` with identity noise covariance.
pub fn gld_step(problem: &dyn Problem, w: &ParamVector, examples: &[Example], eta: f64, rng: &mut Rng) -> ParamVector {
    let g = gradstats::full_gradient(problem, w, examples);
    let mut out = w.clone();
    descend(out.as_mut_slice(), g.as_slice(), eta);
    let z = DVector::from_fn(w.len(), |_, _| StandardNormal.sample(rng));
    out + z * eta
}

struct Logger<'a> {
    problem: &'a dyn Problem,
    examples: &'a [Example],
    oracle: Option<&'a [Example]>,
    cfg: &'a TrainConfig,
    factor: f64,
    w0: ParamVector,
}

impl Logger<'_> {
    fn log(&self, step: usize, w: &ParamVector, rec: &mut TrajectoryRecord) -> Result<()> {
        let p = self.problem;
        let cfg = self.cfg;
        let eta = cfg.lr.at(step.min(cfg.steps.saturating_sub(1)));
        let losses: Vec<f64> = self.examples.iter().map(|z| p.loss(w.as_slice(), z)).collect();
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let max_loss = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_loss.is_finite() {
            rec.max_example_loss = rec.max_example_loss.max(max_loss);
        }

        let want_snapshot = cfg.track.snapshots || cfg.track.alignment;
        let (grad_norm_sq, trace_c, alignment) = if want_snapshot {
            let snap = gradstats::snapshot(p, w, self.examples, cfg.b, self.oracle, step, cfg.matrix_cap)?;
            let alignment = if cfg.track.alignment {
                match (&snap.pop_gnc, &snap.single_draw_gnc) {
                    (Some(pop), Some(sigma)) => {
                        let a = linalg::log_det(&SpdMatrix::regularize_with(pop, cfg.floor)?)?;
                        let s = linalg::log_det(&SpdMatrix::regularize_with(sigma, cfg.floor)?)?;
                        Some(a - s)
                    }
                    _ => None,
                }
            } else {
                None
            };
            let out = (snap.grad_norm_sq, snap.trace_c, alignment);
            if cfg.track.snapshots {
                rec.snapshots.push(snap);
            }
            out
        } else {
            let grads = gradstats::per_example_gradients(p, w, self.examples);
            let g = gradstats::full_gradient(p, w, self.examples);
            let trace_sigma: f64 = gradstats::plug_in_variance(&grads).iter().sum();
            (g.norm_squared(), self.factor * trace_sigma, None)
        };

        let (test_loss, test_acc) = match self.oracle {
            Some(o) => (Some(problems::mean_loss(p, w, o)), problems::accuracy(p, w, o)),
            None => (None, None),
        };
        let (lambda1, gap, gap_half_eta) = if cfg.track.spectral {
            let top = spectral::top_eigenvalue(p, w, self.examples, spectral::DEFAULT_TOL, spectral::DEFAULT_MAX_ITER, cfg.seed);
            (Some(top.lambda), Some(spectral::stability_gap(top.lambda, eta)), Some(eta / 2.0 - top.lambda))
        } else {
            (None, None, None)
        };
        rec.rows.push(LogRow {
            step,
            lr: eta,
            train_loss,
            test_loss,
            train_acc: problems::accuracy(p, w, self.examples),
            test_acc,
            grad_norm_sq,
            trace_c,
            dist_init: (w - &self.w0).norm(),
            lambda1,
            gap,
            gap_half_eta,
            alignment,
        });
        if cfg.record_weights {
            rec.weights.push((step, w.clone()));
        }
        if !train_loss.is_finite() || train_loss > DIVERGENCE_LOSS {
            rec.diverged = Some(Divergence { step, loss: train_loss });
        }
        Ok(())
    }
}

/// Runs one training process on `dataset`.
///
/// Divergence is not an error: the partial record comes back with
/// `diverged` set.
pub fn train_run(
    problem: &dyn Problem,
    dataset: &Dataset,
    oracle: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrajectoryRecord> {
    train_on(problem, &dataset.examples, oracle.map(|o| o.examples.as_slice()), cfg)
}

pub fn train_on(
    problem: &dyn Problem,
    examples: &[Example],
    oracle: Option<&[Example]>,
    cfg: &TrainConfig,
) -> Result<TrajectoryRecord> {
    let n = examples.len();
    cfg.validate(n)?;
    let d = problem.dim();
    let b = cfg.b;
    let factor = gradstats::minibatch_factor(n, b)?;
    let mut w = cfg.initial_weights(problem)?;
    let w0 = w.clone();
    let mut batch_rng = rng::rng_for(cfg.seed, rng::stream::BATCH);
    let mut noise_rng = rng::rng_for(cfg.seed, rng::stream::NOISE);

    let mut rec = TrajectoryRecord {
        config: cfg.clone(),
        n,
        rows: Vec::new(),
        snapshots: Vec::new(),
        weights: Vec::new(),
        w0: w0.clone(),
        w_final: w0.clone(),
        tail: Vec::new(),
        tail_stats: cfg.tail_moments.then(|| TailStats::new(d)),
        diverged: None,
        max_example_loss: f64::NEG_INFINITY,
    };
    let logger = Logger { problem, examples, oracle, cfg, factor, w0 };
    logger.log(0, &w, &mut rec)?;
    if rec.diverged.is_some() {
        return Ok(rec);
    }

    let mut buf = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut noise: Option<NoiseFactor> = None;
    for t in 1..=cfg.steps {
        let eta = cfg.lr.at(t - 1);
        match cfg.mode {
            Mode::Sgd => {
                if b == n {
                    gradstats::batch_mean_gradient_into(problem, w.as_slice(), examples, 0..n, &mut buf, &mut grad);
                } else {
                    let batch = index::sample(&mut batch_rng, n, b);
                    gradstats::batch_mean_gradient_into(problem, w.as_slice(), examples, batch.iter(), &mut buf, &mut grad);
                }
                descend(w.as_mut_slice(), &grad, eta);
            }
            Mode::Sde => {
                if (t - 1) % cfg.cov_refresh == 0 {
                    noise = noise_factor(problem, &w, examples, b, cfg.floor, cfg.matrix_cap)?;
                }
                gradstats::batch_mean_gradient_into(problem, w.as_slice(), examples, 0..n, &mut buf, &mut grad);
                descend(w.as_mut_slice(), &grad, eta);
                if let Some(f) = &noise {
                    w.axpy(eta, &f.sample(&mut noise_rng), 1.0);
                }
            }
            Mode::Gld => {
                gradstats::batch_mean_gradient_into(problem, w.as_slice(), examples, 0..n, &mut buf, &mut grad);
                descend(w.as_mut_slice(), &grad, eta);
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut noise_rng));
                w.axpy(eta, &z, 1.0);
            }
        }
        if w.iter().any(|x| !x.is_finite()) {
            rec.diverged = Some(Divergence { step: t, loss: f64::NAN });
            break;
        }
        if t > cfg.burn_in {
            if let Some(ts) = rec.tail_stats.as_mut() {
                ts.push(&w);
            }
            if cfg.tail_every > 0 && (t - cfg.burn_in) % cfg.tail_every == 0 {
                rec.tail.push(w.clone());
            }
        }
        if t % cfg.log_every == 0 || t == cfg.steps {
            logger.log(t, &w, &mut rec)?;
            if rec.diverged.is_some() {
                break;
            }
        }
    }
    rec.w_final = w;
    Ok(rec)
}

/// Trains on the sub-sample `S_J` with the same seeds as the full run.
pub fn loo_train(
    problem: &dyn Problem,
    dataset: &Dataset,
    oracle: Option<&Dataset>,
    subset: &[usize],
    cfg: &TrainConfig,
) -> Result<TrajectoryRecord> {
    gradstats::validate_subset(subset, dataset.len(), cfg.b)?;
    train_run(problem, &dataset.subset(subset), oracle, cfg)
}

/// Seeds `0..count` of a derived family.
pub fn seed_family(base: u64, stream: u64, count: usize) -> Vec<u64> {
    let root = rng::derive_seed(base, stream);
    (0..count as u64).map(|k| rng::derive_seed(root, k)).collect()
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub dataset_index: usize,
    pub run_index: usize,
    pub dataset_seed: u64,
    pub run_seed: u64,
    pub record: TrajectoryRecord,
}

impl EnsembleRun {
    pub fn w_final(&self) -> &ParamVector {
        &self.record.w_final
    }

    pub fn terminal_train_loss(&self) -> f64 {
        self.record.final_row().map_or(f64::NAN, |r| r.train_loss)
    }
}

#[derive(Debug, Clone)]
pub struct TerminalEnsemble {
    pub runs: Vec<EnsembleRun>,
    pub datasets: Vec<Dataset>,
    pub config: TrainConfig,
}

impl TerminalEnsemble {
    pub fn n_datasets(&self) -> usize {
        self.datasets.len()
    }

    /// Runs grouped by dataset index, in run-index order.
    pub fn groups(&self) -> Vec<Vec<&EnsembleRun>> {
        let mut g: Vec<Vec<&EnsembleRun>> = vec![Vec::new(); self.datasets.len()];
        for r in &self.runs {
            g[r.dataset_index].push(r);
        }
        g
    }

    pub fn diverged_count(&self) -> usize {
        self.runs.iter().filter(|r| r.record.diverged.is_some()).count()
    }

    pub fn terminal_weights(&self) -> Vec<ParamVector> {
        self.runs.iter().map(|r| r.record.w_final.clone()).collect()
    }
}

/// Shape of a terminal ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsemblePlan {
    /// Training-set size.
    pub n: usize,
    pub n_datasets: usize,
    pub n_runs: usize,
    /// Dataset and run seeds are derived from this.
    pub base_seed: u64,
}

/// Trains `n_datasets × n_runs` independent runs. Runs execute in parallel
/// and are returned in (dataset, run) order.
pub fn run_ensemble(
    problem: &dyn Problem,
    spec: &problems::DataSpec,
    oracle: Option<&Dataset>,
    cfg: &TrainConfig,
    plan: &EnsemblePlan,
) -> Result<TerminalEnsemble> {
    let EnsemblePlan { n, n_datasets, n_runs, base_seed } = *plan;
    if n_datasets == 0 || n_runs == 0 {
        return Err(Error::Config("ensemble needs at least one dataset seed and one run seed".into()));
    }
    let dataset_seeds = seed_family(base_seed, rng::stream::DATASET_SEED, n_datasets);
    let run_seeds = seed_family(base_seed, rng::stream::RUN_SEED, n_runs);
    let datasets = dataset_seeds
        .iter()
        .map(|&s| problems::generate_dataset(spec, s, n))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..n_datasets).flat_map(|i| (0..n_runs).map(move |j| (i, j))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(i, j)| {
            let mut c = cfg.clone();
            c.seed = run_seeds[j];
            let record = train_run(problem, &datasets[i], oracle, &c)?;
            Ok(EnsembleRun { dataset_index: i, run_index: j, dataset_seed: dataset_seeds[i], run_seed: run_seeds[j], record })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TerminalEnsemble { runs, datasets, config: cfg.clone() })
}
