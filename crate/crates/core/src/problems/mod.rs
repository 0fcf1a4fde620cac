//! Differentiable learning problems and their synthetic data distributions.
//!
//! Every problem family knows its data-generating distribution, so
//! population quantities are either analytic (quadratic) or estimated from a
//! large held-out oracle sample drawn from the same distribution.

mod logistic;
mod mlp;
mod quadratic;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ParamVector, SymmetricMatrix};
use crate::rng::{self, Rng};

pub use logistic::LogisticProblem;
pub use mlp::MlpProblem;
pub use quadratic::QuadraticProblem;

/// One data point `z`.
///
/// `label` is unused by the quadratic family, `±1` for logistic regression
/// and the class index for the MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub seed: u64,
    pub spec: DataSpec,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// The sub-sample indexed by `subset`, in the given order.
    pub fn subset(&self, subset: &[usize]) -> Dataset {
        Dataset {
            examples: subset.iter().map(|&i| self.examples[i].clone()).collect(),
            seed: self.seed,
            spec: self.spec.clone(),
        }
    }
}

fn default_oracle_size() -> usize {
    10_000
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

fn default_class_balance() -> f64 {
    0.5
}

/// Parameters of a synthetic data distribution together with the model that
/// is fit to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub family: Family,
    #[serde(default = "default_oracle_size")]
    pub population_oracle_size: usize,
    /// Sub-Gaussian constant `R`; bounds use 1 when absent.
    #[serde(default)]
    pub subgaussian_r: Option<f64>,
    /// Loss range `[0, M]`; bounds use 1 when absent.
    #[serde(default)]
    pub loss_bound_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Family {
    /// `l(w, z) = ½ (w - z)ᵀ A (w - z)` with `z ~ N(z_mean, z_cov)`.
    QuadraticGaussian {
        a: Vec<Vec<f64>>,
        z_mean: Vec<f64>,
        z_cov: Vec<Vec<f64>>,
    },
    /// Binary logistic regression; `x | y ~ N(y·mean, noise_std² I)`,
    /// `P(y = +1) = class_balance`.
    LogisticTwoGaussians {
        mean: Vec<f64>,
        #[serde(default = "default_one")]
        noise_std: f64,
        #[serde(default = "default_class_balance")]
        class_balance: f64,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default)]
        l2: f64,
    },
    /// One-hidden-layer tanh network with softmax cross-entropy, fit to
    /// labels produced by a random teacher network of the same shape.
    MlpTeacher {
        input_dim: usize,
        hidden: usize,
        classes: usize,
        #[serde(default = "default_one")]
        input_std: f64,
        #[serde(default = "default_one")]
        teacher_scale: f64,
        #[serde(default)]
        teacher_seed: u64,
        /// Probability of replacing the teacher label by a uniform class.
        #[serde(default)]
        label_noise: f64,
        #[serde(default)]
        l2: f64,
    },
}

impl DataSpec {
    pub fn new(family: Family) -> Self {
        DataSpec { family, population_oracle_size: default_oracle_size(), subgaussian_r: None, loss_bound_m: None }
    }

    pub fn quadratic(a: &SymmetricMatrix, z_mean: &[f64], z_cov: &SymmetricMatrix) -> Self {
        DataSpec::new(Family::QuadraticGaussian { a: a.to_rows(), z_mean: z_mean.to_vec(), z_cov: z_cov.to_rows() })
    }

    pub fn logistic(mean: Vec<f64>, noise_std: f64) -> Self {
        DataSpec::new(Family::LogisticTwoGaussians { mean, noise_std, class_balance: 0.5, bias: true, l2: 0.0 })
    }

    pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Self {
        DataSpec::new(Family::MlpTeacher {
            input_dim,
            hidden,
            classes,
            input_std: 1.0,
            teacher_scale: 1.0,
            teacher_seed: 0,
            label_noise: 0.0,
            l2: 0.0,
        })
    }

    pub fn with_oracle_size(mut self, n_pop: usize) -> Self {
        self.population_oracle_size = n_pop;
        self
    }

    pub fn r(&self) -> f64 {
        self.subgaussian_r.unwrap_or(1.0)
    }

    pub fn m(&self) -> f64 {
        self.loss_bound_m.unwrap_or(1.0)
    }

    /// Builds the model for this distribution, validating all parameters.
    pub fn build(&self) -> Result<Box<dyn Problem>> {
        if let Some(r) = self.subgaussian_r {
            positive("subgaussian_r", r)?;
        }
        if let Some(m) = self.loss_bound_m {
            positive("loss_bound_m", m)?;
        }
        Ok(match &self.family {
            Family::QuadraticGaussian { .. } => Box::new(QuadraticProblem::from_spec(self)?),
            Family::LogisticTwoGaussians { .. } => Box::new(LogisticProblem::from_spec(self)?),
            Family::MlpTeacher { .. } => Box::new(MlpProblem::from_spec(self)?),
        })
    }
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {x}")))
    }
}

/// A per-example differentiable loss `l(w, z)`.
///
/// Slice-based methods are the primitive ones; they are called in the inner
/// training loops and must not allocate more than a few small buffers.
pub trait Problem: Send + Sync {
    fn dim(&self) -> usize;

    fn loss(&self, w: &[f64], z: &Example) -> f64;

    /// Writes `∇_w l(w, z)` into `out` (overwriting it).
    fn grad_into(&self, w: &[f64], z: &Example, out: &mut [f64]);

    /// Adds `scale · ∇²_w l(w, z) · v` into `out`.
    fn hvp_add(&self, w: &[f64], z: &Example, v: &[f64], scale: f64, out: &mut [f64]);

    /// Mean Hessian over `examples` when it has a cheap closed form.
    fn exact_hessian(&self, _w: &ParamVector, _examples: &[Example]) -> Option<SymmetricMatrix> {
        None
    }

    /// 1 if `w` classifies `z` correctly, 0 otherwise; `None` for
    /// non-classification problems.
    fn correct(&self, _w: &[f64], _z: &Example) -> Option<bool> {
        None
    }

    /// Starting point of training when the config does not override it.
    fn default_init(&self, seed: u64) -> ParamVector;

    fn grad(&self, w: &ParamVector, z: &Example) -> ParamVector {
        let mut out = DVector::zeros(self.dim());
        self.grad_into(w.as_slice(), z, out.as_mut_slice());
        out
    }

    /// Mean Hessian-vector product over `examples`.
    fn hvp(&self, w: &ParamVector, examples: &[Example], v: &ParamVector) -> ParamVector {
        let mut out = DVector::zeros(self.dim());
        if examples.is_empty() {
            return out;
        }
        let scale = 1.0 / examples.len() as f64;
        for z in examples {
            self.hvp_add(w.as_slice(), z, v.as_slice(), scale, out.as_mut_slice());
        }
        out
    }
}

/// Mean loss over `examples`.
pub fn mean_loss(problem: &dyn Problem, w: &ParamVector, examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let s: f64 = examples.iter().map(|z| problem.loss(w.as_slice(), z)).sum();
    s / examples.len() as f64
}

/// Fraction of correctly classified examples, if the problem is a classifier.
pub fn accuracy(problem: &dyn Problem, w: &ParamVector, examples: &[Example]) -> Option<f64> {
    let mut hits = 0usize;
    for z in examples {
        hits += problem.correct(w.as_slice(), z)? as usize;
    }
    Some(hits as f64 / examples.len().max(1) as f64)
}

/// Dense mean Hessian: the closed form if available, otherwise assembled
/// column by column from Hessian-vector products.
pub fn hessian_matrix(problem: &dyn Problem, w: &ParamVector, examples: &[Example]) -> SymmetricMatrix {
    if let Some(h) = problem.exact_hessian(w, examples) {
        return h;
    }
    let d = problem.dim();
    let mut m = DMatrix::zeros(d, d);
    let mut e = DVector::zeros(d);
    for j in 0..d {
        e[j] = 1.0;
        m.set_column(j, &problem.hvp(w, examples, &e));
        e[j] = 0.0;
    }
    SymmetricMatrix::symmetrize(m)
}

/// Draws `n` i.i.d. examples. Draws are sequential, so a dataset of size `n`
/// is a prefix of the dataset of size `n + 1` with the same seed.
pub fn generate_dataset(spec: &DataSpec, seed: u64, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let sampler = Sampler::new(spec)?;
    let mut rng = rng::rng_for(seed, rng::stream::DATASET);
    let examples = (0..n).map(|_| sampler.draw(&mut rng)).collect();
    Ok(Dataset { examples, seed, spec: spec.clone() })
}

/// A held-out sample of `population_oracle_size` draws from the data
/// distribution, on a seed stream disjoint from every training dataset.
pub fn population_oracle_sample(spec: &DataSpec, seed: u64) -> Result<Dataset> {
    if spec.population_oracle_size == 0 {
        return Err(Error::Config("population_oracle_size must be at least 1".into()));
    }
    let sampler = Sampler::new(spec)?;
    let mut rng = rng::rng_for(seed, rng::stream::ORACLE);
    let examples = (0..spec.population_oracle_size).map(|_| sampler.draw(&mut rng)).collect();
    Ok(Dataset { examples, seed, spec: spec.clone() })
}

/// Population gradient, population gradient-noise covariance and Hessian of
/// the quadratic family, in closed form.
pub fn quadratic_population_moments(
    spec: &DataSpec,
    w: &ParamVector,
) -> Result<(ParamVector, SymmetricMatrix, SymmetricMatrix)> {
    let q = match &spec.family {
        Family::QuadraticGaussian { .. } => QuadraticProblem::from_spec(spec)?,
        _ => return Err(Error::Capability("population moments are analytic only for the quadratic family".into())),
    };
    q.population_moments(w)
}

enum Sampler {
    Quadratic { mean: DVector<f64>, factor: DMatrix<f64> },
    Logistic { mean: Vec<f64>, noise_std: f64, class_balance: f64 },
    Mlp(Box<MlpProblem>, f64),
}

impl Sampler {
    fn new(spec: &DataSpec) -> Result<Self> {
        Ok(match &spec.family {
            Family::QuadraticGaussian { .. } => {
                let q = QuadraticProblem::from_spec(spec)?;
                Sampler::Quadratic { mean: q.z_mean().clone(), factor: q.z_factor().clone() }
            }
            Family::LogisticTwoGaussians { mean, noise_std, class_balance, .. } => {
                LogisticProblem::from_spec(spec)?;
                Sampler::Logistic { mean: mean.clone(), noise_std: *noise_std, class_balance: *class_balance }
            }
            Family::MlpTeacher { input_std, .. } => Sampler::Mlp(Box::new(MlpProblem::from_spec(spec)?), *input_std),
        })
    }

    fn draw(&self, rng: &mut Rng) -> Example {
        match self {
            Sampler::Quadratic { mean, factor } => {
                let eps = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
                let z = mean + factor * eps;
                Example { features: z.as_slice().to_vec(), label: 0.0 }
            }
            Sampler::Logistic { mean, noise_std, class_balance } => {
                let y = if rng.random::<f64>() < *class_balance { 1.0 } else { -1.0 };
                let features = mean
                    .iter()
                    .map(|&m| {
                        let e: f64 = StandardNormal.sample(rng);
                        y * m + noise_std * e
                    })
                    .collect();
                Example { features, label: y }
            }
            Sampler::Mlp(p, input_std) => {
                let features: Vec<f64> = (0..p.input_dim())
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(rng);
                        input_std * e
                    })
                    .collect();
                let u: f64 = rng.random();
                let flip_class = rng.random_range(0..p.classes());
                let label = if u < p.label_noise() { flip_class } else { p.teacher_label(&features) };
                Example { features, label: label as f64 }
            }
        }
    }
}

/// Lower-triangular-free PSD square root used for sampling `N(m, S)` with a
/// possibly singular `S`.
fn psd_factor(s: &SymmetricMatrix, what: &str) -> Result<DMatrix<f64>> {
    let (vals, vecs) = s.eigen().map_err(|e| Error::Config(format!("{what}: {e}")))?;
    let scale = vals.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let tol = 1e-12 * scale.max(1.0);
    let mut roots = vals.clone();
    for r in roots.iter_mut() {
        if *r < -tol {
            return Err(Error::Config(format!("{what} is not positive semi-definite (eigenvalue {r})")));
        }
        *r = r.max(0.0).sqrt();
    }
    Ok(&vecs * DMatrix::from_diagonal(&roots))
}

fn square_matrix(rows: &[Vec<f64>], d: usize, what: &str) -> Result<SymmetricMatrix> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Config(format!("{what} must be a {d}x{d} matrix")));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!("{what} has non-finite entries")));
    }
    for i in 0..d {
        for j in 0..i {
            let (a, b) = (rows[i][j], rows[j][i]);
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::Config(format!("{what} must be symmetric")));
            }
        }
    }
    SymmetricMatrix::from_rows(rows)
}
