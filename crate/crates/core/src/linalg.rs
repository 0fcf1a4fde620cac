//! Dense symmetric / SPD matrix arithmetic, Gaussian divergences and the
//! stationary-covariance solver.
//!
//! Dimensions here are small (tens, at most a few hundred), so everything is
//! dense and goes through a symmetric eigendecomposition. An [`SpdMatrix`]
//! caches its decomposition so that square roots, inverses and log-determinants
//! of the same matrix share one factorization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ParamVector = DVector<f64>;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

/// Default relative eigenvalue floor for SPD regularization.
pub const DEFAULT_EPS_REL: f64 = 1e-8;

/// Floor used when a matrix has no scale of its own (zero trace).
pub const ZERO_SCALE_FLOOR: f64 = 1e-12;

/// A dense symmetric matrix. Symmetry is exact: construction stores
/// `(M + M^T) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidInput(format!(
                "matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let t = m.transpose();
        Ok(SymmetricMatrix((m + t) * 0.5))
    }

    /// Wraps a matrix the caller guarantees to be square. Still symmetrizes.
    pub(crate) fn symmetrize(m: DMatrix<f64>) -> Self {
        debug_assert_eq!(m.nrows(), m.ncols());
        let t = m.transpose();
        SymmetricMatrix((m + t) * 0.5)
    }

    pub fn zeros(d: usize) -> Self {
        SymmetricMatrix(DMatrix::zeros(d, d))
    }

    pub fn identity(d: usize) -> Self {
        SymmetricMatrix(DMatrix::identity(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymmetricMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("matrix rows must all have length d".into()));
        }
        Self::new(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal().iter().copied().collect()
    }

    pub fn scale(&self, s: f64) -> Self {
        SymmetricMatrix(&self.0 * s)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|i| self.0.row(i).iter().copied().collect()).collect()
    }

    /// Eigenvalues (unsorted) and orthonormal eigenvectors as columns.
    pub fn eigen(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if !self.is_finite() {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        let eig = SymmetricEigen::try_new(self.0.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
            .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
        Ok((eig.eigenvalues, eig.eigenvectors))
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let (vals, _) = self.eigen()?;
        let mut v: Vec<f64> = vals.iter().copied().collect();
        v.sort_by(|a, b| b.total_cmp(a));
        Ok(v)
    }

    pub fn max_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigenvalues()?.first().copied().unwrap_or(0.0))
    }
}

impl std::ops::Add for &SymmetricMatrix {
    type Output = SymmetricMatrix;
    fn add(self, rhs: &SymmetricMatrix) -> SymmetricMatrix {
        SymmetricMatrix(&self.0 + &rhs.0)
    }
}

impl std::ops::Sub for &SymmetricMatrix {
    type Output = SymmetricMatrix;
    fn sub(self, rhs: &SymmetricMatrix) -> SymmetricMatrix {
        SymmetricMatrix(&self.0 - &rhs.0)
    }
}

/// How the eigenvalue floor of an SPD regularization is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Floor {
    /// `eps_rel * tr(m) / d`, or [`ZERO_SCALE_FLOOR`] when that is not positive.
    Relative(f64),
    /// A fixed floor in the units of the matrix entries.
    Absolute(f64),
}

impl Default for Floor {
    fn default() -> Self {
        Floor::Relative(DEFAULT_EPS_REL)
    }
}

impl Floor {
    pub fn value_for(&self, m: &SymmetricMatrix) -> f64 {
        match *self {
            Floor::Relative(eps) => {
                let f = eps * m.trace() / m.dim().max(1) as f64;
                if f > 0.0 && f.is_finite() {
                    f
                } else {
                    ZERO_SCALE_FLOOR
                }
            }
            Floor::Absolute(f) => f,
        }
    }

    /// The same rule with the relative/absolute size multiplied by `k`
    /// (used for floor-sensitivity reports).
    pub fn scaled(&self, k: f64) -> Floor {
        match *self {
            Floor::Relative(eps) => Floor::Relative(eps * k),
            Floor::Absolute(f) => Floor::Absolute(f * k),
        }
    }
}

/// A symmetric matrix whose eigenvalues are all at least `floor > 0`.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    base: SymmetricMatrix,
    floor: f64,
    floored: usize,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.base == other.base && self.floor == other.floor
    }
}

impl SpdMatrix {
    /// Regularizes `m` with the default relative floor.
    pub fn regularize(m: &SymmetricMatrix) -> Result<Self> {
        Self::regularize_with(m, Floor::default())
    }

    /// Replaces every eigenvalue below the floor with the floor.
    pub fn regularize_with(m: &SymmetricMatrix, floor: Floor) -> Result<Self> {
        let f = floor.value_for(m);
        Self::with_floor(m, f)
    }

    pub fn with_floor(m: &SymmetricMatrix, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::InvalidInput(format!("eigenvalue floor must be positive, got {floor}")));
        }
        let (mut vals, vecs) = m.eigen()?;
        let mut floored = 0;
        for v in vals.iter_mut() {
            if *v < floor {
                *v = floor;
                floored += 1;
            }
        }
        let base = if floored == 0 {
            m.clone()
        } else {
            SymmetricMatrix::symmetrize(&vecs * DMatrix::from_diagonal(&vals) * vecs.transpose())
        };
        Ok(SpdMatrix { base, floor, floored, eigenvalues: vals, eigenvectors: vecs })
    }

    /// Accepts `m` only if it is already positive definite; no flooring.
    pub fn strict(m: &SymmetricMatrix) -> Result<Self> {
        let (vals, vecs) = m.eigen()?;
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(Error::Domain(format!("matrix is not positive definite (min eigenvalue {min})")));
        }
        Ok(SpdMatrix { base: m.clone(), floor: min, floored: 0, eigenvalues: vals, eigenvectors: vecs })
    }

    pub fn identity(d: usize) -> Self {
        SpdMatrix {
            base: SymmetricMatrix::identity(d),
            floor: 1.0,
            floored: 0,
            eigenvalues: DVector::from_element(d, 1.0),
            eigenvectors: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn matrix(&self) -> &SymmetricMatrix {
        &self.base
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Number of eigenvalues that were raised to the floor.
    pub fn floored_count(&self) -> usize {
        self.floored
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mapped = self.eigenvalues.map(f);
        &self.eigenvectors * DMatrix::from_diagonal(&mapped) * self.eigenvectors.transpose()
    }

    pub fn inverse(&self) -> SymmetricMatrix {
        SymmetricMatrix::symmetrize(self.spectral_map(|x| 1.0 / x))
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let y = self.eigenvectors.tr_mul(v);
        let y = y.zip_map(&self.eigenvalues, |a, l| a / l);
        &self.eigenvectors * y
    }
}

/// Principal square root `R` with `R R = m`, via the eigendecomposition.
pub fn spd_sqrt(m: &SpdMatrix) -> SymmetricMatrix {
    SymmetricMatrix::symmetrize(m.spectral_map(f64::sqrt))
}

/// Sum of log-eigenvalues.
pub fn log_det(m: &SpdMatrix) -> Result<f64> {
    let mut acc = 0.0;
    for &l in m.eigenvalues.iter() {
        if !(l > 0.0) {
            return Err(Error::Domain(format!("log_det of non-positive eigenvalue {l}")));
        }
        acc += l.ln();
    }
    Ok(acc)
}

/// `sum_k log m[k][k]`: the diagonal-only trace-log convention.
pub fn trace_log_diag(m: &SymmetricMatrix) -> Result<f64> {
    let mut acc = 0.0;
    for (k, &x) in m.as_matrix().diagonal().iter().enumerate() {
        if !(x > 0.0) {
            return Err(Error::Domain(format!("diagonal entry {k} is {x}, need > 0")));
        }
        acc += x.ln();
    }
    Ok(acc)
}

/// `(x - y)^T s^{-1} (x - y)`.
pub fn mahalanobis_sq(x: &ParamVector, y: &ParamVector, s: &SpdMatrix) -> Result<f64> {
    check_dim(s.dim(), x.len())?;
    check_dim(s.dim(), y.len())?;
    let diff = x - y;
    Ok(diff.dot(&s.solve(&diff)).max(0.0))
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: ParamVector,
    pub cov: SpdMatrix,
}

impl GaussianDist {
    pub fn new(mean: ParamVector, cov: SpdMatrix) -> Result<Self> {
        check_dim(cov.dim(), mean.len())?;
        Ok(GaussianDist { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(p || q)` between two multivariate Gaussians.
pub fn gaussian_kl(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    if p == q {
        return Ok(0.0);
    }
    let d = p.dim() as f64;
    let q_inv = q.cov.inverse();
    let diff = &p.mean - &q.mean;
    let quad = diff.dot(&q.cov.solve(&diff));
    let tr = q_inv.as_matrix().component_mul(p.cov.matrix().as_matrix()).sum();
    let ld = log_det(&q.cov)? - log_det(&p.cov)?;
    Ok(0.5 * (ld - d + quad + tr))
}

/// Which form of the stationary-covariance equation
/// `Λ H + H Λ - η H Λ H = η C` to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StationaryMode {
    /// Dense solve of the vectorized d²-dimensional linear system.
    General,
    /// `η [H (2I - η H)]^{-1} C`, valid when H and Λ commute.
    Commuting,
    /// `(1/b) (2/η I - H)^{-1}`, valid when additionally H = b·C.
    HessianMatchesGnc,
    /// `η / (2b) I`, valid when additionally 2/η ≫ λ₁(H).
    SmallLr,
}

/// Relative tolerance for treating a curvature eigenvalue as zero.
const ZERO_CURVATURE_TOL: f64 = 1e-12;

fn check_curvature(h: &SymmetricMatrix, eta: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (vals, vecs) = h.eigen()?;
    let limit = 2.0 / eta;
    let scale = vals.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    for &l in vals.iter() {
        if l >= limit {
            return Err(Error::EdgeOfStability { eigenvalue: l, limit });
        }
        if l < -ZERO_CURVATURE_TOL * scale {
            return Err(Error::Domain(format!("Hessian has negative eigenvalue {l}; no stationary covariance")));
        }
        if l.abs() <= ZERO_CURVATURE_TOL * scale {
            return Err(Error::Numerical(format!(
                "stationary system is singular: zero-curvature eigenvalue {l}"
            )));
        }
    }
    Ok((vals, vecs))
}

pub fn solve_stationary_covariance(
    h: &SymmetricMatrix,
    c: &SymmetricMatrix,
    eta: f64,
    mode: StationaryMode,
    b: usize,
) -> Result<SymmetricMatrix> {
    check_dim(h.dim(), c.dim())?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidInput(format!("learning rate must be positive, got {eta}")));
    }
    if b == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let d = h.dim();
    match mode {
        StationaryMode::General => {
            check_curvature(h, eta)?;
            let hm = h.as_matrix();
            let eye = DMatrix::<f64>::identity(d, d);
            let k = hm.kronecker(&eye) + eye.kronecker(hm) - hm.kronecker(hm) * eta;
            // Column-major storage makes `as_slice` the vec() of the matrix.
            let rhs = DVector::from_column_slice(c.as_matrix().as_slice()) * eta;
            let sol = k
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("stationary linear system is singular".into()))?;
            Ok(SymmetricMatrix::symmetrize(DMatrix::from_column_slice(d, d, sol.as_slice())))
        }
        StationaryMode::Commuting => {
            let (vals, vecs) = check_curvature(h, eta)?;
            let inv = vals.map(|l| eta / (l * (2.0 - eta * l)));
            let m = &vecs * DMatrix::from_diagonal(&inv) * vecs.transpose() * c.as_matrix();
            Ok(SymmetricMatrix::symmetrize(m))
        }
        StationaryMode::HessianMatchesGnc => {
            let (vals, vecs) = h.eigen()?;
            let limit = 2.0 / eta;
            if let Some(&l) = vals.iter().find(|&&l| l >= limit) {
                return Err(Error::EdgeOfStability { eigenvalue: l, limit });
            }
            let inv = vals.map(|l| 1.0 / ((limit - l) * b as f64));
            Ok(SymmetricMatrix::symmetrize(&vecs * DMatrix::from_diagonal(&inv) * vecs.transpose()))
        }
        StationaryMode::SmallLr => {
            let lambda1 = h.max_eigenvalue()?;
            if !(2.0 / eta > lambda1) {
                return Err(Error::Stability(format!(
                    "small-lr form needs 2/eta = {} > lambda_1 = {lambda1}",
                    2.0 / eta
                )));
            }
            Ok(SymmetricMatrix::identity(d).scale(eta / (2.0 * b as f64)))
        }
    }
}

/// Frobenius norm of `Λ H + H Λ - η H Λ H - η C`.
pub fn stationary_residual(lambda: &SymmetricMatrix, h: &SymmetricMatrix, c: &SymmetricMatrix, eta: f64) -> f64 {
    let l = lambda.as_matrix();
    let hm = h.as_matrix();
    let r = l * hm + hm * l - hm * l * hm * eta - c.as_matrix() * eta;
    r.norm()
}

/// Log-determinant of a symmetric matrix that is expected to be positive
/// definite, without any flooring.
pub fn log_det_strict(m: &SymmetricMatrix) -> Result<f64> {
    log_det(&SpdMatrix::strict(m)?)
}

/// Sample covariance of vectors around their mean (divisor = count).
pub fn covariance(samples: &[ParamVector]) -> Result<(ParamVector, SymmetricMatrix)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("covariance of an empty sample".into()))?;
    let d = first.len();
    let mut mean = DVector::zeros(d);
    for s in samples {
        check_dim(d, s.len())?;
        mean += s;
    }
    mean /= samples.len() as f64;
    Ok((mean.clone(), scatter_around(samples, &mean)))
}

/// `(1/N) sum (x - c)(x - c)^T`.
pub fn scatter_around(samples: &[ParamVector], center: &ParamVector) -> SymmetricMatrix {
    let d = center.len();
    let mut dev = DMatrix::zeros(d, samples.len());
    for (j, s) in samples.iter().enumerate() {
        dev.set_column(j, &(s - center));
    }
    let n = samples.len().max(1) as f64;
    SymmetricMatrix::symmetrize(&dev * dev.transpose() / n)
}
