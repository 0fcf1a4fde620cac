use nalgebra::{DMatrix, DVector};

use super::{psd_factor, square_matrix, DataSpec, Example, Family, Problem};
use crate::error::{Error, Result};
use crate::linalg::{ParamVector, SymmetricMatrix};

/// `l(w, z) = ½ (w - z)ᵀ A (w - z)`.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    a: SymmetricMatrix,
    z_mean: DVector<f64>,
    z_cov: SymmetricMatrix,
    z_factor: DMatrix<f64>,
}

impl QuadraticProblem {
    pub fn from_spec(spec: &DataSpec) -> Result<Self> {
        let Family::QuadraticGaussian { a, z_mean, z_cov } = &spec.family else {
            return Err(Error::Capability("not a quadratic spec".into()));
        };
        let d = z_mean.len();
        if d == 0 {
            return Err(Error::Config("quadratic z_mean must be non-empty".into()));
        }
        let a = square_matrix(a, d, "quadratic A")?;
        psd_factor(&a, "quadratic A")?;
        let z_cov = square_matrix(z_cov, d, "quadratic z_cov")?;
        let z_factor = psd_factor(&z_cov, "quadratic z_cov")?;
        if z_mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("quadratic z_mean has non-finite entries".into()));
        }
        Ok(QuadraticProblem { a, z_mean: DVector::from_column_slice(z_mean), z_cov, z_factor })
    }

    pub fn a(&self) -> &SymmetricMatrix {
        &self.a
    }

    pub fn z_mean(&self) -> &DVector<f64> {
        &self.z_mean
    }

    pub fn z_cov(&self) -> &SymmetricMatrix {
        &self.z_cov
    }

    pub(super) fn z_factor(&self) -> &DMatrix<f64> {
        &self.z_factor
    }

    pub fn population_moments(&self, w: &ParamVector) -> Result<(ParamVector, SymmetricMatrix, SymmetricMatrix)> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: w.len() });
        }
        let a = self.a.as_matrix();
        let grad = a * (w - &self.z_mean);
        let gnc = SymmetricMatrix::symmetrize(a * self.z_cov.as_matrix() * a.transpose());
        Ok((grad, gnc, self.a.clone()))
    }

    /// Empirical risk minimizer for positive-definite `A`: the sample mean.
    pub fn erm_solution(&self, examples: &[Example]) -> ParamVector {
        let mut m = DVector::zeros(self.dim());
        for z in examples {
            m += DVector::from_column_slice(&z.features);
        }
        m / examples.len().max(1) as f64
    }
}

impl Problem for QuadraticProblem {
    fn dim(&self) -> usize {
        self.z_mean.len()
    }

    fn loss(&self, w: &[f64], z: &Example) -> f64 {
        let a = self.a.as_matrix();
        let d = self.dim();
        let mut acc = 0.0;
        for j in 0..d {
            let col = a.column(j);
            let mut s = 0.0;
            for i in 0..d {
                s += col[i] * (w[i] - z.features[i]);
            }
            acc += s * (w[j] - z.features[j]);
        }
        0.5 * acc
    }

    fn grad_into(&self, w: &[f64], z: &Example, out: &mut [f64]) {
        let a = self.a.as_matrix();
        for (i, o) in out.iter_mut().enumerate() {
            let col = a.column(i);
            let mut s = 0.0;
            for j in 0..w.len() {
                s += col[j] * (w[j] - z.features[j]);
            }
            *o = s;
        }
    }

    fn hvp_add(&self, _w: &[f64], _z: &Example, v: &[f64], scale: f64, out: &mut [f64]) {
        let a = self.a.as_matrix();
        for (i, o) in out.iter_mut().enumerate() {
            let col = a.column(i);
            let s: f64 = col.iter().zip(v).map(|(x, y)| x * y).sum();
            *o += scale * s;
        }
    }

    fn exact_hessian(&self, _w: &ParamVector, _examples: &[Example]) -> Option<SymmetricMatrix> {
        Some(self.a.clone())
    }

    fn default_init(&self, _seed: u64) -> ParamVector {
        DVector::zeros(self.dim())
    }
}
