use nalgebra::{DMatrix, DVector};

use super::{DataSpec, Example, Family, Problem};
use crate::error::{Error, Result};
use crate::linalg::{ParamVector, SymmetricMatrix};

/// Binary logistic regression with labels in `{-1, +1}`:
/// `l(w, (x, y)) = log(1 + exp(-y wᵀx)) + (l2/2) ‖w‖²`.
///
/// With `bias` the last parameter multiplies a constant feature 1.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    features: usize,
    bias: bool,
    l2: f64,
}

pub(super) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub(super) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LogisticProblem {
    pub fn from_spec(spec: &DataSpec) -> Result<Self> {
        let Family::LogisticTwoGaussians { mean, noise_std, class_balance, bias, l2 } = &spec.family else {
            return Err(Error::Capability("not a logistic spec".into()));
        };
        if mean.is_empty() || mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("logistic mean must be a non-empty finite vector".into()));
        }
        if !(*noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::Config(format!("logistic noise_std must be >= 0, got {noise_std}")));
        }
        if !(0.0..=1.0).contains(class_balance) {
            return Err(Error::Config(format!("class_balance must lie in [0, 1], got {class_balance}")));
        }
        if !(*l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::Config(format!("l2 must be >= 0, got {l2}")));
        }
        Ok(LogisticProblem { features: mean.len(), bias: *bias, l2: *l2 })
    }

    fn margin(&self, w: &[f64], z: &Example) -> f64 {
        let mut s: f64 = w[..self.features].iter().zip(&z.features).map(|(a, b)| a * b).sum();
        if self.bias {
            s += w[self.features];
        }
        s
    }

    fn x(&self, z: &Example, k: usize) -> f64 {
        if k < self.features {
            z.features[k]
        } else {
            1.0
        }
    }
}

impl Problem for LogisticProblem {
    fn dim(&self) -> usize {
        self.features + self.bias as usize
    }

    fn loss(&self, w: &[f64], z: &Example) -> f64 {
        let reg = if self.l2 > 0.0 { 0.5 * self.l2 * w.iter().map(|x| x * x).sum::<f64>() } else { 0.0 };
        softplus(-z.label * self.margin(w, z)) + reg
    }

    fn grad_into(&self, w: &[f64], z: &Example, out: &mut [f64]) {
        let y = z.label;
        let coef = -y * sigmoid(-y * self.margin(w, z));
        for (k, o) in out.iter_mut().enumerate() {
            *o = coef * self.x(z, k) + self.l2 * w[k];
        }
    }

    fn hvp_add(&self, w: &[f64], z: &Example, v: &[f64], scale: f64, out: &mut [f64]) {
        let s = self.margin(w, z);
        let curv = sigmoid(s) * sigmoid(-s);
        let xv: f64 = (0..self.dim()).map(|k| self.x(z, k) * v[k]).sum();
        for (k, o) in out.iter_mut().enumerate() {
            *o += scale * (curv * xv * self.x(z, k) + self.l2 * v[k]);
        }
    }

    fn exact_hessian(&self, w: &ParamVector, examples: &[Example]) -> Option<SymmetricMatrix> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for z in examples {
            let s = self.margin(w.as_slice(), z);
            let curv = sigmoid(s) * sigmoid(-s);
            let x = DVector::from_fn(d, |k, _| self.x(z, k));
            h.ger(curv, &x, &x, 1.0);
        }
        h /= examples.len().max(1) as f64;
        for k in 0..d {
            h[(k, k)] += self.l2;
        }
        Some(SymmetricMatrix::symmetrize(h))
    }

    fn correct(&self, w: &[f64], z: &Example) -> Option<bool> {
        let pred = if self.margin(w, z) >= 0.0 { 1.0 } else { -1.0 };
        Some(pred == z.label)
    }

    fn default_init(&self, _seed: u64) -> ParamVector {
        DVector::zeros(self.dim())
    }
}
