use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use super::{DataSpec, Example, Family, Problem};
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::rng;

/// One-hidden-layer tanh network with softmax cross-entropy.
///
/// Parameter layout (flat, row-major blocks): `W1` (hidden × input),
/// `b1` (hidden), `W2` (classes × hidden), `b2` (classes).
#[derive(Debug, Clone)]
pub struct MlpProblem {
    input: usize,
    hidden: usize,
    classes: usize,
    l2: f64,
    label_noise: f64,
    teacher: Vec<f64>,
}

struct Forward {
    hid: Vec<f64>,
    probs: Vec<f64>,
    logits: Vec<f64>,
}

impl MlpProblem {
    pub fn from_spec(spec: &DataSpec) -> Result<Self> {
        let Family::MlpTeacher { input_dim, hidden, classes, input_std, teacher_scale, teacher_seed, label_noise, l2 } =
            &spec.family
        else {
            return Err(Error::Capability("not an mlp spec".into()));
        };
        if *input_dim == 0 || *hidden == 0 || *classes < 2 {
            return Err(Error::Config("mlp needs input_dim >= 1, hidden >= 1, classes >= 2".into()));
        }
        if !(*input_std >= 0.0 && input_std.is_finite()) || !(*teacher_scale > 0.0 && teacher_scale.is_finite()) {
            return Err(Error::Config("mlp input_std must be >= 0 and teacher_scale > 0".into()));
        }
        if !(0.0..=1.0).contains(label_noise) {
            return Err(Error::Config(format!("label_noise must lie in [0, 1], got {label_noise}")));
        }
        if !(*l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::Config(format!("l2 must be >= 0, got {l2}")));
        }
        let mut p = MlpProblem {
            input: *input_dim,
            hidden: *hidden,
            classes: *classes,
            l2: *l2,
            label_noise: *label_noise,
            teacher: Vec::new(),
        };
        p.teacher = p.random_weights(rng::derive_seed(*teacher_seed, rng::stream::TEACHER), *teacher_scale);
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn label_noise(&self) -> f64 {
        self.label_noise
    }

    /// Teacher network class for input `x`.
    pub fn teacher_label(&self, x: &[f64]) -> usize {
        argmax(&self.forward(&self.teacher, x).logits)
    }

    fn random_weights(&self, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = rng::rng_for(seed, rng::stream::INIT);
        let s1 = scale / (self.input as f64).sqrt();
        let s2 = scale / (self.hidden as f64).sqrt();
        let mut w = Vec::with_capacity(self.dim());
        let mut draw = |n: usize, s: f64, w: &mut Vec<f64>| {
            for _ in 0..n {
                let e: f64 = StandardNormal.sample(&mut rng);
                w.push(s * e);
            }
        };
        draw(self.hidden * self.input, s1, &mut w);
        w.extend(std::iter::repeat_n(0.0, self.hidden));
        draw(self.classes * self.hidden, s2, &mut w);
        w.extend(std::iter::repeat_n(0.0, self.classes));
        w
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.classes * self.hidden;
        (b1, w2, b2)
    }

    fn forward(&self, w: &[f64], x: &[f64]) -> Forward {
        let (ob1, ow2, ob2) = self.offsets();
        let hid: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &w[j * self.input..(j + 1) * self.input];
                let a: f64 = row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + w[ob1 + j];
                a.tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                let row = &w[ow2 + c * self.hidden..ow2 + (c + 1) * self.hidden];
                row.iter().zip(&hid).map(|(p, q)| p * q).sum::<f64>() + w[ob2 + c]
            })
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&o| (o - mx).exp()).collect();
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
        Forward { hid, probs, logits }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Problem for MlpProblem {
    fn dim(&self) -> usize {
        self.hidden * self.input + self.hidden + self.classes * self.hidden + self.classes
    }

    fn loss(&self, w: &[f64], z: &Example) -> f64 {
        let f = self.forward(w, &z.features);
        let mx = f.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + f.logits.iter().map(|&o| (o - mx).exp()).sum::<f64>().ln();
        let reg = if self.l2 > 0.0 { 0.5 * self.l2 * w.iter().map(|x| x * x).sum::<f64>() } else { 0.0 };
        lse - f.logits[z.label as usize] + reg
    }

    fn grad_into(&self, w: &[f64], z: &Example, out: &mut [f64]) {
        let (ob1, ow2, ob2) = self.offsets();
        let x = &z.features;
        let f = self.forward(w, x);
        let mut d_out = f.probs;
        d_out[z.label as usize] -= 1.0;
        for c in 0..self.classes {
            for j in 0..self.hidden {
                out[ow2 + c * self.hidden + j] = d_out[c] * f.hid[j];
            }
            out[ob2 + c] = d_out[c];
        }
        for j in 0..self.hidden {
            let dh: f64 = (0..self.classes).map(|c| w[ow2 + c * self.hidden + j] * d_out[c]).sum();
            let da = dh * (1.0 - f.hid[j] * f.hid[j]);
            for i in 0..self.input {
                out[j * self.input + i] = da * x[i];
            }
            out[ob1 + j] = da;
        }
        if self.l2 > 0.0 {
            for (o, wi) in out.iter_mut().zip(w) {
                *o += self.l2 * wi;
            }
        }
    }

    fn hvp_add(&self, w: &[f64], z: &Example, v: &[f64], scale: f64, out: &mut [f64]) {
        // Forward-over-reverse (R-operator) pass along direction v.
        let (ob1, ow2, ob2) = self.offsets();
        let (h, k) = (self.hidden, self.classes);
        let x = &z.features;
        let f = self.forward(w, x);
        let mut d_out = f.probs.clone();
        d_out[z.label as usize] -= 1.0;

        let r_hid: Vec<f64> = (0..h)
            .map(|j| {
                let row = &v[j * self.input..(j + 1) * self.input];
                let ra: f64 = row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + v[ob1 + j];
                (1.0 - f.hid[j] * f.hid[j]) * ra
            })
            .collect();
        let r_logits: Vec<f64> = (0..k)
            .map(|c| {
                let mut s = v[ob2 + c];
                for j in 0..h {
                    s += v[ow2 + c * h + j] * f.hid[j] + w[ow2 + c * h + j] * r_hid[j];
                }
                s
            })
            .collect();
        let p_dot: f64 = f.probs.iter().zip(&r_logits).map(|(p, r)| p * r).sum();
        let r_dout: Vec<f64> = (0..k).map(|c| f.probs[c] * (r_logits[c] - p_dot)).collect();

        for c in 0..k {
            for j in 0..h {
                out[ow2 + c * h + j] += scale * (r_dout[c] * f.hid[j] + d_out[c] * r_hid[j]);
            }
            out[ob2 + c] += scale * r_dout[c];
        }
        for j in 0..h {
            let mut dh = 0.0;
            let mut r_dh = 0.0;
            for c in 0..k {
                dh += w[ow2 + c * h + j] * d_out[c];
                r_dh += v[ow2 + c * h + j] * d_out[c] + w[ow2 + c * h + j] * r_dout[c];
            }
            let g = 1.0 - f.hid[j] * f.hid[j];
            let r_da = r_dh * g - 2.0 * dh * f.hid[j] * r_hid[j];
            for i in 0..self.input {
                out[j * self.input + i] += scale * r_da * x[i];
            }
            out[ob1 + j] += scale * r_da;
        }
        if self.l2 > 0.0 {
            for (o, vi) in out.iter_mut().zip(v) {
                *o += scale * self.l2 * vi;
            }
        }
    }

    fn correct(&self, w: &[f64], z: &Example) -> Option<bool> {
        Some(argmax(&self.forward(w, &z.features).logits) == z.label as usize)
    }

    fn default_init(&self, seed: u64) -> ParamVector {
        DVector::from_vec(self.random_weights(seed, 1.0))
    }
}
