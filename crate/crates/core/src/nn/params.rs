//! Named parameter traversal, used by the optimizer, checkpoints and checksums.

use sha2::{Digest, Sha256};

use super::conv::{Conv2d, ConvTranspose2d};
use super::dense::Dense;
use crate::scalar::Scalar;

pub trait Params<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! weight_bias_params {
    ($ty:ident) => {
        impl<T: Scalar> Params<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[T])) {
                f(join(prefix, "weight"), self.weight.as_slice().expect("standard layout"));
                f(join(prefix, "bias"), self.bias.as_slice().expect("standard layout"));
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T])) {
                f(join(prefix, "weight"), self.weight.as_slice_mut().expect("standard layout"));
                f(join(prefix, "bias"), self.bias.as_slice_mut().expect("standard layout"));
            }
        }
    };
}

weight_bias_params!(Conv2d);
weight_bias_params!(ConvTranspose2d);
weight_bias_params!(Dense);

pub fn param_count<T: Scalar, M: Params<T> + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, s| n += s.len());
    n
}

pub fn flatten<T: Scalar, M: Params<T> + ?Sized>(m: &M) -> Vec<T> {
    let mut out = Vec::new();
    m.visit("", &mut |_, s| out.extend_from_slice(s));
    out
}

/// Overwrites all parameters from a flat vector in traversal order.
pub fn assign_flat<T: Scalar, M: Params<T> + ?Sized>(m: &mut M, flat: &[T]) -> bool {
    if flat.len() != param_count(m) {
        return false;
    }
    let mut off = 0;
    m.visit_mut("", &mut |_, s| {
        s.copy_from_slice(&flat[off..off + s.len()]);
        off += s.len();
    });
    true
}

pub fn zeroed<T: Scalar, M: Params<T> + Clone>(m: &M) -> M {
    let mut z = m.clone();
    z.visit_mut("", &mut |_, s| s.iter_mut().for_each(|v| *v = T::zero()));
    z
}

/// Hex SHA-256 over the little-endian bytes of every parameter.
pub fn checksum<T: Scalar, M: Params<T> + ?Sized>(m: &M) -> String {
    let mut h = Sha256::new();
    m.visit("", &mut |name, s| {
        h.update(name.as_bytes());
        for v in s {
            h.update(v.to_le_bytes_vec());
        }
    });
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-7, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update using `grads * grad_scale`.
    pub fn step<M: Params<T> + ?Sized>(&mut self, params: &mut M, grads: &M, grad_scale: f64) {
        let g = flatten(grads);
        if self.m.len() != g.len() {
            self.m = vec![T::zero(); g.len()];
            self.v = vec![T::zero(); g.len()];
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let lr_t = T::of(self.lr * c2.sqrt() / c1);
        let eps = T::of(self.eps);
        let scale = T::of(grad_scale);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        params.visit_mut("", &mut |_, p| {
            for (k, pv) in p.iter_mut().enumerate() {
                let i = off + k;
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                *pv -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
            off += p.len();
        });
    }
}
