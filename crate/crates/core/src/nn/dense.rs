use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fully connected layer `y = W x + b`, `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((output, input), |_| T::of(rng.gen_range(-bound..bound))),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array1<T>) -> Result<Array1<T>> {
        if x.len() != self.weight.ncols() {
            return Err(Error::shape(format!("dense expects {} inputs, got {}", self.weight.ncols(), x.len())));
        }
        Ok(self.weight.dot(x) + &self.bias)
    }

    pub fn backward(&self, x: &Array1<T>, grad_out: &Array1<T>, grad: &mut Dense<T>) -> Array1<T> {
        for (i, &g) in grad_out.iter().enumerate() {
            for (j, &xv) in x.iter().enumerate() {
                grad.weight[[i, j]] += g * xv;
            }
            grad.bias[i] += g;
        }
        self.weight.t().dot(grad_out)
    }
}
