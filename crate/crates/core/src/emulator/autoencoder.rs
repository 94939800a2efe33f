//! Fire-state autoencoder: a fixed linear encoder (2×2 average pool, then
//! space-to-depth with block 4) and a small trained upsampling decoder.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use super::{ClampGrad, AE_LATENT, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::nn::ops::{avg_pool2, depth_to_space, leaky_relu, leaky_relu_backward, space_to_depth};
use crate::nn::params::join;
use crate::nn::{Conv2d, ConvGeom, ConvTranspose2d, Params};
use crate::scalar::Scalar;

const S2D_BLOCK: usize = 4;

/// `(H, W)` state to `(16, H/8, W/8)` latent. Linear, no parameters.
pub fn ae_encode<T: Scalar>(state: &Array2<T>) -> Result<Array3<T>> {
    let (h, w) = state.dim();
    if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("fire state {h}x{w} is not a nonzero multiple of {DOWNSAMPLE}")));
    }
    let pooled = avg_pool2(&state.view().insert_axis(Axis(0)).to_owned())?;
    space_to_depth(&pooled, S2D_BLOCK)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder<T> {
    /// 1 → hidden channels, kernel 4, stride 2: restores full resolution.
    pub up: ConvTranspose2d<T>,
    /// hidden → 1 channel, 3×3.
    pub refine: Conv2d<T>,
    /// Set once trained; the emulator trainer refuses unfrozen weights.
    pub frozen: bool,
}

/// Activations kept for the decoder backward pass.
#[derive(Debug, Clone)]
pub struct DecodeCache<T> {
    half: Array3<T>,
    hidden: Array3<T>,
    pre_clamp: Array3<T>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, hidden: usize) -> Self {
        Self {
            up: ConvTranspose2d::new(rng, 1, hidden, ConvGeom { k: 4, stride: 2, pad: 1 }),
            refine: Conv2d::new(rng, hidden, 1, ConvGeom { k: 3, stride: 1, pad: 1 }),
            frozen: false,
        }
    }

    pub fn encode(&self, state: &Array2<T>) -> Result<Array3<T>> {
        ae_encode(state)
    }

    pub fn decode(&self, latent: &Array3<T>) -> Result<Array2<T>> {
        Ok(self.decode_cached(latent)?.0)
    }

    pub fn decode_cached(&self, latent: &Array3<T>) -> Result<(Array2<T>, DecodeCache<T>)> {
        if latent.dim().0 != AE_LATENT {
            return Err(Error::shape(format!("latent has {} channels, expected {AE_LATENT}", latent.dim().0)));
        }
        let half = depth_to_space(latent, S2D_BLOCK)?;
        let hidden = leaky_relu(&self.up.forward(&half)?);
        let pre_clamp = self.refine.forward(&hidden)?;
        let out = pre_clamp.index_axis(Axis(0), 0).mapv(|v| v.max(T::zero()).min(T::one()));
        Ok((out, DecodeCache { half, hidden, pre_clamp }))
    }

    /// Returns the latent gradient; accumulates decoder gradients into `grads` when given.
    pub fn decode_backward(
        &self,
        cache: &DecodeCache<T>,
        grad_out: &Array2<T>,
        mut grads: Option<&mut Autoencoder<T>>,
        clamp: ClampGrad,
    ) -> Result<Array3<T>> {
        let mut g = grad_out.view().insert_axis(Axis(0)).to_owned();
        if clamp == ClampGrad::Exact {
            g.zip_mut_with(&cache.pre_clamp, |gv, &p| {
                if p < T::zero() || p > T::one() {
                    *gv = T::zero();
                }
            });
        }
        let gh = self
            .refine
            .backward(&cache.hidden, &g, grads.as_deref_mut().map(|a| &mut a.refine), true)?
            .expect("input grad requested");
        let gh = leaky_relu_backward(&cache.hidden, &gh);
        let ghalf = self.up.backward(&cache.half, &gh, grads.map(|a| &mut a.up), true)?.expect("input grad requested");
        space_to_depth(&ghalf, S2D_BLOCK)
    }

    /// Mean absolute reconstruction error of one state.
    pub fn reconstruction_mae(&self, state: &Array2<T>) -> Result<f64> {
        let y = self.decode(&self.encode(state)?)?;
        Ok(y.iter().zip(state.iter()).map(|(a, b)| (*a - *b).abs().as_f64()).sum::<f64>() / state.len() as f64)
    }
}

impl<T: Scalar> Params<T> for Autoencoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[T])) {
        self.up.visit(&join(prefix, "up"), f);
        self.refine.visit(&join(prefix, "refine"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T])) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.refine.visit_mut(&join(prefix, "refine"), f);
    }
}
