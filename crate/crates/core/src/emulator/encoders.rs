//! Outer-network encoders for the static rasters and the per-slice weather.

use ndarray::{s, Array1, Array3};
use rand::Rng;

use crate::dataset::{FORCING_FEATURES, STATIC_CHANNELS, WEATHER_FEATURES};
use crate::error::{Error, Result};
use crate::nn::ops::{broadcast, concat, leaky_relu, leaky_relu_backward, leaky_relu_vec};
use crate::nn::params::join;
use crate::nn::{Conv2d, ConvGeom, Dense, Params};
use crate::scalar::Scalar;

const STRIDE2: ConvGeom = ConvGeom { k: 3, stride: 2, pad: 1 };

/// Three stride-2 convolutions (total /8) plus broadcast forcing channels.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticEncoder<T> {
    pub convs: Vec<Conv2d<T>>,
}

#[derive(Debug, Clone)]
pub struct StaticCache<T> {
    /// Input followed by each stage's activation.
    acts: Vec<Array3<T>>,
}

impl<T: Scalar> StaticEncoder<T> {
    /// Stage widths `[w/4, w/2, w]` for spatial width `w`.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, spatial: usize) -> Self {
        let widths = [STATIC_CHANNELS, (spatial / 4).max(1), (spatial / 2).max(1), spatial];
        Self { convs: widths.windows(2).map(|p| Conv2d::new(rng, p[0], p[1], STRIDE2)).collect() }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels()) + FORCING_FEATURES
    }

    pub fn forward(&self, statics: &Array3<T>, forcing: &[T; FORCING_FEATURES]) -> Result<(Array3<T>, StaticCache<T>)> {
        let mut acts = vec![statics.clone()];
        for conv in &self.convs {
            let next = leaky_relu(&conv.forward(acts.last().expect("nonempty"))?);
            acts.push(next);
        }
        let last = acts.last().expect("nonempty");
        let (_, h, w) = last.dim();
        let forcing_map = broadcast(&Array1::from(forcing.to_vec()), (h, w));
        let out = concat(&[last, &forcing_map])?;
        Ok((out, StaticCache { acts }))
    }

    pub fn backward(&self, cache: &StaticCache<T>, grad_out: &Array3<T>, grads: &mut StaticEncoder<T>) -> Result<()> {
        let spatial = self.convs.last().map_or(0, |c| c.out_channels());
        let mut g = grad_out.slice(s![..spatial, .., ..]).to_owned();
        for (i, conv) in self.convs.iter().enumerate().rev() {
            g = leaky_relu_backward(&cache.acts[i + 1], &g);
            match conv.backward(&cache.acts[i], &g, Some(&mut grads.convs[i]), i > 0)? {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(())
    }
}

/// Two dense layers on one weather slice, broadcast over the latent extent by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherEncoder<T> {
    pub d1: Dense<T>,
    pub d2: Dense<T>,
}

#[derive(Debug, Clone)]
pub struct WeatherCache<T> {
    input: Array1<T>,
    h1: Array1<T>,
    out: Array1<T>,
}

impl<T: Scalar> WeatherEncoder<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, width: usize) -> Self {
        Self { d1: Dense::new(rng, WEATHER_FEATURES, width), d2: Dense::new(rng, width, width) }
    }

    pub fn width(&self) -> usize {
        self.d2.bias.len()
    }

    /// `slice` holds scaled temperature and humidity and wind in px/slice;
    /// wind is divided by `wind_scale` before the first layer.
    pub fn forward(&self, slice: &[T; WEATHER_FEATURES], wind_scale: T) -> Result<(Array1<T>, WeatherCache<T>)> {
        if !(wind_scale > T::zero()) {
            return Err(Error::Numerical(format!("wind scale {wind_scale} must be positive")));
        }
        let input = Array1::from(vec![slice[0], slice[1], slice[2] / wind_scale, slice[3] / wind_scale]);
        let h1 = leaky_relu_vec(&self.d1.forward(&input)?);
        let out = leaky_relu_vec(&self.d2.forward(&h1)?);
        Ok((out.clone(), WeatherCache { input, h1, out }))
    }

    pub fn backward(&self, cache: &WeatherCache<T>, grad_out: &Array1<T>, grads: &mut WeatherEncoder<T>) {
        let g = leaky_relu_backward(&cache.out, grad_out);
        let g = self.d2.backward(&cache.h1, &g, &mut grads.d2);
        let g = leaky_relu_backward(&cache.h1, &g);
        self.d1.backward(&cache.input, &g, &mut grads.d1);
    }
}

impl<T: Scalar> Params<T> for StaticEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[T])) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

impl<T: Scalar> Params<T> for WeatherEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[T])) {
        self.d1.visit(&join(prefix, "dense1"), f);
        self.d2.visit(&join(prefix, "dense2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T])) {
        self.d1.visit_mut(&join(prefix, "dense1"), f);
        self.d2.visit_mut(&join(prefix, "dense2"), f);
    }
}
