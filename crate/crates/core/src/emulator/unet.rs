//! Residual U-Net stepper acting on latent fire states.

use ndarray::{Array1, Array3};
use rand::Rng;

use super::AE_LATENT;
use crate::error::{Error, Result};
use crate::nn::ops::{broadcast, broadcast_backward, concat, leaky_relu, leaky_relu_backward, split_channels, upsample2, upsample2_backward};
use crate::nn::params::join;
use crate::nn::{Conv2d, ConvGeom, Params};
use crate::scalar::Scalar;

const SAME3: ConvGeom = ConvGeom { k: 3, stride: 1, pad: 1 };
const DOWN3: ConvGeom = ConvGeom { k: 3, stride: 2, pad: 1 };
const POINT: ConvGeom = ConvGeom { k: 1, stride: 1, pad: 0 };

/// The first convolution is split by input block so the static part can be
/// evaluated once per interval instead of once per slice.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub in_fire: Conv2d<T>,
    pub in_static: Conv2d<T>,
    pub in_weather: Conv2d<T>,
    /// Per level: stride-2 contraction, then a same-size convolution.
    pub down: Vec<(Conv2d<T>, Conv2d<T>)>,
    /// Per level: convolution over `[upsampled, skip]`.
    pub up: Vec<Conv2d<T>>,
    /// 1×1 projection to the latent residual; zero at initialization.
    pub out: Conv2d<T>,
    /// The fire latent enters multiplied by this and the residual leaves
    /// divided by it, so faint young fires are not drowned by static inputs.
    pub fire_scale: T,
}

#[derive(Debug, Clone)]
pub struct StepCache<T> {
    /// Scaled latent input.
    z: Array3<T>,
    weather_map: Array3<T>,
    /// `enc[0]` is the first activation, `enc[l]` the output of level `l`.
    enc: Vec<Array3<T>>,
    /// Stride-2 activation of each level (index `l - 1`).
    mid: Vec<Array3<T>>,
    /// Concatenated input of each up convolution (index `l - 1`).
    cat: Vec<Array3<T>>,
    /// `dec[l - 1]` is the output of the up convolution at level `l`.
    dec: Vec<Array3<T>>,
}

/// Gradients leaving one step: latent input, precomputed static term, weather vector.
pub struct StepGrads<T> {
    pub z: Array3<T>,
    pub static_term: Array3<T>,
    pub weather: Array1<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, static_channels: usize, weather_channels: usize, width: usize, depth: usize) -> Self {
        let widths: Vec<usize> = (0..=depth).map(|l| width << l).collect();
        let down = (1..=depth)
            .map(|l| (Conv2d::new(rng, widths[l - 1], widths[l], DOWN3), Conv2d::new(rng, widths[l], widths[l], SAME3)))
            .collect();
        let up = (1..=depth).map(|l| Conv2d::new(rng, widths[l] + widths[l - 1], widths[l - 1], SAME3)).collect();
        Self {
            in_fire: Conv2d::new(rng, AE_LATENT, width, SAME3),
            in_static: Conv2d::new(rng, static_channels, width, SAME3),
            in_weather: Conv2d::new(rng, weather_channels, width, SAME3),
            down,
            up,
            out: Conv2d::zeros(width, AE_LATENT, POINT),
            fire_scale: T::one(),
        }
    }

    pub fn with_fire_scale(self, fire_scale: T) -> Self {
        Self { fire_scale, ..self }
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    /// Static contribution to the first activation.
    pub fn static_term(&self, latent_static: &Array3<T>) -> Result<Array3<T>> {
        self.in_static.forward(latent_static)
    }

    /// One residual update `z + U(z, static, weather)`.
    pub fn step(&self, z: &Array3<T>, static_term: &Array3<T>, weather: &Array1<T>) -> Result<(Array3<T>, StepCache<T>)> {
        let (_, h, w) = z.dim();
        if static_term.dim().1 != h || static_term.dim().2 != w {
            return Err(Error::shape(format!("latent extent {h}x{w} vs static {:?}", static_term.dim())));
        }
        let weather_map = broadcast(weather, (h, w));
        let zs = z * self.fire_scale;
        let a0 = self.in_fire.forward(&zs)? + static_term + self.in_weather.forward(&weather_map)?;
        let mut enc = vec![leaky_relu(&a0)];
        let mut mid = Vec::with_capacity(self.depth());
        for (down, same) in &self.down {
            let m = leaky_relu(&down.forward(enc.last().expect("nonempty"))?);
            let e = leaky_relu(&same.forward(&m)?);
            mid.push(m);
            enc.push(e);
        }
        let d = self.depth();
        let mut cat = vec![Array3::zeros((0, 0, 0)); d];
        let mut dec = vec![Array3::zeros((0, 0, 0)); d];
        let mut x = enc[d].clone();
        for l in (1..=d).rev() {
            let skip = &enc[l - 1];
            let up = upsample2(&x, (skip.dim().1, skip.dim().2))?;
            cat[l - 1] = concat(&[&up, skip])?;
            x = leaky_relu(&self.up[l - 1].forward(&cat[l - 1])?);
            dec[l - 1] = x.clone();
        }
        let out = z + &(self.out.forward(&x)? / self.fire_scale);
        Ok((out, StepCache { z: zs, weather_map, enc, mid, cat, dec }))
    }

    /// Backward through one step; the static term's gradient is returned, not
    /// propagated into `in_static`.
    pub fn step_backward(&self, cache: &StepCache<T>, grad_out: &Array3<T>, grads: &mut UNet<T>) -> Result<StepGrads<T>> {
        let d = self.depth();
        let last = if d == 0 { &cache.enc[0] } else { &cache.dec[0] };
        let mut g_x = self.out.backward(last, &(grad_out / self.fire_scale), Some(&mut grads.out), true)?.expect("input grad");
        let mut g_enc: Vec<Array3<T>> = cache.enc.iter().map(|e| Array3::zeros(e.dim())).collect();
        for l in 1..=d {
            let g_pre = leaky_relu_backward(&cache.dec[l - 1], &g_x);
            let g_cat = self.up[l - 1].backward(&cache.cat[l - 1], &g_pre, Some(&mut grads.up[l - 1]), true)?.expect("input grad");
            let below = cache.enc[l].dim();
            let skip_ch = cache.enc[l - 1].dim().0;
            let parts = split_channels(&g_cat, &[g_cat.dim().0 - skip_ch, skip_ch]);
            g_enc[l - 1] += &parts[1];
            g_x = upsample2_backward(&parts[0], (below.1, below.2));
        }
        g_enc[d] += &g_x;
        for l in (1..=d).rev() {
            let (down, same) = &self.down[l - 1];
            let (gdown, gsame) = &mut grads.down[l - 1];
            let g = leaky_relu_backward(&cache.enc[l], &g_enc[l]);
            let g = same.backward(&cache.mid[l - 1], &g, Some(gsame), true)?.expect("input grad");
            let g = leaky_relu_backward(&cache.mid[l - 1], &g);
            let g = down.backward(&cache.enc[l - 1], &g, Some(gdown), true)?.expect("input grad");
            g_enc[l - 1] += &g;
        }
        let g_a0 = leaky_relu_backward(&cache.enc[0], &g_enc[0]);
        let gz_in = self.in_fire.backward(&cache.z, &g_a0, Some(&mut grads.in_fire), true)?.expect("input grad");
        let g_wmap = self.in_weather.backward(&cache.weather_map, &g_a0, Some(&mut grads.in_weather), true)?.expect("input grad");
        Ok(StepGrads { z: grad_out + &(gz_in * self.fire_scale), static_term: g_a0, weather: broadcast_backward(&g_wmap) })
    }
}

impl<T: Scalar> Params<T> for UNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[T])) {
        self.in_fire.visit(&join(prefix, "in_fire"), f);
        self.in_static.visit(&join(prefix, "in_static"), f);
        self.in_weather.visit(&join(prefix, "in_weather"), f);
        for (i, (a, b)) in self.down.iter().enumerate() {
            a.visit(&join(prefix, &format!("down{}.stride", i + 1)), f);
            b.visit(&join(prefix, &format!("down{}.conv", i + 1)), f);
        }
        for (i, c) in self.up.iter().enumerate() {
            c.visit(&join(prefix, &format!("up{}", i + 1)), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T])) {
        self.in_fire.visit_mut(&join(prefix, "in_fire"), f);
        self.in_static.visit_mut(&join(prefix, "in_static"), f);
        self.in_weather.visit_mut(&join(prefix, "in_weather"), f);
        for (i, (a, b)) in self.down.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("down{}.stride", i + 1)), f);
            b.visit_mut(&join(prefix, &format!("down{}.conv", i + 1)), f);
        }
        for (i, c) in self.up.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("up{}", i + 1)), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn zero_output_layer_is_identity() {
        let mut rng = rng_from(1);
        let net = UNet::<f32>::new(&mut rng, 34, 16, 8, 2);
        let z = Array3::from_shape_fn((16, 72, 48), |(c, r, w)| (c * r + w) as f32 * 1e-3);
        let st = net.static_term(&Array3::from_elem((34, 72, 48), 0.5)).unwrap();
        let (out, cache) = net.step(&z, &st, &Array1::from_elem(16, 0.1)).unwrap();
        assert_eq!(out, z);
        assert_eq!(cache.enc[1].dim(), (16, 36, 24));
        assert_eq!(cache.enc[2].dim(), (32, 18, 12));
    }

    #[test]
    fn scaled_input_gradient_matches_finite_differences() {
        let mut rng = rng_from(3);
        let mut net = UNet::<f64>::new(&mut rng, 34, 16, 4, 1).with_fire_scale(8.0);
        net.out.weight.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        let z = Array3::from_shape_fn((16, 6, 6), |(c, r, w)| {
            let faint = [0.0, 0.004, 0.011, 0.02][(c + r) % 4] + c as f64 * 1e-4;
            if (r + w) % 2 == 0 { faint } else { faint + [0.0, 0.05, 0.3][(c + w) % 3] }
        });
        let st = net.static_term(&Array3::from_elem((34, 6, 6), 0.2)).unwrap();
        let v = Array1::from_elem(16, 0.3);
        let weights = Array3::from_shape_fn(z.dim(), |(c, r, w)| ((c * 7 + r * 3 + w) % 11) as f64 - 5.0);
        let objective = |z: &Array3<f64>| (net.step(z, &st, &v).unwrap().0 * &weights).sum();
        let (_, cache) = net.step(&z, &st, &v).unwrap();
        let g = net.step_backward(&cache, &weights, &mut net.clone()).unwrap();
        let h = 1e-6;
        for (idx, &zv) in z.indexed_iter() {
            if zv == 0.0 {
                continue;
            }
            let (mut up, mut down) = (z.clone(), z.clone());
            up[idx] += h;
            down[idx] -= h;
            let fd = (objective(&up) - objective(&down)) / (2.0 * h);
            assert!((fd - g.z[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "{idx:?}: {fd} vs {}", g.z[idx]);
        }
    }

    #[test]
    fn odd_latent_extents() {
        let net = UNet::<f64>::new(&mut rng_from(2), 34, 16, 4, 2);
        let z = Array3::zeros((16, 9, 5));
        let st = net.static_term(&Array3::zeros((34, 9, 5))).unwrap();
        assert_eq!(net.step(&z, &st, &Array1::zeros(16)).unwrap().0.dim(), (16, 9, 5));
    }
}
