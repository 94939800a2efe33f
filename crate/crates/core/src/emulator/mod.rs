//! The neural emulator: a frozen fire-state autoencoder, encoders for static
//! and weather inputs, and a residual U-Net applied once per weather slice.

pub mod autoencoder;
mod checkpoint;
pub mod encoders;
pub mod unet;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use autoencoder::{ae_encode, Autoencoder, DecodeCache};
pub use checkpoint::{load_autoencoder, load_emulator, save_autoencoder, save_emulator, WeightsDescriptor};
pub use encoders::{StaticEncoder, WeatherEncoder};
pub use unet::UNet;

use crate::dataset::{NormalizedScenario, Sample, FORCING_FEATURES, WEATHER_FEATURES};
use crate::dataset::TrainStats;
use crate::error::{Error, Result};
use crate::nn::params::join;
use crate::nn::Params;
use crate::scalar::Scalar;

/// Average-pool stride × space-to-depth block.
pub const DOWNSAMPLE: usize = 8;
/// Latent fire-state channels.
pub const AE_LATENT: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub unet_depth: usize,
    /// Channels at the finest U-Net level; doubles per level.
    pub unet_width: usize,
    pub slices_per_interval: usize,
    pub ae_latent: usize,
    pub spatial_channels: usize,
    pub weather_channels: usize,
    pub decoder_channels: usize,
    pub downsample_factor: usize,
    /// Fire-latent scale inside the U-Net; `t_max + 1` puts one interval of
    /// burning at unit size.
    pub fire_scale: usize,
    /// Between rollout intervals, apply [`project_latent`].
    pub project_latent: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet_depth: 1,
            unet_width: 16,
            slices_per_interval: 4,
            ae_latent: AE_LATENT,
            spatial_channels: 32,
            weather_channels: 16,
            decoder_channels: 8,
            downsample_factor: DOWNSAMPLE,
            fire_scale: 23,
            project_latent: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.unet_depth) {
            return Err(Error::config(format!("unet_depth {} not in {{1, 2}}", self.unet_depth)));
        }
        if self.ae_latent != AE_LATENT || self.downsample_factor != DOWNSAMPLE {
            return Err(Error::config(format!("latent width and downsample factor are fixed at {AE_LATENT} and {DOWNSAMPLE}")));
        }
        if self.slices_per_interval == 0 || self.unet_width == 0 || self.spatial_channels < 4 || self.weather_channels == 0 || self.decoder_channels == 0 || self.fire_scale == 0 {
            return Err(Error::config("model widths, slices_per_interval and fire_scale must be positive"));
        }
        Ok(())
    }
}

/// Gradient rule for the decoder's output clamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClampGrad {
    /// Pass gradients through the clamp unchanged (training default).
    #[default]
    StraightThrough,
    /// Zero gradient where the clamp is active.
    Exact,
}

/// The trainable part of the emulator (the autoencoder stays frozen).
#[derive(Debug, Clone, PartialEq)]
pub struct Stepper<T> {
    pub static_enc: StaticEncoder<T>,
    pub weather_enc: WeatherEncoder<T>,
    pub unet: UNet<T>,
}

impl<T: Scalar> Params<T> for Stepper<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[T])) {
        self.static_enc.visit(&join(prefix, "static"), f);
        self.weather_enc.visit(&join(prefix, "weather"), f);
        self.unet.visit(&join(prefix, "unet"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T])) {
        self.static_enc.visit_mut(&join(prefix, "static"), f);
        self.weather_enc.visit_mut(&join(prefix, "weather"), f);
        self.unet.visit_mut(&join(prefix, "unet"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emulator<T> {
    pub config: ModelConfig,
    /// Normalization constants of the training split, shipped with the weights.
    pub stats: TrainStats,
    pub ae: Autoencoder<T>,
    pub net: Stepper<T>,
    pub clamp_grad: ClampGrad,
}

/// Activations of one training forward pass.
pub struct ForwardCache<T> {
    static_cache: encoders::StaticCache<T>,
    latent_static: Array3<T>,
    weather: Vec<encoders::WeatherCache<T>>,
    steps: Vec<unet::StepCache<T>>,
    decode: DecodeCache<T>,
}

impl<T: Scalar> Emulator<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: ModelConfig, stats: TrainStats, ae: Autoencoder<T>) -> Result<Self> {
        config.validate()?;
        let static_enc = StaticEncoder::new(rng, config.spatial_channels);
        let weather_enc = WeatherEncoder::new(rng, config.weather_channels);
        let unet = UNet::new(rng, static_enc.out_channels(), config.weather_channels, config.unet_width, config.unet_depth).with_fire_scale(T::of(config.fire_scale as f64));
        Ok(Self { config, stats, ae, net: Stepper { static_enc, weather_enc, unet }, clamp_grad: ClampGrad::default() })
    }

    fn wind_scale(&self) -> T {
        T::of(self.stats.wind_scale_px)
    }

    /// Latent static features: spatial encoding plus broadcast forcing.
    pub fn encode_static(&self, statics: &Array3<T>, forcing: &[T; FORCING_FEATURES]) -> Result<Array3<T>> {
        Ok(self.net.static_enc.forward(statics, forcing)?.0)
    }

    /// Weather feature map for one slice over an `h`×`w` latent extent.
    pub fn encode_weather(&self, slice: &[T; WEATHER_FEATURES], (h, w): (usize, usize)) -> Result<Array3<T>> {
        let v = self.net.weather_enc.forward(slice, self.wind_scale())?.0;
        Ok(crate::nn::ops::broadcast(&v, (h, w)))
    }

    /// One residual latent update from explicit feature maps.
    pub fn inner_step(&self, latent_fire: &Array3<T>, latent_static: &Array3<T>, weather_feat: &Array3<T>) -> Result<Array3<T>> {
        let (_, h, w) = latent_fire.dim();
        if latent_static.dim().1 != h || latent_static.dim().2 != w || weather_feat.dim().1 != h || weather_feat.dim().2 != w {
            return Err(Error::shape(format!("latent extents differ: fire {:?}, static {:?}, weather {:?}", latent_fire.dim(), latent_static.dim(), weather_feat.dim())));
        }
        // weather maps are spatially constant
        let v: Array1<T> = weather_feat.outer_iter().map(|p| p[[0, 0]]).collect();
        let term = self.net.unet.static_term(latent_static)?;
        Ok(self.net.unet.step(latent_fire, &term, &v)?.0)
    }

    fn check_sample(&self, sample: &Sample<T>) -> Result<()> {
        if sample.weather_slices.len() != self.config.slices_per_interval {
            return Err(Error::shape(format!(
                "sample has {} weather slices, model expects {}",
                sample.weather_slices.len(),
                self.config.slices_per_interval
            )));
        }
        Ok(())
    }

    /// Predicted fire state one interval after the sample's input.
    pub fn forward(&self, sample: &Sample<T>) -> Result<Array2<T>> {
        self.check_sample(sample)?;
        let latent_static = self.encode_static(&sample.static_channels, &sample.forcing)?;
        let z = self.advance(ae_encode(&sample.input_state)?, &latent_static, &sample.weather_slices)?;
        self.ae.decode(&z)
    }

    fn advance(&self, mut z: Array3<T>, latent_static: &Array3<T>, slices: &[[T; WEATHER_FEATURES]]) -> Result<Array3<T>> {
        let term = self.net.unet.static_term(latent_static)?;
        for slice in slices {
            let (v, _) = self.net.weather_enc.forward(slice, self.wind_scale())?;
            z = self.net.unet.step(&z, &term, &v)?.0;
        }
        Ok(z)
    }

    pub fn forward_train(&self, sample: &Sample<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_sample(sample)?;
        let (latent_static, static_cache) = self.net.static_enc.forward(&sample.static_channels, &sample.forcing)?;
        let term = self.net.unet.static_term(&latent_static)?;
        let mut z = ae_encode(&sample.input_state)?;
        let mut weather = Vec::with_capacity(sample.weather_slices.len());
        let mut steps = Vec::with_capacity(sample.weather_slices.len());
        for slice in &sample.weather_slices {
            let (v, wc) = self.net.weather_enc.forward(slice, self.wind_scale())?;
            let (next, sc) = self.net.unet.step(&z, &term, &v)?;
            z = next;
            weather.push(wc);
            steps.push(sc);
        }
        let (y, decode) = self.ae.decode_cached(&z)?;
        Ok((y, ForwardCache { static_cache, latent_static, weather, steps, decode }))
    }

    /// Accumulates gradients of the trainable part given `d loss / d prediction`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_pred: &Array2<T>, grads: &mut Stepper<T>) -> Result<()> {
        let mut gz = self.ae.decode_backward(&cache.decode, grad_pred, None, self.clamp_grad)?;
        let mut g_term: Option<Array3<T>> = None;
        for (sc, wc) in cache.steps.iter().zip(&cache.weather).rev() {
            let g = self.net.unet.step_backward(sc, &gz, &mut grads.unet)?;
            self.net.weather_enc.backward(wc, &g.weather, &mut grads.weather_enc);
            match g_term.as_mut() {
                Some(acc) => *acc += &g.static_term,
                None => g_term = Some(g.static_term),
            }
            gz = g.z;
        }
        if let Some(g_term) = g_term {
            let g_static = self
                .net
                .unet
                .in_static
                .backward(&cache.latent_static, &g_term, Some(&mut grads.unet.in_static), true)?
                .expect("input grad");
            self.net.static_enc.backward(&cache.static_cache, &g_static, &mut grads.static_enc)?;
        }
        Ok(())
    }

    /// Autoregressive prediction over a whole map. Element 0 is `initial`;
    /// element `k` is the state at interval `t_start + k`. The latent state is
    /// carried across intervals and decoded only for output.
    pub fn rollout(&self, norm: &NormalizedScenario, initial: &Array2<T>, t_start: usize, t_end: usize) -> Result<Vec<Array2<T>>> {
        if t_end < t_start {
            return Err(Error::Domain(format!("rollout end {t_end} precedes start {t_start}")));
        }
        if norm.slices_per_interval != self.config.slices_per_interval {
            return Err(Error::config(format!(
                "scenario normalized with {} slices per interval, model uses {}",
                norm.slices_per_interval, self.config.slices_per_interval
            )));
        }
        if t_end > norm.intervals() {
            return Err(Error::Domain(format!("weather covers {} intervals, rollout needs {t_end}", norm.intervals())));
        }
        let (h, w) = norm.shape();
        if initial.dim() != (h, w) {
            return Err(Error::shape(format!("initial state {:?} vs map {h}x{w}", initial.dim())));
        }
        let statics = norm.static_window::<T>(0, 0, h, w)?;
        let latent_static = self.encode_static(&statics, &norm.forcing_t())?;
        let mut z = ae_encode(initial)?;
        let mut out = vec![initial.clone()];
        let floor = T::of(latent_floor(norm.intervals()));
        for t in t_start..t_end {
            let next = self.advance(z.clone(), &latent_static, &norm.interval_weather(t)?)?;
            z = if self.config.project_latent { project_latent(&z, next, floor) } else { next };
            out.push(self.ae.decode(&z)?);
        }
        Ok(out)
    }
}

/// Just under `1 / (4 (t_max + 1))`, the smallest pooled value of a burned pixel.
pub fn latent_floor(t_max: usize) -> f64 {
    0.225 / (t_max as f64 + 1.0)
}

/// Keeps a rollout on encodings of valid fire histories: burned elements
/// never cool, unburned ones ignite only above `floor`, nothing exceeds 1.
pub fn project_latent<T: Scalar>(prev: &Array3<T>, mut next: Array3<T>, floor: T) -> Array3<T> {
    ndarray::Zip::from(&mut next).and(prev).for_each(|v, &p| {
        *v = if p > T::zero() {
            v.max(p)
        } else if *v < floor {
            T::zero()
        } else {
            *v
        }
        .min(T::one());
    });
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{pad_mask, MinMax, SampleMeta};
    use crate::rng::rng_from;
    use rand::Rng;

    pub(crate) fn stats() -> TrainStats {
        let mm = MinMax { min: 0.0, max: 1.0 };
        TrainStats { temperature_c: mm, rel_humidity_pct: mm, drought_factor: mm, curing_factor: mm, wind_scale_px: 150.0, slices_per_interval: 4 }
    }

    pub(crate) fn random_sample<T: Scalar, R: Rng>(rng: &mut R, h: usize, w: usize, p: usize) -> Sample<T> {
        let input = Array2::from_shape_fn((h, w), |_| if rng.gen::<f64>() < 0.3 { T::of(rng.gen_range(0.05..0.5)) } else { T::zero() });
        let target = input.mapv(|v| if v > T::zero() { v + T::of(0.05) } else { T::zero() });
        Sample {
            meta: SampleMeta { fire_seed: 0, t: 3, center: (0, 0), origin: (0, 0), transform_id: 0, c: h - 2 * p, p },
            input_state: input,
            target_state: target,
            static_channels: Array3::from_shape_fn((6, h, w), |(c, _, _)| if c < 2 { T::of(rng.gen_range(-0.1..0.1)) } else { T::of(f64::from(rng.gen::<bool>() as u8)) }),
            forcing: [T::of(0.4), T::of(0.6)],
            weather_slices: (0..4).map(|_| [T::of(0.5), T::of(0.3), T::of(rng.gen_range(-100.0..100.0)), T::of(rng.gen_range(-100.0..100.0))]).collect(),
            pad_mask: pad_mask(h, w, p),
        }
    }

    #[test]
    fn untrained_model_reproduces_autoencoder_round_trip() {
        let mut rng = rng_from(5);
        let ae = Autoencoder::<f32>::new(&mut rng, 8);
        let emu = Emulator::new(&mut rng, ModelConfig::default(), stats(), ae).unwrap();
        let s = random_sample::<f32, _>(&mut rng, 64, 64, 8);
        let expect = emu.ae.decode(&ae_encode(&s.input_state).unwrap()).unwrap();
        assert_eq!(emu.forward(&s).unwrap(), expect);
    }

    #[test]
    fn projection_is_identity_on_valid_histories() {
        let t_max = 22;
        let mut rng = rng_from(4);
        let arrival = Array2::from_shape_fn((64, 64), |_| if rng.gen_bool(0.6) { f64::INFINITY } else { rng.gen_range(0..=t_max) as f64 });
        let state = |t: usize| arrival.mapv(|a| if a <= t as f64 { (t as f64 - a + 1.0) / (t_max as f64 + 1.0) } else { 0.0 });
        let floor = latent_floor(t_max);
        for t in [0, 3, 21] {
            let prev = ae_encode(&state(t)).unwrap();
            let next = ae_encode(&state(t + 1)).unwrap();
            assert_eq!(project_latent(&prev, next.clone(), floor), next);
        }
        let prev = ae_encode(&state(3)).unwrap();
        let noisy = prev.mapv(|v| if v == 0.0 { 0.5 * floor } else { 0.5 * v });
        let fixed = project_latent(&prev, noisy, floor);
        assert_eq!(fixed, prev);
    }

    #[test]
    fn fully_convolutional_shapes() {
        let mut rng = rng_from(6);
        let ae = Autoencoder::<f32>::new(&mut rng, 8);
        let mut emu = Emulator::new(&mut rng, ModelConfig { unet_depth: 2, ..Default::default() }, stats(), ae).unwrap();
        emu.net.unet.out.weight.mapv_inplace(|_| 0.01);
        for (h, w) in [(192, 192), (320, 320), (192, 320), (576, 384)] {
            let s = random_sample::<f32, _>(&mut rng, h, w, 32);
            assert_eq!(emu.forward(&s).unwrap().dim(), (h, w));
        }
        let bad = random_sample::<f32, _>(&mut rng, 60, 64, 8);
        assert!(emu.forward(&bad).is_err());
    }

    #[test]
    fn inner_step_contract() {
        let mut rng = rng_from(7);
        let ae = Autoencoder::<f64>::new(&mut rng, 8);
        let emu = Emulator::new(&mut rng, ModelConfig::default(), stats(), ae).unwrap();
        let z = Array3::from_shape_fn((16, 9, 6), |_| rng.gen::<f64>());
        let st = emu.encode_static(&Array3::zeros((6, 72, 48)), &[0.1, 0.2]).unwrap();
        let wf = emu.encode_weather(&[0.1, 0.2, 3.0, 4.0], (9, 6)).unwrap();
        assert_eq!(st.dim(), (34, 9, 6));
        assert_eq!(wf.dim(), (16, 9, 6));
        assert_eq!(emu.inner_step(&z, &st, &wf).unwrap(), z);
        assert!(emu.inner_step(&z, &st, &emu.encode_weather(&[0.0; 4], (9, 5)).unwrap()).is_err());
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        use crate::nn::params::{assign_flat, flatten, zeroed};
        let mut rng = rng_from(11);
        let ae = Autoencoder::<f64>::new(&mut rng, 8);
        let mut emu = Emulator::new(&mut rng, ModelConfig { unet_depth: 2, ..Default::default() }, stats(), ae).unwrap();
        emu.clamp_grad = ClampGrad::Exact;
        emu.net.unet.out.weight.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
        let s = random_sample::<f64, _>(&mut rng, 32, 32, 4);
        let w = Array2::from_shape_fn((32, 32), |_| rng.gen_range(-1.0..1.0));
        let objective = |e: &Emulator<f64>| (&e.forward(&s).unwrap() * &w).sum();
        let (_, cache) = emu.forward_train(&s).unwrap();
        let mut grads = zeroed(&emu.net);
        emu.backward(&cache, &w, &mut grads).unwrap();
        let analytic = flatten(&grads);
        let base = flatten(&emu.net);
        let h = 1e-6;
        let mut checked = 0;
        let mut worst = 0.0f64;
        for _ in 0..60 {
            let i = rng.gen_range(0..base.len());
            let mut probe = emu.clone();
            let mut v = base.clone();
            v[i] += h;
            assign_flat(&mut probe.net, &v);
            let up = objective(&probe);
            v[i] -= 2.0 * h;
            assign_flat(&mut probe.net, &v);
            let fd = (up - objective(&probe)) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs());
            if scale < 1e-5 {
                continue;
            }
            checked += 1;
            worst = worst.max((fd - analytic[i]).abs() / scale);
        }
        assert!(checked > 20, "only {checked} parameters had a measurable gradient");
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }
}
