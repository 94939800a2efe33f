//! Unit normalization, perimeter-centred cropping, dihedral augmentation and
//! the train/validation sample stores built from simulated fires.

mod store;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

pub use store::{build_dataset, growing_intervals, FireRecord, FireTable, SampleStore, StoreManifest};

use crate::error::{Error, Result};
use crate::firesim::{arrival_to_state, ArrivalRaster};
use crate::raster::{dihedral_array2, dihedral_array3, Dihedral, Raster};
use crate::scalar::Scalar;
use crate::worldgen::{LandClass, Scenario, WeatherSample, WeatherSeries};

/// Static raster channels fed to the spatial encoder: two gradients plus one-hot land classes.
pub const STATIC_CHANNELS: usize = 6;
/// Per-slice weather features: temperature, humidity, wind x, wind y.
pub const WEATHER_FEATURES: usize = 4;
pub const FORCING_FEATURES: usize = 2;

/// Linear upsampling of 30-minute polls into `slices_per_interval` slices per interval.
pub fn interpolate_weather(series: &WeatherSeries, slices_per_interval: usize) -> Result<Vec<WeatherSample>> {
    series.interpolate(slices_per_interval)
}

/// Seconds of simulated time covered by one weather slice.
pub fn slice_seconds(interval_minutes: f64, slices_per_interval: usize) -> f64 {
    interval_minutes * 60.0 / slices_per_interval as f64
}

/// Converts m/s into pixel lengths travelled per slice.
pub fn mps_to_px_per_slice(mps: f64, resolution_m: f64, interval_minutes: f64, slices_per_interval: usize) -> f64 {
    mps * slice_seconds(interval_minutes, slices_per_interval) / resolution_m
}

pub fn px_per_slice_to_mps(px: f64, resolution_m: f64, interval_minutes: f64, slices_per_interval: usize) -> f64 {
    px * resolution_m / slice_seconds(interval_minutes, slices_per_interval)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    fn over(values: impl Iterator<Item = f64>) -> Self {
        values.fold(Self { min: f64::INFINITY, max: f64::NEG_INFINITY }, |m, v| Self { min: m.min.min(v), max: m.max.max(v) })
    }

    /// Maps `min -> 0` and `max -> 1`; a degenerate range maps everything to 0.5.
    pub fn scale(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            (v - self.min) / span
        } else {
            0.5
        }
    }

    fn degenerate(&self) -> bool {
        !(self.max - self.min > 0.0)
    }
}

/// Scaling constants measured on the training split only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub temperature_c: MinMax,
    pub rel_humidity_pct: MinMax,
    pub drought_factor: MinMax,
    pub curing_factor: MinMax,
    /// Largest wind component magnitude in px/slice; the weather encoder divides by it.
    pub wind_scale_px: f64,
    pub slices_per_interval: usize,
}

impl TrainStats {
    pub fn from_training(scenarios: &[&Scenario], slices_per_interval: usize) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::config("normalization statistics need at least one training scenario"));
        }
        let mut slices = Vec::new();
        let mut wind_scale_px: f64 = 0.0;
        for s in scenarios {
            let sliced = interpolate_weather(&s.weather, slices_per_interval)?;
            for w in &sliced {
                let m = w.wind_x_mps.abs().max(w.wind_y_mps.abs());
                wind_scale_px = wind_scale_px.max(mps_to_px_per_slice(m, s.resolution_m, s.interval_minutes, slices_per_interval));
            }
            slices.extend(sliced);
        }
        let stats = Self {
            temperature_c: MinMax::over(slices.iter().map(|w| w.temperature_c)),
            rel_humidity_pct: MinMax::over(slices.iter().map(|w| w.rel_humidity_pct)),
            drought_factor: MinMax::over(scenarios.iter().map(|s| s.forcing.drought_factor)),
            curing_factor: MinMax::over(scenarios.iter().map(|s| s.forcing.curing_factor)),
            wind_scale_px: if wind_scale_px > 0.0 { wind_scale_px } else { 1.0 },
            slices_per_interval,
        };
        for (name, m) in [
            ("temperature", stats.temperature_c),
            ("humidity", stats.rel_humidity_pct),
            ("drought factor", stats.drought_factor),
            ("curing factor", stats.curing_factor),
        ] {
            if m.degenerate() {
                log::warn!("training {name} has zero range; scaled channel fixed at 0.5");
            }
        }
        Ok(stats)
    }
}

/// A scenario in unit-less form: dimensionless slopes, scaled scalars and
/// wind in pixel lengths per slice.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedScenario {
    pub seed: u64,
    pub grad_x: Raster<f32>,
    pub grad_y: Raster<f32>,
    pub classes: Raster<LandClass>,
    /// Scaled `[drought, curing]`.
    pub forcing: [f64; FORCING_FEATURES],
    /// Per slice: scaled temperature, scaled humidity, wind x and y in px/slice.
    pub weather: Vec<[f64; WEATHER_FEATURES]>,
    pub slices_per_interval: usize,
    pub ignition: (usize, usize),
}

impl NormalizedScenario {
    pub fn shape(&self) -> (usize, usize) {
        self.grad_x.shape()
    }

    pub fn intervals(&self) -> usize {
        self.weather.len() / self.slices_per_interval
    }

    /// Static channels of the window at `(r0, c0)` with extent `(h, w)`.
    pub fn static_window<T: Scalar>(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Array3<T>> {
        let (mh, mw) = self.shape();
        if r0 + h > mh || c0 + w > mw {
            return Err(Error::shape(format!("window {h}x{w} at ({r0},{c0}) exceeds map {mh}x{mw}")));
        }
        let mut out = Array3::zeros((STATIC_CHANNELS, h, w));
        for r in 0..h {
            for c in 0..w {
                out[[0, r, c]] = T::of(f64::from(self.grad_x.get(r0 + r, c0 + c)));
                out[[1, r, c]] = T::of(f64::from(self.grad_y.get(r0 + r, c0 + c)));
                out[[2 + self.classes.get(r0 + r, c0 + c).label() as usize, r, c]] = T::one();
            }
        }
        Ok(out)
    }

    /// Weather slices driving interval `t` (from `t` to `t + 1`).
    pub fn interval_weather<T: Scalar>(&self, t: usize) -> Result<Vec<[T; WEATHER_FEATURES]>> {
        let s = self.slices_per_interval;
        if (t + 1) * s > self.weather.len() {
            return Err(Error::Domain(format!("weather covers {} intervals, interval {t} requested", self.intervals())));
        }
        Ok(self.weather[t * s..(t + 1) * s].iter().map(|w| w.map(T::of)).collect())
    }

    pub fn forcing_t<T: Scalar>(&self) -> [T; FORCING_FEATURES] {
        self.forcing.map(T::of)
    }
}

pub fn normalize_units(scenario: &Scenario, stats: &TrainStats, slices_per_interval: usize) -> Result<NormalizedScenario> {
    let sliced = interpolate_weather(&scenario.weather, slices_per_interval)?;
    let to_px = |v: f64| mps_to_px_per_slice(v, scenario.resolution_m, scenario.interval_minutes, slices_per_interval);
    let weather = sliced
        .iter()
        .map(|w| {
            [stats.temperature_c.scale(w.temperature_c), stats.rel_humidity_pct.scale(w.rel_humidity_pct), to_px(w.wind_x_mps), to_px(w.wind_y_mps)]
        })
        .collect();
    Ok(NormalizedScenario {
        seed: scenario.seed,
        grad_x: scenario.grad_x.clone(),
        grad_y: scenario.grad_y.clone(),
        classes: scenario.landclass.classes.clone(),
        forcing: [stats.drought_factor.scale(scenario.forcing.drought_factor), stats.curing_factor.scale(scenario.forcing.curing_factor)],
        weather,
        slices_per_interval,
        ignition: scenario.ignition,
    })
}

/// Burned pixels with at least one unburned 4-neighbour; pixels on the raster
/// edge count as perimeter.
pub fn perimeter_points<T: Scalar>(state: &Array2<T>) -> Result<Vec<(usize, usize)>> {
    let (h, w) = state.dim();
    let burned = |r: usize, c: usize| state[[r, c]] > T::zero();
    let mut out = Vec::new();
    let mut any = false;
    for r in 0..h {
        for c in 0..w {
            if !burned(r, c) {
                continue;
            }
            any = true;
            let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            if edge || !burned(r - 1, c) || !burned(r + 1, c) || !burned(r, c - 1) || !burned(r, c + 1) {
                out.push((r, c));
            }
        }
    }
    if !any {
        return Err(Error::Domain("fire state has no burned pixels".into()));
    }
    Ok(out)
}

/// Where a sample came from; enough to rebuild it from the fire it was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub fire_seed: u64,
    pub t: usize,
    pub center: (usize, usize),
    /// Top-left corner of the window in map pixels.
    pub origin: (usize, usize),
    pub transform_id: u8,
    pub c: usize,
    pub p: usize,
}

/// One single-interval training unit. Rasters are `(h, w)`, static channels `(6, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub meta: SampleMeta,
    pub input_state: Array2<T>,
    pub target_state: Array2<T>,
    pub static_channels: Array3<T>,
    pub forcing: [T; FORCING_FEATURES],
    pub weather_slices: Vec<[T; WEATHER_FEATURES]>,
    pub pad_mask: Array2<bool>,
}

impl<T: Scalar> Sample<T> {
    pub fn t_index(&self) -> usize {
        self.meta.t
    }

    pub fn dim(&self) -> (usize, usize) {
        self.input_state.dim()
    }
}

/// `true` on the `p`-wide border of an `h`×`w` raster.
pub fn pad_mask(h: usize, w: usize, p: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(r, c)| r < p || c < p || r + p >= h || c + p >= w)
}

/// Clamps a `side`×`side` window centred on `center` to lie inside the map.
pub fn window_origin(center: (usize, usize), side: usize, (h, w): (usize, usize)) -> Result<(usize, usize)> {
    if side > h || side > w {
        return Err(Error::shape(format!("crop window {side} larger than map {h}x{w}")));
    }
    let place = |c: usize, n: usize| c.saturating_sub(side / 2).min(n - side);
    Ok((place(center.0, h), place(center.1, w)))
}

pub fn crop_sample<T: Scalar>(
    norm: &NormalizedScenario,
    arrival: &ArrivalRaster,
    t: usize,
    center: (usize, usize),
    c: usize,
    p: usize,
    t_max: usize,
) -> Result<Sample<T>> {
    let side = c + 2 * p;
    if side % crate::emulator::DOWNSAMPLE != 0 {
        return Err(Error::config(format!("sample side {side} must be divisible by {}", crate::emulator::DOWNSAMPLE)));
    }
    if t + 1 > t_max {
        return Err(Error::Domain(format!("interval {t} has no successor within t_max {t_max}")));
    }
    if arrival.shape() != norm.shape() {
        return Err(Error::shape(format!("arrival {:?} vs scenario {:?}", arrival.shape(), norm.shape())));
    }
    let origin = window_origin(center, side, norm.shape())?;
    let window = arrival.window(origin.0, origin.1, side, side)?;
    let to_array = |r: Raster<T>| Array2::from_shape_vec((side, side), r.into_vec()).expect("square window");
    Ok(Sample {
        meta: SampleMeta { fire_seed: norm.seed, t, center, origin, transform_id: 0, c, p },
        input_state: to_array(arrival_to_state(&window, t, t_max)),
        target_state: to_array(arrival_to_state(&window, t + 1, t_max)),
        static_channels: norm.static_window(origin.0, origin.1, side, side)?,
        forcing: norm.forcing_t(),
        weather_slices: norm.interval_weather(t)?,
        pad_mask: pad_mask(side, side, p),
    })
}

/// Applies a symmetry of the square to every raster channel, treating the
/// gradient pair and the wind components as vectors.
pub fn augment<T: Scalar>(sample: &Sample<T>, t: Dihedral) -> Sample<T> {
    let mut statics = dihedral_array3(sample.static_channels.view(), t);
    {
        let (mut gx, mut rest) = statics.view_mut().split_at(Axis(0), 1);
        let mut gy = rest.index_axis_mut(Axis(0), 0);
        let mut gx = gx.index_axis_mut(Axis(0), 0);
        ndarray::Zip::from(&mut gx).and(&mut gy).for_each(|x, y| {
            let (nx, ny) = t.apply_vector((*x, *y));
            *x = nx;
            *y = ny;
        });
    }
    let weather_slices = sample
        .weather_slices
        .iter()
        .map(|w| {
            let (x, y) = t.apply_vector((w[2], w[3]));
            [w[0], w[1], x, y]
        })
        .collect();
    let compose = Dihedral::new(sample.meta.transform_id).map(|prev| compose(prev, t)).unwrap_or(t);
    Sample {
        meta: SampleMeta { transform_id: compose.id(), ..sample.meta },
        input_state: dihedral_array2(sample.input_state.view(), t),
        target_state: dihedral_array2(sample.target_state.view(), t),
        static_channels: statics,
        forcing: sample.forcing,
        weather_slices,
        pad_mask: dihedral_array2(sample.pad_mask.view(), t),
    }
}

/// The element equal to applying `first` and then `second`.
pub fn compose(first: Dihedral, second: Dihedral) -> Dihedral {
    let probe = Raster::from_fn(2, 3, |r, c| r * 3 + c);
    let target = probe.apply(first).apply(second);
    Dihedral::all().find(|d| probe.apply(*d) == target).expect("dihedral group is closed")
}

/// Train/validation split of scenario seeds; the prediction set is the
/// validation fires evaluated uncropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SplitSpec {
    pub train_fires: Vec<u64>,
    pub val_fires: Vec<u64>,
    pub prediction_fires: Vec<u64>,
}

impl SplitSpec {
    /// First `n_train` seeds train, the rest validate and predict.
    pub fn from_seeds(seeds: &[u64], n_train: usize) -> Result<Self> {
        if n_train > seeds.len() {
            return Err(Error::config(format!("{n_train} training fires requested from {} scenarios", seeds.len())));
        }
        let val = seeds[n_train..].to_vec();
        let spec = Self { train_fires: seeds[..n_train].to_vec(), prediction_fires: val.clone(), val_fires: val };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.train_fires.iter().find(|s| self.val_fires.contains(s)) {
            return Err(Error::config(format!("scenario {s} appears in both train and validation splits")));
        }
        if self.prediction_fires.iter().any(|s| !self.val_fires.contains(s)) {
            return Err(Error::config("prediction fires must be drawn from the validation split"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firesim::{simulate, RosParams};
    use crate::worldgen::{gen_scenario, WorldgenConfig};

    fn small_world(seed: u64) -> (Scenario, ArrivalRaster) {
        let cfg = WorldgenConfig { side_px: (96, 96), ..Default::default() };
        let s = gen_scenario(seed, &cfg).unwrap();
        let a = simulate(&s, &RosParams::default(), 22).unwrap();
        (s, a)
    }

    #[test]
    fn interpolation_examples() {
        let poll = |v: f64| WeatherSample { temperature_c: v, ..Default::default() };
        let series = WeatherSeries { polls: vec![poll(10.0), poll(14.0)] };
        let t: Vec<f64> = interpolate_weather(&series, 4).unwrap().iter().map(|w| w.temperature_c).collect();
        assert_eq!(t, vec![10.0, 11.0, 12.0, 13.0]);
        let t1: Vec<f64> = interpolate_weather(&series, 1).unwrap().iter().map(|w| w.temperature_c).collect();
        assert_eq!(t1, vec![10.0]);
    }

    #[test]
    fn wind_units() {
        assert!((mps_to_px_per_slice(10.0, 30.0, 30.0, 4) - 150.0).abs() < 1e-12);
        for v in [-13.7, 0.2, 4.0, 25.0] {
            let back = px_per_slice_to_mps(mps_to_px_per_slice(v, 30.0, 30.0, 4), 30.0, 30.0, 4);
            assert!(((back - v) / v).abs() < 1e-9);
        }
    }

    #[test]
    fn min_max_endpoints() {
        let m = MinMax { min: 2.0, max: 6.0 };
        assert_eq!(m.scale(6.0), 1.0);
        assert_eq!(m.scale(2.0), 0.0);
        assert_eq!(MinMax { min: 3.0, max: 3.0 }.scale(3.0), 0.5);
    }

    #[test]
    fn stats_only_see_training_fires() {
        let (a, _) = small_world(1);
        let (mut b, _) = small_world(2);
        b.forcing.drought_factor = 0.0;
        let stats = TrainStats::from_training(&[&a], 4).unwrap();
        assert_eq!(stats.drought_factor.min, a.forcing.drought_factor);
        let nb = normalize_units(&b, &stats, 4).unwrap();
        assert_eq!(nb.forcing[0], 0.5);
        assert_eq!(nb.weather.len(), 22 * 4);
    }

    #[test]
    fn perimeter_examples() {
        let mut s = Array2::<f64>::zeros((10, 10));
        s[[5, 5]] = 0.1;
        assert_eq!(perimeter_points(&s).unwrap(), vec![(5, 5)]);
        let mut block = Array2::<f64>::zeros((10, 10));
        block.slice_mut(ndarray::s![2..5, 2..5]).fill(0.3);
        let p = perimeter_points(&block).unwrap();
        assert_eq!(p.len(), 8);
        assert!(!p.contains(&(3, 3)));
        let full = Array2::<f64>::ones((4, 5));
        assert_eq!(perimeter_points(&full).unwrap().len(), 2 * 4 + 2 * 5 - 4);
        assert!(perimeter_points(&Array2::<f64>::zeros((3, 3))).is_err());
    }

    #[test]
    fn crop_shapes_and_clamping() {
        let (s, a) = small_world(3);
        let stats = TrainStats::from_training(&[&s], 4).unwrap();
        let n = normalize_units(&s, &stats, 4).unwrap();
        let smp: Sample<f32> = crop_sample(&n, &a, 4, (0, 0), 32, 8, 22).unwrap();
        assert_eq!(smp.dim(), (48, 48));
        assert_eq!(smp.meta.origin, (0, 0));
        assert_eq!(smp.static_channels.dim(), (6, 48, 48));
        assert_eq!(smp.weather_slices.len(), 4);
        let far: Sample<f32> = crop_sample(&n, &a, 4, (95, 95), 32, 8, 22).unwrap();
        assert_eq!(far.meta.origin, (48, 48));
        assert!(crop_sample::<f32>(&n, &a, 4, (0, 0), 128, 8, 22).is_err());
        assert!(crop_sample::<f32>(&n, &a, 4, (0, 0), 30, 8, 22).is_err());
        assert_eq!(pad_mask(48, 48, 8).iter().filter(|&&m| !m).count(), 32 * 32);
    }

    #[test]
    fn target_grows_by_one_ramp_unit() {
        let (s, a) = small_world(4);
        let stats = TrainStats::from_training(&[&s], 4).unwrap();
        let n = normalize_units(&s, &stats, 4).unwrap();
        let smp: Sample<f64> = crop_sample(&n, &a, 6, s.ignition, 64, 16, 22).unwrap();
        for (i, t) in smp.input_state.iter().zip(smp.target_state.iter()) {
            if *i > 0.0 {
                assert!((t - i - 1.0 / 23.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn augmentation_group_properties() {
        let (s, a) = small_world(5);
        let stats = TrainStats::from_training(&[&s], 4).unwrap();
        let n = normalize_units(&s, &stats, 4).unwrap();
        let smp: Sample<f64> = crop_sample(&n, &a, 10, s.ignition, 64, 16, 22).unwrap();
        assert_eq!(augment(&smp, Dihedral::IDENTITY), smp);
        let mut r = smp.clone();
        for _ in 0..4 {
            r = augment(&r, Dihedral::ROT90);
        }
        assert_eq!(r.input_state, smp.input_state);
        assert_eq!(r.static_channels, smp.static_channels);
        assert_eq!(r.weather_slices, smp.weather_slices);
        let burned = smp.target_state.iter().filter(|v| **v > 0.0).count();
        for t in Dihedral::all() {
            let aug = augment(&smp, t);
            assert_eq!(aug.target_state.iter().filter(|v| **v > 0.0).count(), burned);
            assert_eq!(aug.meta.transform_id, t.id());
        }
        let mut w = smp.clone();
        w.weather_slices = vec![[0.0, 0.0, 1.0, 0.0]];
        let rotated = augment(&w, Dihedral::ROT90);
        assert_eq!(rotated.weather_slices[0][2], 0.0);
        assert_eq!(rotated.weather_slices[0][3], 1.0);
    }

    #[test]
    fn augmented_sample_matches_transformed_world() {
        // cropping a transformed scenario equals transforming the crop
        let (s, a) = small_world(6);
        let stats = TrainStats::from_training(&[&s], 4).unwrap();
        let n = normalize_units(&s, &stats, 4).unwrap();
        let smp: Sample<f64> = crop_sample(&n, &a, 8, (0, 0), 48, 8, 22).unwrap();
        for t in Dihedral::all() {
            let st = s.transformed(t);
            let nt = normalize_units(&st, &stats, 4).unwrap();
            let at = ArrivalRaster { arrival: a.arrival.apply(t) };
            let center = t.apply_pixel((0, 0), (96, 96));
            let direct: Sample<f64> = crop_sample(&nt, &at, 8, center, 48, 8, 22).unwrap();
            let aug = augment(&smp, t);
            assert_eq!(aug.input_state, direct.input_state);
            assert_eq!(aug.static_channels, direct.static_channels);
            for (x, y) in aug.weather_slices.iter().zip(&direct.weather_slices) {
                for k in 0..4 {
                    assert!((x[k] - y[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn composition_table() {
        for a in Dihedral::all() {
            assert_eq!(compose(a, Dihedral::IDENTITY), a);
            assert_eq!(compose(Dihedral::IDENTITY, a), a);
        }
        let r2 = compose(Dihedral::ROT90, Dihedral::ROT90);
        assert_eq!(r2.quarter_turns(), 2);
        assert!(!r2.transposed());
    }

    #[test]
    fn split_hygiene() {
        let seeds: Vec<u64> = (0..10).collect();
        let split = SplitSpec::from_seeds(&seeds, 7).unwrap();
        assert_eq!(split.val_fires, vec![7, 8, 9]);
        assert_eq!(split.prediction_fires, split.val_fires);
        let bad = SplitSpec { train_fires: vec![1, 2], val_fires: vec![2], prediction_fires: vec![] };
        assert!(bad.validate().is_err());
    }
}
