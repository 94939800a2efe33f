//! Seeded procedural fire scenarios: terrain, land classes, weather and
//! forcing, plus the on-disk scenario layout.

pub mod heightmap;
pub mod landclass;
mod noise;
pub mod weather;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use heightmap::{gen_heightmap, height_to_gradients, Heightmap, RoughnessParams};
pub use landclass::{gen_landclass, ClassProportions, LandClass, LandClassMap, PatchScales};
pub use weather::{gen_weather, WeatherRegime, WeatherSample, WeatherSeries};

use crate::error::{Error, Result};
use crate::raster::{read_raster, write_raster, Dihedral, Raster};
use crate::rng::{child_rng, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forcing {
    /// Long-term fuel dryness index in `[0, 10]`.
    pub drought_factor: f64,
    /// Grass curing, percent in `[0, 100]`.
    pub curing_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldgenConfig {
    /// Inclusive range of map side lengths; each side is rounded down to a multiple of 8.
    pub side_px: (usize, usize),
    pub resolution_m: f64,
    pub interval_minutes: f64,
    pub n_intervals: usize,
    pub roughness: RoughnessParams,
    pub proportions: ClassProportions,
    pub patch_scales: PatchScales,
    pub weather: WeatherRegime,
    pub drought_range: (f64, f64),
    pub curing_range: (f64, f64),
    /// Minimum ignition distance from each border, as a fraction of that dimension.
    pub ignition_margin: f64,
}

impl Default for WorldgenConfig {
    fn default() -> Self {
        Self {
            side_px: (1024, 1536),
            resolution_m: 30.0,
            interval_minutes: 30.0,
            n_intervals: 22,
            roughness: RoughnessParams::default(),
            proportions: ClassProportions::default(),
            patch_scales: PatchScales::default(),
            weather: WeatherRegime::default(),
            drought_range: (6.0, 10.0),
            curing_range: (70.0, 100.0),
            ignition_margin: 0.1,
        }
    }
}

impl WorldgenConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.side_px;
        if lo < heightmap::MIN_SIDE || hi < lo {
            return Err(Error::config(format!("side_px range {lo}..={hi} invalid (min {})", heightmap::MIN_SIDE)));
        }
        if !(self.resolution_m > 0.0 && self.interval_minutes > 0.0) {
            return Err(Error::config("resolution_m and interval_minutes must be positive"));
        }
        if self.n_intervals == 0 {
            return Err(Error::config("n_intervals must be >= 1"));
        }
        if !(0.0..0.5).contains(&self.ignition_margin) {
            return Err(Error::config("ignition_margin must be in [0, 0.5)"));
        }
        let ok = |(a, b): (f64, f64), max: f64| a <= b && a >= 0.0 && b <= max;
        if !ok(self.drought_range, 10.0) || !ok(self.curing_range, 100.0) {
            return Err(Error::config("forcing ranges must lie in drought [0,10], curing [0,100]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Terrain slope `dz/dx` (x east), dimensionless.
    pub grad_x: Raster<f32>,
    /// Terrain slope `dz/dy` (y north), dimensionless.
    pub grad_y: Raster<f32>,
    pub landclass: LandClassMap,
    pub weather: WeatherSeries,
    pub forcing: Forcing,
    pub ignition: (usize, usize),
    pub resolution_m: f64,
    pub interval_minutes: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn shape(&self) -> (usize, usize) {
        self.grad_x.shape()
    }

    /// Applies a symmetry of the square to every raster, vector field and the ignition point.
    pub fn transformed(&self, t: Dihedral) -> Self {
        let (gx, gy) = transform_vector_field(&self.grad_x, &self.grad_y, t);
        Self {
            grad_x: gx,
            grad_y: gy,
            landclass: LandClassMap { classes: self.landclass.classes.apply(t) },
            weather: self.weather.rotate(t),
            ignition: t.apply_pixel(self.ignition, self.shape()),
            ..self.clone()
        }
    }
}

pub(crate) fn transform_vector_field<T: Copy + std::ops::Neg<Output = T>>(
    x: &Raster<T>,
    y: &Raster<T>,
    t: Dihedral,
) -> (Raster<T>, Raster<T>) {
    let pairs: Vec<(T, T)> = x.data().iter().zip(y.data()).map(|(&a, &b)| t.apply_vector((a, b))).collect();
    let rx = Raster::from_vec(x.height(), x.width(), pairs.iter().map(|p| p.0).collect()).expect("shape");
    let ry = Raster::from_vec(x.height(), x.width(), pairs.iter().map(|p| p.1).collect()).expect("shape");
    (rx.apply(t), ry.apply(t))
}

const IGNITION_TRIES: usize = 10_000;

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

pub fn gen_scenario(seed: u64, cfg: &WorldgenConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = child_rng(seed, "scenario", 0);
    let mut side = || {
        let s = rng.gen_range(cfg.side_px.0..=cfg.side_px.1);
        (s / 8 * 8).max(heightmap::MIN_SIDE)
    };
    let shape = (side(), side());
    let heights = gen_heightmap(derive_seed(seed, "heightmap", 0), shape, &cfg.roughness, cfg.resolution_m)?;
    let (gx, gy) = height_to_gradients(&heights);
    let landclass = gen_landclass(derive_seed(seed, "landclass", 0), shape, &cfg.proportions, &cfg.patch_scales)?;
    let weather = gen_weather(derive_seed(seed, "weather", 0), cfg.n_intervals, &cfg.weather)?;
    let forcing = Forcing {
        drought_factor: uniform(&mut rng, cfg.drought_range),
        curing_factor: uniform(&mut rng, cfg.curing_range),
    };
    let margin = |n: usize| (cfg.ignition_margin * n as f64).ceil() as usize;
    let (mr, mc) = (margin(shape.0), margin(shape.1));
    let mut ignition = None;
    for _ in 0..IGNITION_TRIES {
        let r = rng.gen_range(mr..shape.0 - mr);
        let c = rng.gen_range(mc..shape.1 - mc);
        if matches!(landclass.classes.get(r, c), LandClass::Grass | LandClass::Shrub) {
            ignition = Some((r, c));
            break;
        }
    }
    let ignition = ignition.ok_or_else(|| Error::Domain(format!("no grass or shrub ignition site found after {IGNITION_TRIES} draws")))?;
    Ok(Scenario {
        grad_x: gx.map(|v| v as f32),
        grad_y: gy.map(|v| v as f32),
        landclass,
        weather,
        forcing,
        ignition,
        resolution_m: cfg.resolution_m,
        interval_minutes: cfg.interval_minutes,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScenarioFiles {
    grad_x: String,
    grad_y: String,
    landclass: String,
    weather: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScenarioManifest {
    seed: u64,
    shape: [usize; 2],
    resolution_m: f64,
    interval_minutes: f64,
    forcing: Forcing,
    ignition: [usize; 2],
    files: ScenarioFiles,
}

pub const MANIFEST_FILE: &str = "scenario.json";

pub fn save_scenario(dir: &Path, s: &Scenario) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_raster(dir, "grad_x", &s.grad_x, "dimensionless")?;
    write_raster(dir, "grad_y", &s.grad_y, "dimensionless")?;
    write_raster(dir, "landclass", &s.landclass.to_labels(), "class label")?;
    let wpath = dir.join("weather.csv");
    fs::write(&wpath, s.weather.to_csv()).map_err(|e| Error::io(&wpath, e))?;
    let (h, w) = s.shape();
    let manifest = ScenarioManifest {
        seed: s.seed,
        shape: [h, w],
        resolution_m: s.resolution_m,
        interval_minutes: s.interval_minutes,
        forcing: s.forcing,
        ignition: [s.ignition.0, s.ignition.1],
        files: ScenarioFiles {
            grad_x: "grad_x.json".into(),
            grad_y: "grad_y.json".into(),
            landclass: "landclass.json".into(),
            weather: "weather.csv".into(),
        },
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))
}

pub fn load_scenario(dir: &Path) -> Result<Scenario> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::Missing { path: mpath, hint: "run `pyroemu worldgen` first".into() });
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: ScenarioManifest = serde_json::from_str(&text)?;
    let stem = |f: &str| f.trim_end_matches(".json").to_string();
    let (gx, _) = read_raster(dir, &stem(&m.files.grad_x))?;
    let (gy, _) = read_raster(dir, &stem(&m.files.grad_y))?;
    let (lc, _) = read_raster(dir, &stem(&m.files.landclass))?;
    let wpath = dir.join(&m.files.weather);
    let wtext = fs::read_to_string(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let s = Scenario {
        grad_x: gx,
        grad_y: gy,
        landclass: LandClassMap::from_labels(&lc)?,
        weather: WeatherSeries::from_csv(&wtext, &wpath)?,
        forcing: m.forcing,
        ignition: (m.ignition[0], m.ignition[1]),
        resolution_m: m.resolution_m,
        interval_minutes: m.interval_minutes,
        seed: m.seed,
    };
    if s.shape() != (m.shape[0], m.shape[1]) || s.grad_y.shape() != s.shape() || s.landclass.classes.shape() != s.shape() {
        return Err(Error::Format { path: mpath, msg: "component rasters disagree with manifest shape".into() });
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldgenConfig {
        WorldgenConfig { side_px: (96, 128), ..Default::default() }
    }

    #[test]
    fn ignition_is_grass_or_shrub_inside_margin() {
        let cfg = small();
        for seed in 0..20 {
            let s = gen_scenario(seed, &cfg).unwrap();
            let (r, c) = s.ignition;
            assert!(matches!(s.landclass.classes.get(r, c), LandClass::Grass | LandClass::Shrub));
            let (h, w) = s.shape();
            assert!(r as f64 >= 0.1 * h as f64 && (h - r) as f64 >= 0.1 * h as f64);
            assert!(c as f64 >= 0.1 * w as f64 && (w - c) as f64 >= 0.1 * w as f64);
            assert_eq!(h % 8, 0);
            assert_eq!(w % 8, 0);
            assert_eq!(s.weather.len(), cfg.n_intervals + 1);
        }
    }

    #[test]
    fn deterministic_and_distinct() {
        let cfg = small();
        assert_eq!(gen_scenario(3, &cfg).unwrap(), gen_scenario(3, &cfg).unwrap());
        assert_ne!(gen_scenario(3, &cfg).unwrap(), gen_scenario(4, &cfg).unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let s = gen_scenario(8, &small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scenario(dir.path(), &s).unwrap();
        assert_eq!(load_scenario(dir.path()).unwrap(), s);
    }

    #[test]
    fn missing_manifest_is_a_missing_prerequisite() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_scenario(dir.path()), Err(Error::Missing { .. })));
    }

    #[test]
    fn fails_without_ignition_site() {
        let cfg = WorldgenConfig {
            proportions: ClassProportions { grass: 0.0, shrub: 0.0, water: 0.5, other: 0.5 },
            ..small()
        };
        assert!(matches!(gen_scenario(1, &cfg), Err(Error::Domain(_))));
    }
}
