//! Empirical-style rate-of-spread surrogate.
//!
//! `speed = base(class) · max(ε, 1 + k_w (w·d)) · exp(k_s (∇h·d)) · f_env`,
//! where `f_env = clamp(exp(a_T ΔT − a_RH ΔRH + a_c Δcuring + a_d Δdrought), 0.2, 3)`
//! with every Δ measured from a reference condition.

use serde::{Deserialize, Serialize};

use crate::worldgen::{Forcing, LandClass, Scenario, WeatherSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseRos {
    pub grass: f64,
    pub shrub: f64,
    pub other: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RosParams {
    /// Still-air, flat-ground spread rate per class, m/s.
    pub base_ros_mps: BaseRos,
    /// Wind gain per m/s of wind along the spread direction.
    pub wind_gain: f64,
    pub slope_gain: f64,
    pub temp_coeff: f64,
    pub humidity_coeff: f64,
    pub curing_coeff: f64,
    pub drought_coeff: f64,
    pub temp_ref_c: f64,
    pub humidity_ref_pct: f64,
    pub curing_ref_pct: f64,
    pub drought_ref: f64,
    /// Floor on the wind factor, keeps back-fire speed positive.
    pub floor: f64,
    pub env_min: f64,
    pub env_max: f64,
}

impl Default for RosParams {
    fn default() -> Self {
        Self {
            base_ros_mps: BaseRos { grass: 0.08, shrub: 0.06, other: 0.025 },
            wind_gain: 0.15,
            slope_gain: 2.0,
            temp_coeff: 0.02,
            humidity_coeff: 0.03,
            curing_coeff: 1.0,
            drought_coeff: 0.08,
            temp_ref_c: 35.0,
            humidity_ref_pct: 18.0,
            curing_ref_pct: 85.0,
            drought_ref: 8.0,
            floor: 0.05,
            env_min: 0.2,
            env_max: 3.0,
        }
    }
}

impl RosParams {
    pub fn validate(&self) -> crate::Result<()> {
        let b = self.base_ros_mps;
        if [b.grass, b.shrub, b.other].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(crate::Error::config("base rates of spread must be finite and >= 0"));
        }
        if !(self.floor > 0.0 && self.floor <= 1.0) {
            return Err(crate::Error::config("ROS floor must lie in (0, 1]"));
        }
        if !(self.env_min > 0.0 && self.env_min <= self.env_max) {
            return Err(crate::Error::config("need 0 < env_min <= env_max"));
        }
        Ok(())
    }

    pub fn base(&self, class: LandClass) -> f64 {
        match class {
            LandClass::Grass => self.base_ros_mps.grass,
            LandClass::Shrub => self.base_ros_mps.shrub,
            LandClass::Other => self.base_ros_mps.other,
            LandClass::WaterUnburnable => 0.0,
        }
    }

    /// Environmental multiplier from weather and forcing, clamped to `[env_min, env_max]`.
    pub fn env_factor(&self, w: &WeatherSample, f: &Forcing) -> f64 {
        let exponent = self.temp_coeff * (w.temperature_c - self.temp_ref_c)
            - self.humidity_coeff * (w.rel_humidity_pct - self.humidity_ref_pct)
            + self.curing_coeff * (f.curing_factor - self.curing_ref_pct) / 100.0
            + self.drought_coeff * (f.drought_factor - self.drought_ref);
        exponent.exp().clamp(self.env_min, self.env_max)
    }

    /// Wind/slope directional factor, excluding base rate and environment.
    #[inline]
    pub fn directional(&self, wind: (f64, f64), grad: (f64, f64), dir: (f64, f64)) -> f64 {
        let along_wind = wind.0 * dir.0 + wind.1 * dir.1;
        let along_slope = grad.0 * dir.0 + grad.1 * dir.1;
        (1.0 + self.wind_gain * along_wind).max(self.floor) * (self.slope_gain * along_slope).exp()
    }
}

/// Spread speed (m/s) into `pixel` along unit vector `dir` (x east, y north).
pub fn ros(pixel: (usize, usize), dir: (f64, f64), weather: &WeatherSample, scenario: &Scenario, params: &RosParams) -> f64 {
    let class = scenario.landclass.classes.get(pixel.0, pixel.1);
    let base = params.base(class);
    if base == 0.0 {
        return 0.0;
    }
    let grad = (f64::from(scenario.grad_x.get(pixel.0, pixel.1)), f64::from(scenario.grad_y.get(pixel.0, pixel.1)));
    base * params.directional((weather.wind_x_mps, weather.wind_y_mps), grad, dir) * params.env_factor(weather, &scenario.forcing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;
    use crate::worldgen::{LandClassMap, WeatherSeries};

    pub(crate) fn flat(h: usize, w: usize, class: LandClass) -> Scenario {
        Scenario {
            grad_x: Raster::filled(h, w, 0.0),
            grad_y: Raster::filled(h, w, 0.0),
            landclass: LandClassMap { classes: Raster::filled(h, w, class) },
            weather: WeatherSeries::default(),
            forcing: Forcing { drought_factor: 8.0, curing_factor: 85.0 },
            ignition: (h / 2, w / 2),
            resolution_m: 30.0,
            interval_minutes: 30.0,
            seed: 0,
        }
    }

    fn reference_weather(p: &RosParams, wind: (f64, f64)) -> WeatherSample {
        WeatherSample { temperature_c: p.temp_ref_c, wind_x_mps: wind.0, wind_y_mps: wind.1, rel_humidity_pct: p.humidity_ref_pct }
    }

    const DIRS: [(f64, f64); 4] = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2)];

    #[test]
    fn water_never_spreads() {
        let s = flat(4, 4, LandClass::WaterUnburnable);
        let p = RosParams::default();
        for d in DIRS {
            assert_eq!(ros((1, 1), d, &reference_weather(&p, (10.0, 3.0)), &s, &p), 0.0);
        }
    }

    #[test]
    fn isotropic_without_wind_or_slope() {
        let p = RosParams::default();
        let w = reference_weather(&p, (0.0, 0.0));
        for class in [LandClass::Grass, LandClass::Shrub, LandClass::Other] {
            let s = flat(4, 4, class);
            assert_eq!(p.env_factor(&w, &s.forcing), 1.0);
            for d in DIRS {
                assert_eq!(ros((2, 2), d, &w, &s, &p), p.base(class));
            }
        }
    }

    #[test]
    fn head_to_back_ratio() {
        let p = RosParams::default();
        let s = flat(4, 4, LandClass::Grass);
        let w = reference_weather(&p, (5.0, 0.0));
        let head = ros((1, 1), (1.0, 0.0), &w, &s, &p);
        let back = ros((1, 1), (-1.0, 0.0), &w, &s, &p);
        // k_w = 0.15: (1 + 0.75) / max(0.05, 0.25)
        let expected = (1.0 + 5.0 * 0.15) / f64::max(0.05, 1.0 - 5.0 * 0.15);
        assert!((head / back - expected).abs() < 1e-12);
        assert!((head / back - 7.0).abs() < 1e-12);
    }

    #[test]
    fn floor_applies_to_strong_back_wind() {
        let p = RosParams::default();
        let s = flat(4, 4, LandClass::Grass);
        let w = reference_weather(&p, (20.0, 0.0));
        assert!((ros((1, 1), (-1.0, 0.0), &w, &s, &p) - p.base_ros_mps.grass * p.floor).abs() < 1e-15);
    }

    #[test]
    fn env_factor_is_clamped() {
        let p = RosParams::default();
        let f = Forcing { drought_factor: 10.0, curing_factor: 100.0 };
        let hot = WeatherSample { temperature_c: 90.0, rel_humidity_pct: 0.0, ..Default::default() };
        let wet = WeatherSample { temperature_c: 0.0, rel_humidity_pct: 100.0, ..Default::default() };
        assert_eq!(p.env_factor(&hot, &f), 3.0);
        assert_eq!(p.env_factor(&wet, &f), 0.2);
    }
}
