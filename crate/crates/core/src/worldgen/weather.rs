use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::child_rng;

/// One weather poll (or interpolated slice). Wind is the air-motion vector,
/// `x` east and `y` north.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WeatherSample {
    pub temperature_c: f64,
    pub wind_x_mps: f64,
    pub wind_y_mps: f64,
    pub rel_humidity_pct: f64,
}

impl WeatherSample {
    pub fn wind_speed(&self) -> f64 {
        self.wind_x_mps.hypot(self.wind_y_mps)
    }

    fn lerp(&self, other: &Self, f: f64) -> Self {
        let l = |a: f64, b: f64| a + (b - a) * f;
        Self {
            temperature_c: l(self.temperature_c, other.temperature_c),
            wind_x_mps: l(self.wind_x_mps, other.wind_x_mps),
            wind_y_mps: l(self.wind_y_mps, other.wind_y_mps),
            rel_humidity_pct: l(self.rel_humidity_pct, other.rel_humidity_pct),
        }
    }
}

/// Polls at interval boundaries: `polls[t]` is the reading at the start of interval `t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeatherSeries {
    pub polls: Vec<WeatherSample>,
}

pub const CSV_HEADER: &str = "interval,temp_C,wind_x_mps,wind_y_mps,rel_humidity_pct";

impl WeatherSeries {
    pub fn len(&self) -> usize {
        self.polls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polls.is_empty()
    }

    /// Number of whole intervals covered (one less than the poll count).
    pub fn intervals(&self) -> usize {
        self.polls.len().saturating_sub(1)
    }

    /// Linear upsampling to `slices_per_interval` slices per interval. Slice
    /// `k` of interval `t` sits at fraction `k / S` between polls `t` and `t + 1`.
    pub fn interpolate(&self, slices_per_interval: usize) -> Result<Vec<WeatherSample>> {
        if self.polls.len() < 2 {
            return Err(Error::Domain("weather interpolation needs at least two polls".into()));
        }
        if slices_per_interval == 0 {
            return Err(Error::config("slices_per_interval must be >= 1"));
        }
        let s = slices_per_interval;
        let mut out = Vec::with_capacity(self.intervals() * s);
        for pair in self.polls.windows(2) {
            for k in 0..s {
                out.push(pair[0].lerp(&pair[1], k as f64 / s as f64));
            }
        }
        Ok(out)
    }

    pub fn rotate(&self, t: crate::raster::Dihedral) -> Self {
        Self {
            polls: self
                .polls
                .iter()
                .map(|p| {
                    let (x, y) = t.apply_vector((p.wind_x_mps, p.wind_y_mps));
                    WeatherSample { wind_x_mps: x, wind_y_mps: y, ..*p }
                })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for (i, p) in self.polls.iter().enumerate() {
            s.push_str(&format!("{i},{},{},{},{}\n", p.temperature_c, p.wind_x_mps, p.wind_y_mps, p.rel_humidity_pct));
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(bad(format!("expected header `{CSV_HEADER}`")));
        }
        let mut polls = Vec::new();
        for (row, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(bad(format!("row {row}: expected 5 fields")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("row {row}: {e}")));
            if f[0].parse::<usize>().ok() != Some(row) {
                return Err(bad(format!("row {row}: interval index out of sequence")));
            }
            polls.push(WeatherSample {
                temperature_c: num(f[1])?,
                wind_x_mps: num(f[2])?,
                wind_y_mps: num(f[3])?,
                rel_humidity_pct: num(f[4])?,
            });
        }
        Ok(Self { polls })
    }
}

/// Fire-weather regime. Scenario means are drawn uniformly from the
/// `*_mean_*` ranges; polls then follow AR(1) noise around a drifting mean,
/// with an optional wind shift part-way through.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeatherRegime {
    pub temp_mean_c: (f64, f64),
    pub rh_mean_pct: (f64, f64),
    pub wind_mean_mps: (f64, f64),
    pub temp_sd: f64,
    pub rh_sd: f64,
    pub wind_sd: f64,
    pub direction_sd_deg: f64,
    /// Per-poll standard deviation of the mean's random walk (temperature and humidity).
    pub drift_sd: f64,
    pub ar_coeff: f64,
    pub direction_change_prob: f64,
    pub direction_change_deg: (f64, f64),
    pub max_wind_mps: f64,
}

impl Default for WeatherRegime {
    fn default() -> Self {
        Self {
            temp_mean_c: (30.0, 42.0),
            rh_mean_pct: (8.0, 30.0),
            wind_mean_mps: (3.0, 15.0),
            temp_sd: 1.0,
            rh_sd: 2.0,
            wind_sd: 1.2,
            direction_sd_deg: 6.0,
            drift_sd: 0.3,
            ar_coeff: 0.8,
            direction_change_prob: 0.7,
            direction_change_deg: (45.0, 120.0),
            max_wind_mps: 25.0,
        }
    }
}

impl WeatherRegime {
    /// Same means with all variability switched off.
    pub fn steady(self) -> Self {
        Self { temp_sd: 0.0, rh_sd: 0.0, wind_sd: 0.0, direction_sd_deg: 0.0, drift_sd: 0.0, direction_change_prob: 0.0, ..self }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

struct Ar1 {
    phi: f64,
    sd: f64,
    state: f64,
}

impl Ar1 {
    fn next<R: Rng>(&mut self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.state = self.phi * self.state + self.sd * (1.0 - self.phi * self.phi).sqrt() * z;
        self.state
    }
}

pub fn gen_weather(seed: u64, n_intervals: usize, regime: &WeatherRegime) -> Result<WeatherSeries> {
    if n_intervals == 0 {
        return Err(Error::config("weather needs n_intervals >= 1"));
    }
    let mut rng = child_rng(seed, "weather", 0);
    let temp_mean = uniform(&mut rng, regime.temp_mean_c);
    let rh_mean = uniform(&mut rng, regime.rh_mean_pct);
    let wind_mean = uniform(&mut rng, regime.wind_mean_mps);
    let heading = rng.gen_range(0.0..2.0 * PI);
    let change = (rng.gen_range(0.0..1.0) < regime.direction_change_prob).then(|| {
        let at = rng.gen_range(n_intervals / 4..=(3 * n_intervals / 4).max(n_intervals / 4));
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        (at, sign * uniform(&mut rng, regime.direction_change_deg).to_radians())
    });
    let phi = regime.ar_coeff.clamp(0.0, 0.999);
    let mut temp_noise = Ar1 { phi, sd: regime.temp_sd, state: 0.0 };
    let mut rh_noise = Ar1 { phi, sd: regime.rh_sd, state: 0.0 };
    let mut wind_noise = Ar1 { phi, sd: regime.wind_sd, state: 0.0 };
    let mut dir_noise = Ar1 { phi, sd: regime.direction_sd_deg.to_radians(), state: 0.0 };
    let (mut temp_drift, mut rh_drift) = (0.0, 0.0);
    let mut polls = Vec::with_capacity(n_intervals + 1);
    for t in 0..=n_intervals {
        let shift = match change {
            // shift ramps in over two polls
            Some((at, delta)) if t > at => delta * ((t - at) as f64 / 2.0).min(1.0),
            _ => 0.0,
        };
        let direction = heading + shift + dir_noise.next(&mut rng);
        let speed = (wind_mean + wind_noise.next(&mut rng)).clamp(0.0, regime.max_wind_mps);
        let temperature_c = temp_mean + temp_drift + temp_noise.next(&mut rng);
        let rel_humidity_pct = (rh_mean + rh_drift + rh_noise.next(&mut rng)).clamp(0.0, 100.0);
        let (sin, cos) = direction.sin_cos();
        polls.push(WeatherSample { temperature_c, wind_x_mps: speed * cos, wind_y_mps: speed * sin, rel_humidity_pct });
        if regime.drift_sd > 0.0 {
            temp_drift += regime.drift_sd * rng.sample::<f64, _>(StandardNormal);
            rh_drift += regime.drift_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(WeatherSeries { polls })
}
