use serde::{Deserialize, Serialize};

use super::noise;
use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq)]
pub struct Heightmap {
    /// Elevation in meters.
    pub values: Raster<f64>,
    pub resolution_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoughnessParams {
    /// Peak deviation from the mean elevation, meters.
    pub amplitude_m: f64,
    pub base_wavelength_px: f64,
    pub octaves: u32,
    pub persistence: f64,
    pub mean_elevation_m: f64,
}

impl Default for RoughnessParams {
    fn default() -> Self {
        Self { amplitude_m: 120.0, base_wavelength_px: 256.0, octaves: 5, persistence: 0.5, mean_elevation_m: 200.0 }
    }
}

impl RoughnessParams {
    fn validate(&self) -> Result<()> {
        let finite = [self.amplitude_m, self.base_wavelength_px, self.persistence, self.mean_elevation_m]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("roughness parameters must be finite"));
        }
        if self.base_wavelength_px <= 0.0 || self.octaves == 0 || self.amplitude_m < 0.0 {
            return Err(Error::config("need base_wavelength_px > 0, octaves >= 1, amplitude_m >= 0"));
        }
        Ok(())
    }
}

pub const MIN_SIDE: usize = 64;

pub fn gen_heightmap(seed: u64, shape: (usize, usize), params: &RoughnessParams, resolution_m: f64) -> Result<Heightmap> {
    params.validate()?;
    if shape.0 < MIN_SIDE || shape.1 < MIN_SIDE {
        return Err(Error::config(format!("heightmap sides must be >= {MIN_SIDE}, got {shape:?}")));
    }
    if !(resolution_m.is_finite() && resolution_m > 0.0) {
        return Err(Error::config("resolution_m must be positive"));
    }
    let field = if params.amplitude_m == 0.0 {
        Raster::filled(shape.0, shape.1, 0.0)
    } else {
        noise::fractal(seed, shape, params.base_wavelength_px, params.octaves, params.persistence)
    };
    let values = field.map(|v| params.mean_elevation_m + params.amplitude_m * v);
    Ok(Heightmap { values, resolution_m })
}

/// Slope rasters `(dz/dx, dz/dy)` with `x` east and `y` north: central
/// differences in the interior, one-sided at the borders.
pub fn height_to_gradients(h: &Heightmap) -> (Raster<f64>, Raster<f64>) {
    let z = &h.values;
    let (rows, cols) = z.shape();
    let res = h.resolution_m;
    let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / (span as f64 * res) };
    let gx = Raster::from_fn(rows, cols, |r, c| {
        let (a, b) = (c.saturating_sub(1), (c + 1).min(cols - 1));
        diff(z.get(r, a), z.get(r, b), b - a)
    });
    // north is up: y grows as the row index shrinks
    let gy = Raster::from_fn(rows, cols, |r, c| {
        let (a, b) = (r.saturating_sub(1), (r + 1).min(rows - 1));
        diff(z.get(b, c), z.get(a, c), b - a)
    });
    (gx, gy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn deterministic_in_seed() {
        let p = RoughnessParams::default();
        let a = gen_heightmap(1, (256, 256), &p, 30.0).unwrap();
        let b = gen_heightmap(1, (256, 256), &p, 30.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ_almost_everywhere() {
        let p = RoughnessParams::default();
        let a = gen_heightmap(1, (256, 256), &p, 30.0).unwrap();
        let b = gen_heightmap(2, (256, 256), &p, 30.0).unwrap();
        let differ = a.values.data().iter().zip(b.values.data()).filter(|(x, y)| x != y).count();
        assert!(differ as f64 > 0.5 * a.values.len() as f64);
    }

    #[test]
    fn zero_amplitude_is_flat() {
        let p = RoughnessParams { amplitude_m: 0.0, ..Default::default() };
        let h = gen_heightmap(7, (64, 80), &p, 30.0).unwrap();
        assert!(h.values.data().iter().all(|&v| v == p.mean_elevation_m));
        let (gx, gy) = height_to_gradients(&h);
        assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_params() {
        let p = RoughnessParams { amplitude_m: f64::NAN, ..Default::default() };
        assert!(gen_heightmap(1, (64, 64), &p, 30.0).is_err());
        assert!(gen_heightmap(1, (63, 64), &RoughnessParams::default(), 30.0).is_err());
    }

    #[test]
    fn plane_has_constant_slope() {
        let res = 30.0;
        let values = Raster::from_fn(10, 12, |_, c| 3.0 * c as f64 * res);
        let (gx, gy) = height_to_gradients(&Heightmap { values, resolution_m: res });
        for r in 1..9 {
            for c in 1..11 {
                assert!((gx.get(r, c) - 3.0).abs() < 1e-12);
                assert_eq!(gy.get(r, c), 0.0);
            }
        }
    }

    /// Independent oracle: explicit stencil by position class.
    fn oracle(z: &Raster<f64>, res: f64, r: usize, c: usize) -> (f64, f64) {
        let (h, w) = z.shape();
        let gx = if c == 0 {
            (z.get(r, 1) - z.get(r, 0)) / res
        } else if c == w - 1 {
            (z.get(r, w - 1) - z.get(r, w - 2)) / res
        } else {
            (z.get(r, c + 1) - z.get(r, c - 1)) / (2.0 * res)
        };
        let dz_drow = if r == 0 {
            (z.get(1, c) - z.get(0, c)) / res
        } else if r == h - 1 {
            (z.get(h - 1, c) - z.get(h - 2, c)) / res
        } else {
            (z.get(r + 1, c) - z.get(r - 1, c)) / (2.0 * res)
        };
        (gx, -dz_drow)
    }

    #[test]
    fn matches_finite_difference_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let values = Raster::from_fn(8, 8, |_, _| rng.gen_range(-50.0..50.0));
        let h = Heightmap { values, resolution_m: 30.0 };
        let (gx, gy) = height_to_gradients(&h);
        for r in 0..8 {
            for c in 0..8 {
                let (ox, oy) = oracle(&h.values, 30.0, r, c);
                assert!((gx.get(r, c) - ox).abs() <= 1e-12);
                assert!((gy.get(r, c) - oy).abs() <= 1e-12);
            }
        }
    }
}
