use serde::{Deserialize, Serialize};

use super::noise;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandClass {
    Grass = 0,
    Shrub = 1,
    WaterUnburnable = 2,
    Other = 3,
}

impl LandClass {
    pub const ALL: [LandClass; 4] = [LandClass::Grass, LandClass::Shrub, LandClass::WaterUnburnable, LandClass::Other];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(v: f32) -> Option<Self> {
        match v {
            x if x == 0.0 => Some(LandClass::Grass),
            x if x == 1.0 => Some(LandClass::Shrub),
            x if x == 2.0 => Some(LandClass::WaterUnburnable),
            x if x == 3.0 => Some(LandClass::Other),
            _ => None,
        }
    }

    pub fn burnable(self) -> bool {
        self != LandClass::WaterUnburnable
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandClassMap {
    pub classes: Raster<LandClass>,
}

impl LandClassMap {
    pub fn fractions(&self) -> ClassProportions {
        let n = self.classes.len() as f64;
        let count = |k: LandClass| self.classes.data().iter().filter(|&&c| c == k).count() as f64 / n;
        ClassProportions {
            grass: count(LandClass::Grass),
            shrub: count(LandClass::Shrub),
            water: count(LandClass::WaterUnburnable),
            other: count(LandClass::Other),
        }
    }

    pub fn to_labels(&self) -> Raster<f32> {
        self.classes.map(|c| f32::from(c.label()))
    }

    pub fn from_labels(r: &Raster<f32>) -> Result<Self> {
        let mut out = Vec::with_capacity(r.len());
        for &v in r.data() {
            out.push(LandClass::from_label(v).ok_or_else(|| Error::Domain(format!("invalid land-class label {v}")))?);
        }
        Ok(Self { classes: Raster::from_vec(r.height(), r.width(), out)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProportions {
    pub grass: f64,
    pub shrub: f64,
    pub water: f64,
    pub other: f64,
}

impl Default for ClassProportions {
    /// Regional mix dominated by grassland, then mallee-heath shrubland and water.
    fn default() -> Self {
        Self { grass: 0.788, shrub: 0.105, water: 0.0627, other: 0.0443 }
    }
}

impl ClassProportions {
    pub fn get(&self, c: LandClass) -> f64 {
        match c {
            LandClass::Grass => self.grass,
            LandClass::Shrub => self.shrub,
            LandClass::WaterUnburnable => self.water,
            LandClass::Other => self.other,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.grass, self.shrub, self.water, self.other];
        if all.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::config("class proportions must be finite and non-negative"));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("class proportions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchScales {
    pub water_wavelength_px: f64,
    pub shrub_wavelength_px: f64,
    pub other_wavelength_px: f64,
}

impl Default for PatchScales {
    fn default() -> Self {
        Self { water_wavelength_px: 40.0, shrub_wavelength_px: 64.0, other_wavelength_px: 32.0 }
    }
}

/// Marks the `count` highest-scoring unassigned pixels with `class`.
fn claim_top(assigned: &mut [Option<LandClass>], score: &Raster<f64>, count: usize, class: LandClass) {
    let mut idx: Vec<usize> = (0..assigned.len()).filter(|&i| assigned[i].is_none()).collect();
    idx.sort_by(|&a, &b| score.data()[b].total_cmp(&score.data()[a]).then(a.cmp(&b)));
    for &i in idx.iter().take(count) {
        assigned[i] = Some(class);
    }
}

/// Thresholds independent smooth noise fields at their quantiles so each
/// class covers its target share as coherent patches. Water is placed first,
/// then "other", then shrub; the remainder is grass.
pub fn gen_landclass(seed: u64, shape: (usize, usize), targets: &ClassProportions, scales: &PatchScales) -> Result<LandClassMap> {
    targets.validate()?;
    let n = shape.0 * shape.1;
    let mut counts = Vec::new();
    for class in [LandClass::WaterUnburnable, LandClass::Other, LandClass::Shrub] {
        let p = targets.get(class);
        let k = (p * n as f64).round() as usize;
        if p > 0.0 && k == 0 {
            return Err(Error::Domain(format!("{class:?} share {p} is below one pixel on a {shape:?} map")));
        }
        counts.push((class, k));
    }
    let mut assigned: Vec<Option<LandClass>> = vec![None; n];
    for (i, (class, k)) in counts.into_iter().enumerate() {
        if k == 0 {
            continue;
        }
        let wavelength = match class {
            LandClass::WaterUnburnable => scales.water_wavelength_px,
            LandClass::Other => scales.other_wavelength_px,
            _ => scales.shrub_wavelength_px,
        };
        let field = noise::fractal(derive_seed(seed, "landclass", i as u64), shape, wavelength, 3, 0.45);
        claim_top(&mut assigned, &field, k, class);
    }
    let classes = assigned.into_iter().map(|c| c.unwrap_or(LandClass::Grass)).collect();
    Ok(LandClassMap { classes: Raster::from_vec(shape.0, shape.1, classes)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mean 4-connected component size per class.
    fn mean_patch_size(map: &LandClassMap, class: LandClass) -> Option<f64> {
        let (h, w) = map.classes.shape();
        let mut seen = vec![false; h * w];
        let (mut comps, mut pixels) = (0usize, 0usize);
        for start in 0..h * w {
            if seen[start] || map.classes.data()[start] != class {
                continue;
            }
            comps += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                pixels += 1;
                let (r, c) = (i / w, i % w);
                let mut push = |rr: usize, cc: usize| {
                    let j = rr * w + cc;
                    if !seen[j] && map.classes.data()[j] == class {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if r > 0 {
                    push(r - 1, c);
                }
                if r + 1 < h {
                    push(r + 1, c);
                }
                if c > 0 {
                    push(r, c - 1);
                }
                if c + 1 < w {
                    push(r, c + 1);
                }
            }
        }
        (comps > 0).then(|| pixels as f64 / comps as f64)
    }

    #[test]
    fn realized_fractions_match_targets() {
        let t = ClassProportions::default();
        let m = gen_landclass(3, (256, 256), &t, &PatchScales::default()).unwrap();
        let f = m.fractions();
        for c in LandClass::ALL {
            assert!((f.get(c) - t.get(c)).abs() <= 0.05, "{c:?}");
        }
    }

    #[test]
    fn zero_water_target_gives_no_water() {
        let t = ClassProportions { grass: 0.85, shrub: 0.1, water: 0.0, other: 0.05 };
        let m = gen_landclass(4, (128, 128), &t, &PatchScales::default()).unwrap();
        assert!(m.classes.data().iter().all(|&c| c != LandClass::WaterUnburnable));
    }

    #[test]
    fn classes_form_patches() {
        let m = gen_landclass(5, (256, 256), &ClassProportions::default(), &PatchScales::default()).unwrap();
        for c in LandClass::ALL {
            let size = mean_patch_size(&m, c).unwrap();
            assert!(size > 4.0, "{c:?} mean patch size {size}");
        }
    }

    #[test]
    fn rejects_bad_targets() {
        let bad = ClassProportions { grass: 0.5, shrub: 0.1, water: 0.1, other: 0.1 };
        assert!(gen_landclass(1, (64, 64), &bad, &PatchScales::default()).is_err());
        let tiny = ClassProportions { grass: 1.0 - 1e-7, shrub: 0.0, water: 1e-7, other: 0.0 };
        assert!(gen_landclass(1, (64, 64), &tiny, &PatchScales::default()).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let m = gen_landclass(6, (64, 64), &ClassProportions::default(), &PatchScales::default()).unwrap();
        assert_eq!(LandClassMap::from_labels(&m.to_labels()).unwrap(), m);
    }
}
