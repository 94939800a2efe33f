//! Sample stores. A store keeps only the manifest of `(fire, t, centre,
//! transform)` draws plus shared references to the fires; samples are cut on
//! demand, so a store of thousands of 576×576 samples costs a few megabytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{augment, crop_sample, perimeter_points, NormalizedScenario, Sample, SampleMeta, SplitSpec};
use crate::error::{Error, Result};
use crate::firesim::{arrival_to_state, ArrivalRaster};
use crate::raster::Dihedral;
use crate::rng::child_rng;
use crate::scalar::Scalar;

/// A normalized scenario with its simulated arrival raster.
#[derive(Debug, Clone)]
pub struct FireRecord {
    pub norm: NormalizedScenario,
    pub arrival: ArrivalRaster,
}

pub type FireTable = BTreeMap<u64, Arc<FireRecord>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub c: usize,
    pub p: usize,
    pub slices_per_interval: usize,
    pub t_max: usize,
    pub seed: u64,
    pub entries: Vec<SampleMeta>,
}

impl StoreManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing { path: path.to_path_buf(), hint: "run `pyroemu make-dataset`".into() });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct SampleStore {
    pub manifest: StoreManifest,
    fires: Arc<FireTable>,
}

impl SampleStore {
    /// Reattaches a manifest to the fires it was drawn from.
    pub fn new(manifest: StoreManifest, fires: Arc<FireTable>) -> Result<Self> {
        if let Some(m) = manifest.entries.iter().find(|m| !fires.contains_key(&m.fire_seed)) {
            return Err(Error::Missing {
                path: format!("scenario {}", m.fire_seed).into(),
                hint: "the sample manifest references a fire that is not loaded".into(),
            });
        }
        Ok(Self { manifest, fires })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn entries(&self) -> &[SampleMeta] {
        &self.manifest.entries
    }

    pub fn fires(&self) -> &Arc<FireTable> {
        &self.fires
    }

    pub fn get<T: Scalar>(&self, i: usize) -> Result<Sample<T>> {
        let meta = self.manifest.entries.get(i).ok_or_else(|| Error::shape(format!("sample {i} out of {}", self.len())))?;
        let fire = &self.fires[&meta.fire_seed];
        let raw = crop_sample(&fire.norm, &fire.arrival, meta.t, meta.center, meta.c, meta.p, self.manifest.t_max)?;
        Ok(augment(&raw, Dihedral::new(meta.transform_id)?))
    }
}

/// Intervals `t < t_max` during which the fire grows.
pub fn growing_intervals(arrival: &ArrivalRaster, t_max: usize) -> Vec<usize> {
    (0..t_max).filter(|&t| arrival.burned_count_at((t + 1) as f64) > arrival.burned_count_at(t as f64)).collect()
}

fn draws(fire: &FireRecord, n: usize, c: usize, p: usize, t_max: usize, seed: u64) -> Result<Vec<SampleMeta>> {
    let ts = growing_intervals(&fire.arrival, t_max);
    if ts.is_empty() || n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = child_rng(seed, "samples", fire.norm.seed);
    let side = c + 2 * p;
    let mut perimeters: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let t = ts[rng.gen_range(0..ts.len())];
        if !perimeters.contains_key(&t) {
            let state: crate::raster::Raster<f32> = arrival_to_state(&fire.arrival, t, t_max);
            let (h, w) = state.shape();
            let state = Array2::from_shape_vec((h, w), state.into_vec()).expect("state shape");
            perimeters.insert(t, perimeter_points(&state)?);
        }
        let perim = &perimeters[&t];
        let center = perim[rng.gen_range(0..perim.len())];
        let transform_id = rng.gen_range(0..8u8);
        let origin = super::window_origin(center, side, fire.norm.shape())?;
        out.push(SampleMeta { fire_seed: fire.norm.seed, t, center, origin, transform_id, c, p });
    }
    Ok(out)
}

fn store_for(fires: &Arc<FireTable>, seeds: &[u64], c: usize, p: usize, per_fire: usize, seed: u64, t_max: usize) -> Result<SampleStore> {
    let mut entries = Vec::new();
    let mut slices = None;
    for s in seeds {
        let fire = fires.get(s).ok_or_else(|| Error::Missing {
            path: format!("scenario {s}").into(),
            hint: "run `pyroemu worldgen` and `pyroemu simulate` first".into(),
        })?;
        slices.get_or_insert(fire.norm.slices_per_interval);
        entries.extend(draws(fire, per_fire, c, p, t_max, seed)?);
    }
    let manifest = StoreManifest { c, p, slices_per_interval: slices.unwrap_or(4), t_max, seed, entries };
    SampleStore::new(manifest, fires.clone())
}

/// Draws `samples_per_fire` `(t, perimeter point, transform)` triples per fire
/// for the train and validation splits.
pub fn build_dataset(
    fires: Arc<FireTable>,
    split: &SplitSpec,
    c: usize,
    p: usize,
    samples_per_fire: usize,
    seed: u64,
    t_max: usize,
) -> Result<(SampleStore, SampleStore)> {
    split.validate()?;
    let side = c + 2 * p;
    if side % crate::emulator::DOWNSAMPLE != 0 {
        return Err(Error::config(format!("sample side {side} must be divisible by {}", crate::emulator::DOWNSAMPLE)));
    }
    let train = store_for(&fires, &split.train_fires, c, p, samples_per_fire, seed, t_max)?;
    let val = store_for(&fires, &split.val_fires, c, p, samples_per_fire, seed, t_max)?;
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{normalize_units, TrainStats};
    use crate::firesim::{simulate, RosParams};
    use crate::worldgen::{gen_scenario, WorldgenConfig};

    fn fires(n: u64) -> Arc<FireTable> {
        let cfg = WorldgenConfig { side_px: (96, 96), ..Default::default() };
        let scen: Vec<_> = (0..n).map(|s| gen_scenario(s, &cfg).unwrap()).collect();
        let stats = TrainStats::from_training(&scen.iter().collect::<Vec<_>>(), 4).unwrap();
        Arc::new(
            scen.iter()
                .map(|s| {
                    let arrival = simulate(s, &RosParams::default(), 22).unwrap();
                    (s.seed, Arc::new(FireRecord { norm: normalize_units(s, &stats, 4).unwrap(), arrival }))
                })
                .collect(),
        )
    }

    #[test]
    fn counts_determinism_and_hygiene() {
        let f = fires(5);
        let split = SplitSpec::from_seeds(&[0, 1, 2, 3, 4], 3).unwrap();
        let (train, val) = build_dataset(f.clone(), &split, 48, 8, 6, 9, 22).unwrap();
        assert_eq!(train.len(), 18);
        assert_eq!(val.len(), 12);
        let (again, _) = build_dataset(f.clone(), &split, 48, 8, 6, 9, 22).unwrap();
        assert_eq!(again.manifest, train.manifest);
        assert!(train.entries().iter().all(|m| split.train_fires.contains(&m.fire_seed)));
        assert!(val.entries().iter().all(|m| split.val_fires.contains(&m.fire_seed)));
        let (empty, _) = build_dataset(f, &split, 48, 8, 0, 9, 22).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn materialized_samples_are_monotone() {
        let f = fires(3);
        let split = SplitSpec::from_seeds(&[0, 1, 2], 2).unwrap();
        let (train, _) = build_dataset(f, &split, 48, 8, 4, 1, 22).unwrap();
        for i in 0..train.len() {
            let s: Sample<f64> = train.get(i).unwrap();
            assert_eq!(s.dim(), (64, 64));
            for (a, b) in s.input_state.iter().zip(s.target_state.iter()) {
                assert!(*a == 0.0 || *b > *a);
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let f = fires(2);
        let split = SplitSpec::from_seeds(&[0, 1], 1).unwrap();
        let (train, _) = build_dataset(f.clone(), &split, 48, 8, 3, 2, 22).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.json");
        train.manifest.save(&path).unwrap();
        let back = SampleStore::new(StoreManifest::load(&path).unwrap(), f).unwrap();
        assert_eq!(back.manifest, train.manifest);
        assert!(matches!(StoreManifest::load(&dir.path().join("nope.json")), Err(Error::Missing { .. })));
    }
}
