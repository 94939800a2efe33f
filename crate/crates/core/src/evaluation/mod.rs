//! Jaccard scoring of emulated against simulated fires, arrival-difference
//! maps and contour-overlay images.

mod plot;

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use plot::{panel_intervals, render_plots};

use crate::dataset::FireRecord;
use crate::emulator::{Emulator, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::firesim::{arrival_to_state, ArrivalRaster};
use crate::raster::Raster;
use crate::scalar::Scalar;

/// Half of one interval's ramp increment.
pub fn default_threshold(t_max: usize) -> f64 {
    0.5 / (t_max + 1) as f64
}

pub fn burned_mask<T: Scalar>(state: &Array2<T>, threshold: f64) -> Array2<bool> {
    let th = T::of(threshold);
    state.mapv(|v| v > th)
}

/// Intersection over union; two empty masks score 1.
pub fn jaccard(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("mask {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FireEval {
    pub fire_seed: u64,
    /// Jaccard at the final interval.
    pub jaccard: f64,
    /// Target burned pixels at the final interval.
    pub area: usize,
    /// Jaccard at each interval `t_start..=t_end`.
    pub series: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t_start: usize,
    pub t_end: usize,
    pub fires: Vec<FireEval>,
    pub mean_jaccard: f64,
    pub weighted_jaccard: f64,
    /// Mean over fires of the time-averaged per-interval Jaccard.
    pub mean_series_jaccard: f64,
}

impl EvalReport {
    pub fn from_fires(t_start: usize, t_end: usize, fires: Vec<FireEval>) -> Result<Self> {
        if fires.is_empty() {
            return Err(Error::Domain("evaluation needs at least one fire".into()));
        }
        let n = fires.len() as f64;
        let mean_jaccard = fires.iter().map(|f| f.jaccard).sum::<f64>() / n;
        let weighted_jaccard = weighted_mean_jaccard(&fires)?;
        let mean_series_jaccard = fires.iter().map(|f| f.series.iter().sum::<f64>() / f.series.len().max(1) as f64).sum::<f64>() / n;
        Ok(Self { t_start, t_end, fires, mean_jaccard, weighted_jaccard, mean_series_jaccard })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string_pretty(self)?)
    }

    /// One row per fire and interval.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("fire_seed,interval,jaccard\n");
        for f in &self.fires {
            for (k, j) in f.series.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", f.fire_seed, self.t_start + k, j));
            }
        }
        out
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Burned-area weighted mean of final Jaccard scores.
pub fn weighted_mean_jaccard(fires: &[FireEval]) -> Result<f64> {
    if fires.is_empty() {
        return Err(Error::Domain("weighted mean of zero fires".into()));
    }
    let total: f64 = fires.iter().map(|f| f.area as f64).sum();
    if total == 0.0 {
        log::warn!("all target burned areas are zero; using the unweighted mean");
        return Ok(fires.iter().map(|f| f.jaccard).sum::<f64>() / fires.len() as f64);
    }
    Ok(fires.iter().map(|f| f.area as f64 * f.jaccard).sum::<f64>() / total)
}

/// First interval at which each pixel is burned in `states` (element `k` is
/// interval `t_start + k`); `+inf` where it never burns.
pub fn predicted_arrival<T: Scalar>(states: &[Array2<T>], t_start: usize, threshold: f64) -> Result<Raster<f32>> {
    let first = states.first().ok_or_else(|| Error::Domain("empty rollout".into()))?;
    let (h, w) = first.dim();
    let mut out = Raster::filled(h, w, f32::INFINITY);
    for (k, s) in states.iter().enumerate() {
        if s.dim() != (h, w) {
            return Err(Error::shape(format!("rollout frame {k} is {:?}, expected {h}x{w}", s.dim())));
        }
        let th = T::of(threshold);
        for ((r, c), v) in s.indexed_iter() {
            if *v > th && out.get(r, c).is_infinite() {
                out.set(r, c, (t_start + k) as f32);
            }
        }
    }
    Ok(out)
}

/// Signed arrival difference in whole intervals, `target − predicted`, with
/// arrivals rounded up to the interval at which the pixel first shows as
/// burned and anything later than `horizon` treated as `horizon + 1`.
/// Positive entries mark early or spurious burning (false positives),
/// negative ones late or missed burning.
pub fn arrival_diff_map(pred: &Raster<f32>, target: &Raster<f32>, horizon: usize) -> Result<Raster<f32>> {
    let cap = (horizon + 1) as f32;
    let q = |a: f32| if a.is_finite() && a <= horizon as f32 { a.ceil() } else { cap };
    target.zip_map(pred, |t, p| q(t) - q(p))
}

/// Anything that can roll a fire forward from a given state.
pub trait FirePredictor<T: Scalar>: Sync {
    fn rollout(&self, fire: &FireRecord, initial: &Array2<T>, t_start: usize, t_end: usize) -> Result<Vec<Array2<T>>>;
}

impl<T: Scalar> FirePredictor<T> for Emulator<T> {
    fn rollout(&self, fire: &FireRecord, initial: &Array2<T>, t_start: usize, t_end: usize) -> Result<Vec<Array2<T>>> {
        Emulator::rollout(self, &fire.norm, initial, t_start, t_end)
    }
}

/// Replays the simulator's own arrival raster; scores 1 against itself.
pub struct SimulatorOracle {
    pub t_max: usize,
}

impl<T: Scalar> FirePredictor<T> for SimulatorOracle {
    fn rollout(&self, fire: &FireRecord, _initial: &Array2<T>, t_start: usize, t_end: usize) -> Result<Vec<Array2<T>>> {
        (t_start..=t_end).map(|t| Ok(state_array(&fire.arrival, t, self.t_max))).collect()
    }
}

pub fn state_array<T: Scalar>(arrival: &ArrivalRaster, t: usize, t_max: usize) -> Array2<T> {
    let (h, w) = arrival.shape();
    Array2::from_shape_vec((h, w), arrival_to_state::<T>(arrival, t, t_max).into_vec()).expect("state shape")
}

/// Crops a fire to the largest top-left window whose sides are multiples of the downsample factor.
pub fn fit_to_downsample(fire: &FireRecord) -> Result<FireRecord> {
    let (h, w) = fire.norm.shape();
    let (fh, fw) = (h / DOWNSAMPLE * DOWNSAMPLE, w / DOWNSAMPLE * DOWNSAMPLE);
    if fh == 0 || fw == 0 {
        return Err(Error::shape(format!("map {h}x{w} smaller than {DOWNSAMPLE}")));
    }
    if (fh, fw) == (h, w) {
        return Ok(fire.clone());
    }
    let mut norm = fire.norm.clone();
    norm.grad_x = norm.grad_x.window(0, 0, fh, fw)?;
    norm.grad_y = norm.grad_y.window(0, 0, fh, fw)?;
    norm.classes = norm.classes.window(0, 0, fh, fw)?;
    Ok(FireRecord { norm, arrival: fire.arrival.window(0, 0, fh, fw)? })
}

/// A scored rollout with everything needed for plotting.
pub struct RolloutResult<T> {
    pub eval: FireEval,
    pub states: Vec<Array2<T>>,
    pub diff: Raster<f32>,
    pub fire: FireRecord,
}

pub fn evaluate_rollout<T: Scalar, P: FirePredictor<T> + ?Sized>(
    predictor: &P,
    fire: &FireRecord,
    t_start: usize,
    t_end: usize,
    t_max: usize,
) -> Result<RolloutResult<T>> {
    if t_end > t_max || t_start > t_end {
        return Err(Error::Domain(format!("rollout range {t_start}..={t_end} outside 0..={t_max}")));
    }
    if t_end > fire.norm.intervals() {
        return Err(Error::Domain(format!("weather covers {} intervals, rollout needs {t_end}", fire.norm.intervals())));
    }
    let fire = fit_to_downsample(fire)?;
    let theta = default_threshold(t_max);
    let initial = state_array::<T>(&fire.arrival, t_start, t_max);
    let states = predictor.rollout(&fire, &initial, t_start, t_end)?;
    if states.len() != t_end - t_start + 1 {
        return Err(Error::shape(format!("rollout returned {} frames for {t_start}..={t_end}", states.len())));
    }
    let mut series = Vec::with_capacity(states.len());
    for (k, s) in states.iter().enumerate() {
        let target = burned_mask(&state_array::<T>(&fire.arrival, t_start + k, t_max), theta);
        series.push(jaccard(&burned_mask(s, theta), &target)?);
    }
    let area = fire.arrival.burned_count_at(t_end as f64);
    let pred_arrival = predicted_arrival(&states, t_start, theta)?;
    // the rollout starts from the true state, so earlier arrivals show as t_start
    let start = t_start as f32;
    let target_arrival = fire.arrival.arrival.map(|a| if a < start { start } else { a });
    let diff = arrival_diff_map(&pred_arrival, &target_arrival, t_end)?;
    let eval = FireEval { fire_seed: fire.norm.seed, jaccard: *series.last().expect("nonempty"), area, series };
    Ok(RolloutResult { eval, states, diff, fire })
}

/// Scores every listed fire in parallel; results keep the input order.
pub fn evaluate_fires<T: Scalar, P: FirePredictor<T> + ?Sized>(
    predictor: &P,
    fires: &[&FireRecord],
    t_start: usize,
    t_end: usize,
    t_max: usize,
) -> Result<EvalReport> {
    let evals = fires
        .par_iter()
        .map(|f| evaluate_rollout::<T, P>(predictor, f, t_start, t_end, t_max).map(|r| r.eval))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_fires(t_start, t_end, evals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{normalize_units, TrainStats};
    use crate::firesim::{simulate, RosParams};
    use crate::worldgen::{gen_scenario, WorldgenConfig};

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Array2<bool> {
        let mut m = Array2::from_elem((h, w), false);
        for &p in on {
            m[p] = true;
        }
        m
    }

    #[test]
    fn jaccard_examples() {
        let a = mask(2, 3, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(2, 3, &[(0, 1), (1, 1), (0, 2), (1, 2)]);
        assert!((jaccard(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&mask(2, 2, &[(0, 0)]), &mask(2, 2, &[(1, 1)])).unwrap(), 0.0);
        assert_eq!(jaccard(&mask(2, 2, &[]), &mask(2, 2, &[])).unwrap(), 1.0);
        assert!(jaccard(&mask(2, 2, &[]), &mask(2, 3, &[])).is_err());
    }

    #[test]
    fn burned_mask_matches_arrival() {
        let arr = ArrivalRaster { arrival: Raster::from_vec(1, 4, vec![0.0, 2.5, 5.0, f32::INFINITY]).unwrap() };
        let theta = default_threshold(22);
        for t in 0..8 {
            let m = burned_mask(&state_array::<f64>(&arr, t, 22), theta);
            for (i, a) in arr.arrival.data().iter().enumerate() {
                assert_eq!(m[[0, i]], f64::from(*a) <= t as f64);
            }
        }
        assert!(burned_mask(&Array2::<f64>::ones((2, 2)), 1.1).iter().all(|v| !v));
        assert!(burned_mask(&Array2::<f64>::zeros((2, 2)), theta).iter().all(|v| !v));
    }

    #[test]
    fn weighted_mean_examples() {
        let f = |j: f64, area: usize| FireEval { fire_seed: 0, jaccard: j, area, series: vec![j] };
        assert!((weighted_mean_jaccard(&[f(0.5, 100), f(0.0, 0)]).unwrap() - 0.5).abs() < 1e-15);
        assert!((weighted_mean_jaccard(&[f(0.2, 7), f(0.6, 7)]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(weighted_mean_jaccard(&[f(0.3, 0), f(0.5, 0)]).unwrap(), 0.4);
        assert_eq!(weighted_mean_jaccard(&[f(0.9, 12)]).unwrap(), 0.9);
        assert!(weighted_mean_jaccard(&[]).is_err());
    }

    #[test]
    fn diff_map_signs() {
        let inf = f32::INFINITY;
        let target = Raster::from_vec(1, 5, vec![0.0, 3.2, inf, 6.0, inf]).unwrap();
        let pred = Raster::from_vec(1, 5, vec![0.0, 4.0, 4.0, inf, inf]).unwrap();
        let d = arrival_diff_map(&pred, &target, 22).unwrap();
        assert_eq!(d.data(), &[0.0, 0.0, 19.0, -17.0, 0.0]);
        assert!(arrival_diff_map(&pred, &target, 22).unwrap().data().iter().all(|v| v.is_finite()));
        let same = arrival_diff_map(&target, &target, 22).unwrap();
        assert!(same.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn simulator_scores_one_against_itself() {
        let cfg = WorldgenConfig { side_px: (96, 120), ..Default::default() };
        let s = gen_scenario(4, &cfg).unwrap();
        let stats = TrainStats::from_training(&[&s], 4).unwrap();
        let fire = FireRecord { norm: normalize_units(&s, &stats, 4).unwrap(), arrival: simulate(&s, &RosParams::default(), 22).unwrap() };
        let oracle = SimulatorOracle { t_max: 22 };
        for (a, b) in [(0, 22), (5, 22), (7, 7)] {
            let r = evaluate_rollout::<f32, _>(&oracle, &fire, a, b, 22).unwrap();
            assert!(r.eval.series.iter().all(|j| *j == 1.0));
            assert_eq!(r.eval.series.len(), b - a + 1);
            assert!(r.diff.data().iter().all(|v| *v == 0.0));
        }
        let report = evaluate_fires::<f32, _>(&oracle, &[&fire, &fire], 0, 22, 22).unwrap();
        assert_eq!(report.mean_jaccard, 1.0);
        assert_eq!(report.weighted_jaccard, 1.0);
    }
}
