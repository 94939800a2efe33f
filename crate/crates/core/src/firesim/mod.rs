//! Reference fire simulator: label-setting shortest arrival time on the
//! 8-neighbour grid, driven by the rate-of-spread surrogate in [`ros`].

pub mod ros;

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::path::Path;

pub use ros::{ros, BaseRos, RosParams};

use crate::error::{Error, Result};
use crate::raster::{read_raster, write_raster, Raster};
use crate::scalar::Scalar;
use crate::worldgen::Scenario;

/// Weather slices per interval used when freezing weather along the front.
pub const DEFAULT_SLICES_PER_INTERVAL: usize = 4;

/// On-disk stand-in for "never burned".
pub const UNBURNED_SENTINEL: f32 = 1e9;

/// Per-pixel arrival time in interval units; `+inf` where the fire never arrives.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalRaster {
    pub arrival: Raster<f32>,
}

impl ArrivalRaster {
    pub fn shape(&self) -> (usize, usize) {
        self.arrival.shape()
    }

    pub fn burned_count_at(&self, t: f64) -> usize {
        self.arrival.data().iter().filter(|&&a| f64::from(a) <= t).count()
    }

    /// Latest finite arrival (0 for an ignition-only raster).
    pub fn last_arrival(&self) -> f64 {
        self.arrival.data().iter().filter(|a| a.is_finite()).fold(0.0, |m, &a| m.max(f64::from(a)))
    }

    pub fn window(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self { arrival: self.arrival.window(r0, c0, h, w)? })
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        let encoded = self.arrival.map(|a| if a.is_finite() { a } else { UNBURNED_SENTINEL });
        write_raster(dir, name, &encoded, "intervals")
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let (r, _) = read_raster(dir, name)?;
        Ok(Self { arrival: r.map(|a| if a >= UNBURNED_SENTINEL { f32::INFINITY } else { a }) })
    }
}

#[derive(Debug, Clone, Copy)]
struct Front {
    t: f64,
    r: u32,
    c: u32,
}

impl PartialEq for Front {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Front {}

impl PartialOrd for Front {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Front {
    /// `(arrival, row, col)` lexicographic.
    fn cmp(&self, other: &Self) -> Ordering {
        self.t.total_cmp(&other.t).then(self.r.cmp(&other.r)).then(self.c.cmp(&other.c))
    }
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

pub fn simulate(scenario: &Scenario, params: &RosParams, n_intervals: usize) -> Result<ArrivalRaster> {
    simulate_sliced(scenario, params, n_intervals, DEFAULT_SLICES_PER_INTERVAL)
}

/// Arrival times up to `n_intervals`, with weather interpolated to
/// `slices` sub-steps and frozen at each source pixel's arrival slice.
pub fn simulate_sliced(scenario: &Scenario, params: &RosParams, n_intervals: usize, slices: usize) -> Result<ArrivalRaster> {
    params.validate()?;
    let (h, w) = scenario.shape();
    let (ir, ic) = scenario.ignition;
    if ir >= h || ic >= w {
        return Err(Error::Domain(format!("ignition {:?} outside {h}x{w} map", scenario.ignition)));
    }
    let classes = &scenario.landclass.classes;
    if !classes.get(ir, ic).burnable() {
        return Err(Error::Domain(format!("ignition {:?} is not burnable", scenario.ignition)));
    }
    let sliced = if scenario.weather.len() >= 2 {
        scenario.weather.interpolate(slices)?
    } else {
        scenario.weather.polls.clone()
    };
    if sliced.is_empty() {
        return Err(Error::Domain("scenario has no weather".into()));
    }
    let env: Vec<f64> = sliced.iter().map(|s| params.env_factor(s, &scenario.forcing)).collect();
    let interval_s = scenario.interval_minutes * 60.0;
    let horizon = n_intervals as f64;

    let mut arrival = vec![f64::INFINITY; h * w];
    let mut settled = vec![false; h * w];
    let mut heap = BinaryHeap::new();
    arrival[ir * w + ic] = 0.0;
    heap.push(Reverse(Front { t: 0.0, r: ir as u32, c: ic as u32 }));

    while let Some(Reverse(Front { t, r, c })) = heap.pop() {
        if t > horizon {
            break;
        }
        let (r, c) = (r as usize, c as usize);
        let idx = r * w + c;
        if settled[idx] || t > arrival[idx] {
            continue;
        }
        settled[idx] = true;
        let slice = ((t * slices as f64).floor() as usize).min(sliced.len() - 1);
        let weather = &sliced[slice];
        let wind = (weather.wind_x_mps, weather.wind_y_mps);
        for (dr, dc) in NEIGHBOURS {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            let nidx = nr * w + nc;
            if settled[nidx] {
                continue;
            }
            let base = params.base(classes.get(nr, nc));
            if base == 0.0 {
                continue;
            }
            let len = if dr != 0 && dc != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
            // unit vector with y pointing north (against the row index)
            let dir = (dc as f64 / len, -(dr as f64) / len);
            let grad = (f64::from(scenario.grad_x.get(nr, nc)), f64::from(scenario.grad_y.get(nr, nc)));
            let speed = base * params.directional(wind, grad, dir) * env[slice];
            let dt = len * scenario.resolution_m / speed / interval_s;
            let nt = t + dt;
            if nt < arrival[nidx] {
                arrival[nidx] = nt;
                heap.push(Reverse(Front { t: nt, r: nr as u32, c: nc as u32 }));
            }
        }
    }
    let data = arrival
        .iter()
        .zip(&settled)
        .map(|(&a, &s)| if s && a <= horizon { a as f32 } else { f32::INFINITY })
        .collect();
    Ok(ArrivalRaster { arrival: Raster::from_vec(h, w, data)? })
}

/// Linear time-since-arrival ramp at interval `t`: `(t - a + 1) / (t_max + 1)`
/// where the pixel has burned (`a <= t`), zero elsewhere.
pub fn arrival_to_state<T: Scalar>(arrival: &ArrivalRaster, t: usize, t_max: usize) -> Raster<T> {
    let (tf, denom) = (t as f64, (t_max + 1) as f64);
    arrival.arrival.map(|a| {
        let a = f64::from(a);
        if a <= tf {
            T::of((tf - a + 1.0) / denom)
        } else {
            T::zero()
        }
    })
}
