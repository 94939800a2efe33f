//! Band-limited value noise: random lattice values, smoothstep-interpolated,
//! summed over octaves.

use rand::Rng;

use crate::raster::Raster;
use crate::rng::child_rng;

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// One octave with lattice spacing `wavelength` pixels, values in `[-1, 1]`.
fn octave(seed: u64, index: u64, (h, w): (usize, usize), wavelength: f64) -> Raster<f64> {
    let mut rng = child_rng(seed, "noise-octave", index);
    let gh = (h as f64 / wavelength).ceil() as usize + 2;
    let gw = (w as f64 / wavelength).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // random sub-lattice offset decorrelates octaves
    let (oy, ox) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    Raster::from_fn(h, w, |r, c| {
        let fy = r as f64 / wavelength + oy;
        let fx = c as f64 / wavelength + ox;
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
        let at = |y: usize, x: usize| lattice[y * gw + x];
        let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
        let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Fractal sum of `octaves` octaves starting at `base_wavelength` pixels,
/// halving the wavelength and scaling amplitude by `persistence` each octave.
/// Normalized by the total amplitude so values stay in `[-1, 1]`.
pub fn fractal(seed: u64, shape: (usize, usize), base_wavelength: f64, octaves: u32, persistence: f64) -> Raster<f64> {
    let (h, w) = shape;
    let mut acc = vec![0.0; h * w];
    let mut amp = 1.0;
    let mut total = 0.0;
    let mut wavelength = base_wavelength;
    for k in 0..octaves {
        let o = octave(seed, u64::from(k), shape, wavelength.max(1.0));
        for (a, v) in acc.iter_mut().zip(o.data()) {
            *a += amp * v;
        }
        total += amp;
        amp *= persistence;
        wavelength /= 2.0;
    }
    if total > 0.0 {
        acc.iter_mut().for_each(|a| *a /= total);
    }
    Raster::from_vec(h, w, acc).expect("noise shape")
}
