//! PNG rendering: emulator (red) and simulator (blue) perimeters with the
//! ignition point (green) over land classes, plus a diverging arrival-difference map.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;

use super::{burned_mask, default_threshold, state_array, RolloutResult};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::worldgen::LandClass;

const RED: Rgb<u8> = Rgb([220, 30, 30]);
const BLUE: Rgb<u8> = Rgb([30, 60, 220]);
const GREEN: Rgb<u8> = Rgb([0, 200, 0]);

fn land_colour(c: LandClass) -> Rgb<u8> {
    match c {
        LandClass::Grass => Rgb([236, 230, 180]),
        LandClass::Shrub => Rgb([150, 180, 120]),
        LandClass::WaterUnburnable => Rgb([170, 200, 230]),
        LandClass::Other => Rgb([200, 200, 200]),
    }
}

/// Up to four evenly spaced intervals ending at `t_end`; just `t_start` for an empty range.
pub fn panel_intervals(t_start: usize, t_end: usize) -> Vec<usize> {
    let n = t_end.saturating_sub(t_start);
    if n == 0 {
        return vec![t_start];
    }
    let mut out: Vec<usize> = (1..=4).map(|k| t_start + (n * k).div_ceil(4)).collect();
    out.dedup();
    out
}

fn outline(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        mask[[r, c]]
            && (r == 0 || c == 0 || r + 1 == h || c + 1 == w || !mask[[r - 1, c]] || !mask[[r + 1, c]] || !mask[[r, c - 1]] || !mask[[r, c + 1]])
    })
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes `<stem>_t<NN>.png` contour panels and `<stem>_diff.png`; returns the paths.
pub fn render_plots<T: Scalar>(dir: &Path, stem: &str, result: &RolloutResult<T>, t_start: usize, t_max: usize) -> Result<Vec<PathBuf>> {
    let t_end = t_start + result.states.len().saturating_sub(1);
    let fire = &result.fire;
    let (h, w) = fire.norm.shape();
    let theta = default_threshold(t_max);
    let mut paths = Vec::new();
    for t in panel_intervals(t_start, t_end) {
        let pred = outline(&burned_mask(&result.states[t - t_start], theta));
        let sim = outline(&burned_mask(&state_array::<T>(&fire.arrival, t, t_max), theta));
        let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| land_colour(fire.norm.classes.get(y as usize, x as usize)));
        for ((r, c), &on) in sim.indexed_iter() {
            if on {
                img.put_pixel(c as u32, r as u32, BLUE);
            }
        }
        for ((r, c), &on) in pred.indexed_iter() {
            if on {
                img.put_pixel(c as u32, r as u32, RED);
            }
        }
        let (ir, ic) = fire.norm.ignition;
        for r in ir.saturating_sub(2)..(ir + 3).min(h) {
            for c in ic.saturating_sub(2)..(ic + 3).min(w) {
                img.put_pixel(c as u32, r as u32, GREEN);
            }
        }
        let path = dir.join(format!("{stem}_t{t:02}.png"));
        save(&img, &path)?;
        paths.push(path);
    }
    let scale = result.diff.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1.0);
    let diff = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = result.diff.get(y as usize, x as usize) / scale;
        let fade = |a: f32| (255.0 * (1.0 - a.abs())).round() as u8;
        if v > 0.0 {
            Rgb([255, fade(v), fade(v)])
        } else {
            Rgb([fade(v), fade(v), 255])
        }
    });
    let path = dir.join(format!("{stem}_diff.png"));
    save(&diff, &path)?;
    paths.push(path);
    Ok(paths)
}
