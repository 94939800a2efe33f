//! Dense row-major 2-D rasters, the on-disk raster format, and the dihedral
//! symmetries of the square used for augmentation and equivariance tests.
//!
//! Coordinates: `x` grows with the column index (east), `y` grows against the
//! row index (north). Vector-valued rasters (wind, terrain gradient) follow
//! the same convention.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "raster {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.width + c] = v;
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.width + c
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Raster<U> {
        Raster { height: self.height, width: self.width, data: self.data.iter().copied().map(f).collect() }
    }

    pub fn zip_map<U: Copy, V: Copy>(&self, other: &Raster<U>, mut f: impl FnMut(T, U) -> V) -> Result<Raster<V>> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Raster { height: self.height, width: self.width, data })
    }

    pub fn check_same_shape<U>(&self, other: &Raster<U>) -> Result<()> {
        if self.shape() != (other.height, other.width) {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                (other.height, other.width)
            )));
        }
        Ok(())
    }

    /// Copies the `h`×`w` window whose top-left corner is `(r0, c0)`.
    pub fn window(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Self> {
        if r0 + h > self.height || c0 + w > self.width {
            return Err(Error::shape(format!(
                "window {h}x{w} at ({r0},{c0}) exceeds raster {:?}",
                self.shape()
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            let start = r * self.width + c0;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(Self { height: h, width: w, data })
    }

    /// Quarter turn counter-clockwise as displayed (north up).
    pub fn rot90(&self) -> Self {
        let (h, w) = self.shape();
        // output (W, H): out[r'][c'] = in[c'][w - 1 - r']
        Self::from_fn(w, h, |r, c| self.get(c, w - 1 - r))
    }

    pub fn transpose(&self) -> Self {
        let (h, w) = self.shape();
        Self::from_fn(w, h, |r, c| self.get(c, r))
    }

    pub fn apply(&self, t: Dihedral) -> Self {
        let mut out = if t.transposed() { self.transpose() } else { self.clone() };
        for _ in 0..t.quarter_turns() {
            out = out.rot90();
        }
        out
    }
}

/// One of the eight symmetries of the square: an optional transpose followed
/// by `k` counter-clockwise quarter turns. Id `k + 4 * transposed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);
    pub const ROT90: Dihedral = Dihedral(1);

    pub fn new(id: u8) -> Result<Self> {
        if id < 8 {
            Ok(Dihedral(id))
        } else {
            Err(Error::config(format!("dihedral transform id {id} not in 0..8")))
        }
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn quarter_turns(self) -> u8 {
        self.0 % 4
    }

    pub fn transposed(self) -> bool {
        self.0 >= 4
    }

    /// Transforms an `(x, y)` vector consistently with [`Raster::apply`].
    pub fn apply_vector<T: Copy + std::ops::Neg<Output = T>>(self, v: (T, T)) -> (T, T) {
        // transpose swaps rows/cols: (x, y) -> (-y, -x) with y pointing north
        let (mut x, mut y) = if self.transposed() { (-v.1, -v.0) } else { v };
        for _ in 0..self.quarter_turns() {
            let nx = -y;
            y = x;
            x = nx;
        }
        (x, y)
    }

    /// Maps a pixel coordinate in a raster of shape `(h, w)` to its location after the transform.
    pub fn apply_pixel(self, (r, c): (usize, usize), (h, w): (usize, usize)) -> (usize, usize) {
        let (mut r, mut c, mut h, mut w) = if self.transposed() { (c, r, w, h) } else { (r, c, h, w) };
        for _ in 0..self.quarter_turns() {
            let nr = w - 1 - c;
            c = r;
            r = nr;
            std::mem::swap(&mut h, &mut w);
        }
        (r, c)
    }
}

/// [`Raster::apply`] for a 2-D array view.
pub fn dihedral_array2<T: Clone>(a: ndarray::ArrayView2<T>, t: Dihedral) -> ndarray::Array2<T> {
    let mut v = if t.transposed() { a.reversed_axes() } else { a };
    for _ in 0..t.quarter_turns() {
        v = v.slice_move(ndarray::s![.., ..;-1]).reversed_axes();
    }
    v.as_standard_layout().into_owned()
}

/// Applies [`dihedral_array2`] to every channel of a `(c, h, w)` array.
pub fn dihedral_array3<T: Clone>(a: ndarray::ArrayView3<T>, t: Dihedral) -> ndarray::Array3<T> {
    let mut v = if t.transposed() { a.permuted_axes([0, 2, 1]) } else { a };
    for _ in 0..t.quarter_turns() {
        v = v.slice_move(ndarray::s![.., .., ..;-1]).permuted_axes([0, 2, 1]);
    }
    v.as_standard_layout().into_owned()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct RasterHeader {
    shape: [usize; 2],
    dtype: String,
    order: String,
    units: String,
}

fn sidecar_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.json")), dir.join(format!("{name}.bin")))
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.bin` (little-endian f32, row-major).
pub fn write_raster(dir: &Path, name: &str, raster: &Raster<f32>, units: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (json_path, bin_path) = sidecar_paths(dir, name);
    let header = RasterHeader {
        shape: [raster.height(), raster.width()],
        dtype: "f32le".into(),
        order: "row-major".into(),
        units: units.into(),
    };
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(raster.len() * 4);
    for v in raster.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

/// Reads a raster written by [`write_raster`], returning the data and its units string.
pub fn read_raster(dir: &Path, name: &str) -> Result<(Raster<f32>, String)> {
    let (json_path, bin_path) = sidecar_paths(dir, name);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: RasterHeader = serde_json::from_str(&text)?;
    if header.dtype != "f32le" || header.order != "row-major" {
        return Err(Error::Format {
            path: json_path,
            msg: format!("unsupported dtype/order {}/{}", header.dtype, header.order),
        });
    }
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let [h, w] = header.shape;
    if bytes.len() != h * w * 4 {
        return Err(Error::Format {
            path: bin_path,
            msg: format!("expected {} bytes, found {}", h * w * 4, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((Raster::from_vec(h, w, data)?, header.units))
}
