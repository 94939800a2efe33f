//! Parameter-free tensor operations and their adjoints.

use ndarray::{s, Array1, Array3, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let a = T::of(LEAKY_SLOPE);
    x.mapv(|v| if v > T::zero() { v } else { v * a })
}

pub fn leaky_relu_vec<T: Scalar>(x: &Array1<T>) -> Array1<T> {
    let a = T::of(LEAKY_SLOPE);
    x.mapv(|v| if v > T::zero() { v } else { v * a })
}

/// Gradient through a leaky ReLU, keyed on the activation output (same sign as input).
pub fn leaky_relu_backward<T: Scalar, D: ndarray::Dimension>(
    out: &ndarray::Array<T, D>,
    grad: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let a = T::of(LEAKY_SLOPE);
    let mut g = grad.clone();
    g.zip_mut_with(out, |gv, &o| {
        if o <= T::zero() {
            *gv *= a;
        }
    });
    g
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2<T: Scalar>(x: &Array3<T>) -> Result<Array3<T>> {
    let (c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("average pooling needs even extents, got {h}x{w}")));
    }
    let q = T::of(0.25);
    Ok(Array3::from_shape_fn((c, h / 2, w / 2), |(ci, r, col)| {
        (x[[ci, 2 * r, 2 * col]] + x[[ci, 2 * r, 2 * col + 1]] + x[[ci, 2 * r + 1, 2 * col]] + x[[ci, 2 * r + 1, 2 * col + 1]]) * q
    }))
}

pub fn avg_pool2_backward<T: Scalar>(grad: &Array3<T>) -> Array3<T> {
    let (c, h, w) = grad.dim();
    let q = T::of(0.25);
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, r, col)| grad[[ci, r / 2, col / 2]] * q)
}

/// Moves each `b`×`b` spatial block into channels: `(c, h, w) -> (c·b², h/b, w/b)`.
/// Output channel `ci·b² + dy·b + dx` holds offset `(dy, dx)` of input channel `ci`.
pub fn space_to_depth<T: Scalar>(x: &Array3<T>, b: usize) -> Result<Array3<T>> {
    let (c, h, w) = x.dim();
    if h % b != 0 || w % b != 0 {
        return Err(Error::shape(format!("space-to-depth block {b} does not divide {h}x{w}")));
    }
    Ok(Array3::from_shape_fn((c * b * b, h / b, w / b), |(oc, r, col)| {
        let ci = oc / (b * b);
        let dy = (oc / b) % b;
        let dx = oc % b;
        x[[ci, r * b + dy, col * b + dx]]
    }))
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(x: &Array3<T>, b: usize) -> Result<Array3<T>> {
    let (c, h, w) = x.dim();
    if c % (b * b) != 0 {
        return Err(Error::shape(format!("depth-to-space block {b} does not divide {c} channels")));
    }
    Ok(Array3::from_shape_fn((c / (b * b), h * b, w * b), |(oc, r, col)| {
        let ic = oc * b * b + (r % b) * b + col % b;
        x[[ic, r / b, col / b]]
    }))
}

/// Nearest-neighbour ×2 upsampling cropped to `(h, w)` (which must be ≤ twice the input).
pub fn upsample2<T: Scalar>(x: &Array3<T>, (h, w): (usize, usize)) -> Result<Array3<T>> {
    let (c, hi, wi) = x.dim();
    if h > 2 * hi || w > 2 * wi || h == 0 || w == 0 {
        return Err(Error::shape(format!("cannot upsample {hi}x{wi} to {h}x{w}")));
    }
    Ok(Array3::from_shape_fn((c, h, w), |(ci, r, col)| x[[ci, r / 2, col / 2]]))
}

pub fn upsample2_backward<T: Scalar>(grad: &Array3<T>, (hi, wi): (usize, usize)) -> Array3<T> {
    let (c, h, w) = grad.dim();
    let mut out = Array3::zeros((c, hi, wi));
    for ci in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[[ci, r / 2, col / 2]] += grad[[ci, r, col]];
            }
        }
    }
    out
}

pub fn concat<T: Scalar>(parts: &[&Array3<T>]) -> Result<Array3<T>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(format!("channel concat: {e}")))
}

/// Splits a channel-stacked gradient back into blocks of the given channel counts.
pub fn split_channels<T: Scalar>(x: &Array3<T>, counts: &[usize]) -> Vec<Array3<T>> {
    let mut start = 0;
    counts
        .iter()
        .map(|&n| {
            let part = x.slice(s![start..start + n, .., ..]).to_owned();
            start += n;
            part
        })
        .collect()
}

/// Repeats a vector as constant channels over an `h`×`w` extent.
pub fn broadcast<T: Scalar>(v: &Array1<T>, (h, w): (usize, usize)) -> Array3<T> {
    Array3::from_shape_fn((v.len(), h, w), |(c, _, _)| v[c])
}

pub fn broadcast_backward<T: Scalar>(grad: &Array3<T>) -> Array1<T> {
    grad.axis_iter(Axis(0)).map(|p| p.sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_to_depth_round_trips() {
        let x = Array3::from_shape_fn((2, 8, 12), |(c, r, w)| (c * 1000 + r * 20 + w) as f64);
        let z = space_to_depth(&x, 4).unwrap();
        assert_eq!(z.dim(), (32, 2, 3));
        assert_eq!(depth_to_space(&z, 4).unwrap(), x);
    }

    #[test]
    fn pooling_averages_blocks() {
        let x = Array3::from_shape_vec((1, 2, 4), vec![1.0, 2.0, 5.0, 5.0, 3.0, 4.0, 5.0, 5.0]).unwrap();
        let p = avg_pool2(&x).unwrap();
        assert_eq!(p.into_raw_vec_and_offset().0, vec![2.5, 5.0]);
        assert!(avg_pool2(&Array3::<f64>::zeros((1, 3, 4))).is_err());
    }

    #[test]
    fn upsample_adjoint() {
        let x = Array3::from_shape_fn((1, 3, 2), |(_, r, c)| (r * 2 + c) as f64 + 1.0);
        let up = upsample2(&x, (5, 4)).unwrap();
        let g = Array3::from_shape_fn((1, 5, 4), |(_, r, c)| (r as f64) - 0.5 * c as f64);
        let lhs: f64 = up.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let gb = upsample2_backward(&g, (3, 2));
        let rhs: f64 = gb.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
