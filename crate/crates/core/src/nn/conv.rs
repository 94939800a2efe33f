//! 2-D convolution and transposed convolution via im2col + GEMM, with a
//! direct kernel for small stride-1 layers.
//!
//! Tensors are `(channels, height, width)`; weights follow the
//! `(out, in, k, k)` layout for [`Conv2d`] and `(in, out, k, k)` for
//! [`ConvTranspose2d`].

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(k: usize, stride: usize, pad: usize) -> Self {
        Self { k, stride, pad }
    }

    pub fn out_len(&self, n: usize) -> Result<usize> {
        if n + 2 * self.pad < self.k {
            return Err(Error::shape(format!("input extent {n} smaller than kernel {}", self.k)));
        }
        Ok((n + 2 * self.pad - self.k) / self.stride + 1)
    }

    /// Output extent of the transposed convolution with this geometry.
    pub fn transposed_out_len(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.k - 2 * self.pad
    }
}

const DIRECT_MAX_CHANNEL_PRODUCT: usize = 64;

fn im2col<T: Scalar>(x: &[T], (c, h, w): (usize, usize, usize), g: ConvGeom, (ho, wo): (usize, usize)) -> Vec<T> {
    let k = g.k;
    let n = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * n;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if g.stride == 1 {
                        // contiguous run of valid columns
                        let lo = g.pad.saturating_sub(kj);
                        let hi = (w + g.pad).saturating_sub(kj).min(wo);
                        if lo < hi {
                            let s0 = lo + kj - g.pad;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], (c, h, w): (usize, usize, usize), g: ConvGeom, (ho, wo): (usize, usize)) -> Array3<T> {
    let k = g.k;
    let n = ho * wo;
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * n;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("col2im shape")
}

/// Valid output-column range `[lo, hi)` for kernel column `kj` (stride 1).
#[inline]
fn valid_cols(kj: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj);
    let hi = (w + pad).saturating_sub(kj).min(wo);
    (lo, hi.max(lo))
}

/// Rows per cache block in the direct kernels.
const ROW_BLOCK: usize = 8;

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut total = ra.iter().zip(rb).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for v in acc {
        total += v;
    }
    total
}

/// Stride-1 convolution as shifted row axpys over row blocks; beats im2col
/// when channel counts are small.
fn direct_forward<T: Scalar>(x: &[T], (c, h, w): (usize, usize, usize), weight: &Array4<T>, bias: &Array1<T>, pad: usize, (ho, wo): (usize, usize)) -> Vec<T> {
    let (o, _, k, _) = weight.dim();
    let ws = weight.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); o * ho * wo];
    for oc in 0..o {
        let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bias[oc]);
        for oy0 in (0..ho).step_by(ROW_BLOCK) {
            let oy1 = (oy0 + ROW_BLOCK).min(ho);
            for ci in 0..c {
                let src = &x[ci * h * w..(ci + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = ws[((oc * c + ci) * k + ki) * k + kj];
                        let (lo, hi) = valid_cols(kj, pad, w, wo);
                        for oy in oy0..oy1 {
                            let iy = (oy + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let s0 = iy as usize * w + lo + kj - pad;
                            axpy(&mut plane[oy * wo + lo..oy * wo + hi], wv, &src[s0..s0 + (hi - lo)]);
                        }
                    }
                }
            }
        }
    }
    out
}

fn direct_input_grad<T: Scalar>(gy: &[T], (c, h, w): (usize, usize, usize), weight: &Array4<T>, pad: usize, (ho, wo): (usize, usize)) -> Array3<T> {
    let (o, _, k, _) = weight.dim();
    let ws = weight.as_slice().expect("standard layout");
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for iy0 in (0..h).step_by(ROW_BLOCK) {
            let iy1 = (iy0 + ROW_BLOCK).min(h);
            for oc in 0..o {
                let g = &gy[oc * ho * wo..(oc + 1) * ho * wo];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = ws[((oc * c + ci) * k + ki) * k + kj];
                        let (lo, hi) = valid_cols(kj, pad, w, wo);
                        for iy in iy0..iy1 {
                            let oy = (iy + pad) as isize - ki as isize;
                            if oy < 0 || oy >= ho as isize {
                                continue;
                            }
                            let s0 = iy * w + lo + kj - pad;
                            let oy = oy as usize;
                            axpy(&mut dplane[s0..s0 + (hi - lo)], wv, &g[oy * wo + lo..oy * wo + hi]);
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), dx).expect("dx shape")
}

fn direct_weight_grad<T: Scalar>(x: &[T], gy: &[T], (c, h, w): (usize, usize, usize), grad: &mut Array4<T>, pad: usize, (ho, wo): (usize, usize)) {
    let (o, _, k, _) = grad.dim();
    let gs = grad.as_slice_mut().expect("standard layout");
    for oy0 in (0..ho).step_by(ROW_BLOCK) {
        let oy1 = (oy0 + ROW_BLOCK).min(ho);
        for oc in 0..o {
            let g = &gy[oc * ho * wo..(oc + 1) * ho * wo];
            for ci in 0..c {
                let src = &x[ci * h * w..(ci + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let (lo, hi) = valid_cols(kj, pad, w, wo);
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = (oy + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let s0 = iy as usize * w + lo + kj - pad;
                            acc += dot(&g[oy * wo + lo..oy * wo + hi], &src[s0..s0 + (hi - lo)]);
                        }
                        gs[((oc * c + ci) * k + ki) * k + kj] += acc;
                    }
                }
            }
        }
    }
}

fn contiguous<T: Scalar>(x: &Array3<T>) -> std::borrow::Cow<'_, [T]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// `out (o, n) = w (o, ckk) · cols (ckk, n)`
fn matmul<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(T::one(), &a, &b, T::zero(), &mut out);
    out
}

fn kaiming<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub geom: ConvGeom,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        let fan_in = cin * geom.k * geom.k;
        let w = kaiming(rng, fan_in, cout * fan_in);
        Self {
            weight: Array4::from_shape_vec((cout, cin, geom.k, geom.k), w).expect("weight shape"),
            bias: Array1::zeros(cout),
            geom,
        }
    }

    pub fn zeros(cin: usize, cout: usize, geom: ConvGeom) -> Self {
        Self { weight: Array4::zeros((cout, cin, geom.k, geom.k)), bias: Array1::zeros(cout), geom }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let (o, c, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, c * k * k)).expect("contiguous weight")
    }

    fn check_input(&self, x: &Array3<T>) -> Result<(usize, usize)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels() {
            return Err(Error::shape(format!("conv expects {} channels, got {c}", self.in_channels())));
        }
        Ok((self.geom.out_len(h)?, self.geom.out_len(w)?))
    }

    /// Small stride-1 convolutions skip im2col.
    fn use_direct(&self) -> bool {
        self.geom.stride == 1 && self.in_channels() * self.out_channels() <= DIRECT_MAX_CHANNEL_PRODUCT
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<Array3<T>> {
        let (ho, wo) = self.check_input(x)?;
        let xs = contiguous(x);
        if self.use_direct() {
            let out = direct_forward(&xs, x.dim(), &self.weight, &self.bias, self.geom.pad, (ho, wo));
            return Ok(Array3::from_shape_vec((self.out_channels(), ho, wo), out).expect("out shape"));
        }
        let cols = im2col(&xs, x.dim(), self.geom, (ho, wo));
        let cols = ArrayView2::from_shape((cols.len() / (ho * wo), ho * wo), &cols).expect("cols");
        let mut out = matmul(self.weight_matrix(), cols);
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        Ok(out.into_shape_with_order((self.out_channels(), ho, wo)).expect("out shape"))
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input_grad` is set.
    pub fn backward(
        &self,
        x: &Array3<T>,
        grad_out: &Array3<T>,
        grad: Option<&mut Conv2d<T>>,
        want_input_grad: bool,
    ) -> Result<Option<Array3<T>>> {
        let (ho, wo) = self.check_input(x)?;
        if grad_out.dim() != (self.out_channels(), ho, wo) {
            return Err(Error::shape(format!("conv grad {:?} vs output {:?}", grad_out.dim(), (self.out_channels(), ho, wo))));
        }
        let gy = contiguous(grad_out);
        if self.use_direct() {
            if let Some(g) = grad {
                let xs = contiguous(x);
                direct_weight_grad(&xs, &gy, x.dim(), &mut g.weight, self.geom.pad, (ho, wo));
                for (gb, plane) in g.bias.iter_mut().zip(grad_out.axis_iter(Axis(0))) {
                    *gb += plane.sum();
                }
            }
            return Ok(want_input_grad.then(|| direct_input_grad(&gy, x.dim(), &self.weight, self.geom.pad, (ho, wo))));
        }
        let gy = ArrayView2::from_shape((self.out_channels(), ho * wo), &gy).expect("grad view");
        if let Some(g) = grad {
            let xs = contiguous(x);
            let cols = im2col(&xs, x.dim(), self.geom, (ho, wo));
            let cols = ArrayView2::from_shape((cols.len() / (ho * wo), ho * wo), &cols).expect("cols");
            let (o, c, k, _) = g.weight.dim();
            let mut gw = g.weight.view_mut().into_shape_with_order((o, c * k * k)).expect("grad weight");
            general_mat_mul(T::one(), &gy, &cols.t(), T::one(), &mut gw);
            for (gb, row) in g.bias.iter_mut().zip(gy.axis_iter(Axis(0))) {
                *gb += row.sum();
            }
        }
        if !want_input_grad {
            return Ok(None);
        }
        let dcols = matmul(self.weight_matrix().t(), gy);
        let dcols = dcols.as_slice().expect("standard layout");
        Ok(Some(col2im(dcols, x.dim(), self.geom, (ho, wo))))
    }
}

/// Phase decomposition of a transposed convolution. Output pixel `o` has
/// phase `r = (o + pad) % s` and plane index `q = (o + pad) / s`, and
/// receives `w[r + m s] · x[q − m]`, so each phase is a stride-1
/// correlation that runs over contiguous rows.
struct Phases {
    s: usize,
    pad: usize,
    /// Taps per phase, `ceil(k / s)`.
    m: usize,
    /// Plane extent `(h + m − 1, w + m − 1)`.
    q: (usize, usize),
}

impl Phases {
    fn new(g: ConvGeom, (h, w): (usize, usize)) -> Self {
        let m = g.k.div_ceil(g.stride);
        Self { s: g.stride, pad: g.pad, m, q: (h + m - 1, w + m - 1) }
    }

    /// `(plane index, output index)` pairs of phase `r` along one axis.
    fn pairs(&self, r: usize, q: usize, out: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..q).filter_map(move |qi| {
            let o = (qi * self.s + r) as isize - self.pad as isize;
            (o >= 0 && (o as usize) < out).then_some((qi, o as usize))
        })
    }

    /// Kernel taps `(m, k index)` belonging to phase `r`.
    fn taps(&self, r: usize, k: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.m).map(move |m| (m, r + m * self.s)).filter(move |&(_, kk)| kk < k)
    }
}

fn direct_transposed_forward<T: Scalar>(x: &[T], (c, h, w): (usize, usize, usize), weight: &Array4<T>, g: ConvGeom, (o, ho, wo): (usize, usize, usize)) -> Vec<T> {
    let k = g.k;
    let ws = weight.as_slice().expect("standard layout");
    let ph = Phases::new(g, (h, w));
    let (qh, qw) = ph.q;
    let mut out = vec![T::zero(); o * ho * wo];
    let mut plane = vec![T::zero(); qh * qw];
    for oc in 0..o {
        let dst = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
        for ry in 0..g.stride {
            for rx in 0..g.stride {
                plane.iter_mut().for_each(|v| *v = T::zero());
                for ci in 0..c {
                    let src = &x[ci * h * w..(ci + 1) * h * w];
                    for (my, ky) in ph.taps(ry, k) {
                        for (mx, kx) in ph.taps(rx, k) {
                            let wv = ws[((ci * o + oc) * k + ky) * k + kx];
                            for iy in 0..h {
                                let row = (iy + my) * qw + mx;
                                axpy(&mut plane[row..row + w], wv, &src[iy * w..(iy + 1) * w]);
                            }
                        }
                    }
                }
                for (qy, oy) in ph.pairs(ry, qh, ho) {
                    for (qx, ox) in ph.pairs(rx, qw, wo) {
                        dst[oy * wo + ox] = plane[qy * qw + qx];
                    }
                }
            }
        }
    }
    out
}

/// Gathers phase `(ry, rx)` of one output-gradient plane; zero where no output pixel maps.
fn gather_phase<T: Scalar>(ph: &Phases, gp: &[T], (ry, rx): (usize, usize), (ho, wo): (usize, usize), plane: &mut [T]) {
    let (qh, qw) = ph.q;
    plane.iter_mut().for_each(|v| *v = T::zero());
    for (qy, oy) in ph.pairs(ry, qh, ho) {
        for (qx, ox) in ph.pairs(rx, qw, wo) {
            plane[qy * qw + qx] = gp[oy * wo + ox];
        }
    }
}

fn direct_transposed_input_grad<T: Scalar>(gy: &[T], (c, h, w): (usize, usize, usize), weight: &Array4<T>, g: ConvGeom, (o, ho, wo): (usize, usize, usize)) -> Array3<T> {
    let k = g.k;
    let ws = weight.as_slice().expect("standard layout");
    let ph = Phases::new(g, (h, w));
    let (qh, qw) = ph.q;
    let mut dx = vec![T::zero(); c * h * w];
    let mut plane = vec![T::zero(); qh * qw];
    for oc in 0..o {
        for ry in 0..g.stride {
            for rx in 0..g.stride {
                gather_phase(&ph, &gy[oc * ho * wo..(oc + 1) * ho * wo], (ry, rx), (ho, wo), &mut plane);
                for ci in 0..c {
                    let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
                    for (my, ky) in ph.taps(ry, k) {
                        for (mx, kx) in ph.taps(rx, k) {
                            let wv = ws[((ci * o + oc) * k + ky) * k + kx];
                            for iy in 0..h {
                                let row = (iy + my) * qw + mx;
                                axpy(&mut dplane[iy * w..(iy + 1) * w], wv, &plane[row..row + w]);
                            }
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), dx).expect("dx shape")
}

fn direct_transposed_weight_grad<T: Scalar>(x: &[T], gy: &[T], (c, h, w): (usize, usize, usize), grad: &mut Array4<T>, g: ConvGeom, (o, ho, wo): (usize, usize, usize)) {
    let k = g.k;
    let gs = grad.as_slice_mut().expect("standard layout");
    let ph = Phases::new(g, (h, w));
    let (qh, qw) = ph.q;
    let mut plane = vec![T::zero(); qh * qw];
    for oc in 0..o {
        for ry in 0..g.stride {
            for rx in 0..g.stride {
                gather_phase(&ph, &gy[oc * ho * wo..(oc + 1) * ho * wo], (ry, rx), (ho, wo), &mut plane);
                for ci in 0..c {
                    let src = &x[ci * h * w..(ci + 1) * h * w];
                    for (my, ky) in ph.taps(ry, k) {
                        for (mx, kx) in ph.taps(rx, k) {
                            let mut acc = T::zero();
                            for iy in 0..h {
                                let row = (iy + my) * qw + mx;
                                acc += dot(&src[iy * w..(iy + 1) * w], &plane[row..row + w]);
                            }
                            gs[((ci * o + oc) * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`Conv2d`]: scatters each input pixel through the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub geom: ConvGeom,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        // each output pixel sees about cin * (k / stride)^2 inputs
        let fan_in = (cin * geom.k * geom.k / (geom.stride * geom.stride)).max(1);
        let w = kaiming(rng, fan_in, cin * cout * geom.k * geom.k);
        Self {
            weight: Array4::from_shape_vec((cin, cout, geom.k, geom.k), w).expect("weight shape"),
            bias: Array1::zeros(cout),
            geom,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().1
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let (i, o, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((i, o * k * k)).expect("contiguous weight")
    }

    fn out_dims(&self, x: &Array3<T>) -> Result<(usize, usize, usize)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels() {
            return Err(Error::shape(format!("transposed conv expects {} channels, got {c}", self.in_channels())));
        }
        Ok((self.out_channels(), self.geom.transposed_out_len(h), self.geom.transposed_out_len(w)))
    }

    fn use_direct(&self) -> bool {
        self.in_channels() * self.out_channels() <= DIRECT_MAX_CHANNEL_PRODUCT
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<Array3<T>> {
        let out_dims = self.out_dims(x)?;
        let (c, h, w) = x.dim();
        let xs = contiguous(x);
        if self.use_direct() {
            let mut out = Array3::from_shape_vec(out_dims, direct_transposed_forward(&xs, x.dim(), &self.weight, self.geom, out_dims)).expect("out shape");
            for (mut plane, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
                plane.mapv_inplace(|v| v + b);
            }
            return Ok(out);
        }
        let xv = ArrayView2::from_shape((c, h * w), &xs).expect("input view");
        let cols = matmul(self.weight_matrix().t(), xv);
        let mut out = col2im(cols.as_slice().expect("layout"), out_dims, self.geom, (h, w));
        for (mut plane, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            plane.mapv_inplace(|v| v + b);
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        x: &Array3<T>,
        grad_out: &Array3<T>,
        grad: Option<&mut ConvTranspose2d<T>>,
        want_input_grad: bool,
    ) -> Result<Option<Array3<T>>> {
        let out_dims = self.out_dims(x)?;
        if grad_out.dim() != out_dims {
            return Err(Error::shape(format!("transposed conv grad {:?} vs {:?}", grad_out.dim(), out_dims)));
        }
        let (c, h, w) = x.dim();
        let gs = contiguous(grad_out);
        if self.use_direct() {
            if let Some(g) = grad {
                direct_transposed_weight_grad(&contiguous(x), &gs, x.dim(), &mut g.weight, self.geom, out_dims);
                for (gb, plane) in g.bias.iter_mut().zip(grad_out.axis_iter(Axis(0))) {
                    *gb += plane.sum();
                }
            }
            return Ok(want_input_grad.then(|| direct_transposed_input_grad(&gs, x.dim(), &self.weight, self.geom, out_dims)));
        }
        let gcols = im2col(&gs, out_dims, self.geom, (h, w));
        let gcols = ArrayView2::from_shape((gcols.len() / (h * w), h * w), &gcols).expect("cols");
        if let Some(g) = grad {
            let xs = contiguous(x);
            let xv = ArrayView2::from_shape((c, h * w), &xs).expect("input view");
            let (i, o, k, _) = g.weight.dim();
            let mut gw = g.weight.view_mut().into_shape_with_order((i, o * k * k)).expect("grad weight");
            general_mat_mul(T::one(), &xv, &gcols.t(), T::one(), &mut gw);
            for (gb, plane) in g.bias.iter_mut().zip(grad_out.axis_iter(Axis(0))) {
                *gb += plane.sum();
            }
        }
        if !want_input_grad {
            return Ok(None);
        }
        let dx = matmul(self.weight_matrix(), gcols);
        Ok(Some(dx.into_shape_with_order((c, h, w)).expect("dx shape")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution.
    fn naive_conv(x: &Array3<f64>, conv: &Conv2d<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let g = conv.geom;
        let ho = g.out_len(h).unwrap();
        let wo = g.out_len(w).unwrap();
        let o = conv.out_channels();
        Array3::from_shape_fn((o, ho, wo), |(oc, oy, ox)| {
            let mut acc = conv.bias[oc];
            for ci in 0..c {
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight[[oc, ci, ki, kj]] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn random(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for geom in [ConvGeom::new(3, 1, 1), ConvGeom::new(3, 2, 1), ConvGeom::new(1, 1, 0), ConvGeom::new(4, 2, 1)] {
            let mut conv = Conv2d::<f64>::new(&mut rng, 3, 4, geom);
            conv.bias = Array1::from_shape_fn(4, |i| i as f64 * 0.1);
            let x = random(&mut rng, (3, 9, 6));
            let fast = conv.forward(&x).unwrap();
            let slow = naive_conv(&x, &conv);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// <y, conv(x)> is linear in x and w, so the backward pass must satisfy
    /// the adjoint identities exactly up to rounding.
    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // stride 2 goes through im2col, the small stride-1 case through the direct kernels
        for (geom, cin, cout) in [(ConvGeom::new(3, 2, 1), 2, 3), (ConvGeom::new(3, 1, 1), 2, 3), (ConvGeom::new(3, 1, 1), 12, 8)] {
            let conv = Conv2d::<f64>::new(&mut rng, cin, cout, geom);
            let x = random(&mut rng, (cin, 19, 7));
            let y = conv.forward(&x).unwrap();
            let gy = random(&mut rng, y.dim());
            let mut grad = Conv2d::zeros(cin, cout, geom);
            let gx = conv.backward(&x, &gy, Some(&mut grad), true).unwrap().unwrap();
            // <gy, W x> (bias-free part) == <gx, x> == <gW, W>
            let lin: f64 = y.iter().zip(gy.iter()).map(|(a, b)| a * b).sum::<f64>();
            let bias_part: f64 = gy.axis_iter(Axis(0)).zip(conv.bias.iter()).map(|(p, b)| p.sum() * b).sum();
            let via_x: f64 = gx.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            let via_w: f64 = grad.weight.iter().zip(conv.weight.iter()).map(|(a, b)| a * b).sum();
            assert!((lin - bias_part - via_x).abs() < 1e-10);
            assert!((lin - bias_part - via_w).abs() < 1e-10);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let geom = ConvGeom::new(4, 2, 1);
        let conv = Conv2d::<f64>::new(&mut rng, 2, 3, geom);
        // same weights, viewed as (in=3, out=2)
        let tconv = ConvTranspose2d { weight: conv.weight.clone(), bias: Array1::zeros(2), geom };
        let x = random(&mut rng, (2, 8, 6));
        let z = random(&mut rng, (3, 4, 3));
        let cx = conv.forward(&x).unwrap();
        let tz = tconv.forward(&z).unwrap();
        assert_eq!(tz.dim(), (2, 8, 6));
        let lhs: f64 = cx.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = tz.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let geom = ConvGeom::new(4, 2, 1);
        let mut t = ConvTranspose2d::<f64>::new(&mut rng, 2, 2, geom);
        t.bias = Array1::from_vec(vec![0.3, -0.2]);
        let x = random(&mut rng, (2, 3, 4));
        let gy = random(&mut rng, (2, 6, 8));
        let loss = |t: &ConvTranspose2d<f64>, x: &Array3<f64>| -> f64 {
            t.forward(x).unwrap().iter().zip(gy.iter()).map(|(a, b)| a * b).sum()
        };
        let mut grad = t.clone();
        grad.weight.fill(0.0);
        grad.bias.fill(0.0);
        let gx = t.backward(&x, &gy, Some(&mut grad), true).unwrap().unwrap();
        let h = 1e-6;
        for idx in [[0, 1, 2, 3], [1, 0, 0, 1]] {
            let mut tp = t.clone();
            tp.weight[idx] += h;
            let mut tm = t.clone();
            tm.weight[idx] -= h;
            let fd = (loss(&tp, &x) - loss(&tm, &x)) / (2.0 * h);
            assert!((fd - grad.weight[idx]).abs() < 1e-7);
        }
        let mut xp = x.clone();
        xp[[1, 2, 3]] += h;
        let mut xm = x.clone();
        xm[[1, 2, 3]] -= h;
        let fd = (loss(&t, &xp) - loss(&t, &xm)) / (2.0 * h);
        assert!((fd - gx[[1, 2, 3]]).abs() < 1e-7);
        let mut tb = t.clone();
        tb.bias[1] += h;
        let mut tb2 = t.clone();
        tb2.bias[1] -= h;
        let fd = (loss(&tb, &x) - loss(&tb2, &x)) / (2.0 * h);
        assert!((fd - grad.bias[1]).abs() < 1e-7);
    }

    #[test]
    fn direct_transposed_kernels_match_gemm_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for geom in [ConvGeom::new(4, 2, 1), ConvGeom::new(3, 2, 1), ConvGeom::new(2, 2, 0), ConvGeom::new(3, 1, 1)] {
            // 9 x 8 channels takes the GEMM path; single-input slices take the direct one
            let big = ConvTranspose2d::<f64>::new(&mut rng, 9, 8, geom);
            let x = random(&mut rng, (9, 5, 7));
            let y = big.forward(&x).unwrap();
            let gy = random(&mut rng, y.dim());
            let mut g_big = ConvTranspose2d { weight: Array4::zeros(big.weight.dim()), bias: Array1::zeros(8), geom };
            let dx = big.backward(&x, &gy, Some(&mut g_big), true).unwrap().unwrap();
            let mut sum = Array3::<f64>::zeros(y.dim());
            for ci in 0..9 {
                let w = big.weight.slice(ndarray::s![ci..ci + 1, .., .., ..]).to_owned();
                let one = ConvTranspose2d { weight: w, bias: Array1::zeros(8), geom };
                let xi = x.slice(ndarray::s![ci..ci + 1, .., ..]).to_owned();
                sum += &one.forward(&xi).unwrap();
                let mut g = ConvTranspose2d { weight: Array4::zeros(one.weight.dim()), bias: Array1::zeros(8), geom };
                let dxi = one.backward(&xi, &gy, Some(&mut g), true).unwrap().unwrap();
                assert!((&dxi.index_axis(Axis(0), 0) - &dx.index_axis(Axis(0), ci)).iter().all(|v| v.abs() < 1e-10));
                let gw = g_big.weight.slice(ndarray::s![ci..ci + 1, .., .., ..]);
                assert!((&g.weight - &gw).iter().all(|v| v.abs() < 1e-10));
            }
            assert!((&sum - &y).iter().all(|v| v.abs() < 1e-10), "{geom:?}");
        }
    }
}
