//! Forward and backward kernels over 2D and 3D feature maps.
//!
//! Every kernel treats a 2D map as a 3D map with a single slice, so one
//! implementation serves both dimensionalities. Kernels are isotropic over
//! the real spatial axes; the synthetic slice axis of a 2D map always has
//! kernel, stride and window 1.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Upper bound on the number of elements of an im2col tile.
const TILE_ELEMS: usize = 1 << 22;
// Unit tests shrink the shift-path tile to one slice so slab seams are exercised.
const SHIFT_ELEMS: usize = if cfg!(test) { 1 } else { 4 * TILE_ELEMS };

pub const BN_EPS: f64 = 1e-5;

/// Stride and zero padding of a convolution (isotropic).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Kernel-3 "same" convolution.
    pub const SAME3: ConvGeom = ConvGeom { stride: 1, pad: 1 };
    pub const POINTWISE: ConvGeom = ConvGeom { stride: 1, pad: 0 };
    /// Non-overlapping kernel-2 stride-2 convolution.
    pub const DOWN2: ConvGeom = ConvGeom { stride: 2, pad: 0 };
}

/// Spatial extents padded to three axes (`[1, h, w]` for 2D maps).
fn spatial3(shape: &[usize]) -> Result<[usize; 3]> {
    match shape.len() {
        4 => Ok([1, shape[2], shape[3]]),
        5 => Ok([shape[2], shape[3], shape[4]]),
        r => Err(Error::Shape(format!("feature maps must have rank 4 or 5, got rank {r}"))),
    }
}

/// Isotropic per-axis value with the synthetic slice axis pinned to `one`.
fn axes3(rank: usize, v: usize, one: usize) -> [usize; 3] {
    if rank == 4 {
        [one, v, v]
    } else {
        [v, v, v]
    }
}

fn with_spatial(n: usize, c: usize, rank: usize, s: [usize; 3]) -> Vec<usize> {
    if rank == 4 {
        vec![n, c, s[1], s[2]]
    } else {
        vec![n, c, s[0], s[1], s[2]]
    }
}

#[derive(Clone, Copy, Debug)]
struct Geo {
    channels: usize,
    ins: [usize; 3],
    outs: [usize; 3],
    k: [usize; 3],
    st: [usize; 3],
    pad: [usize; 3],
}

impl Geo {
    fn kvol(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }
    fn in_plane(&self) -> usize {
        self.ins[0] * self.ins[1] * self.ins[2]
    }
    fn out_plane(&self) -> usize {
        self.outs[0] * self.outs[1] * self.outs[2]
    }
    fn out_rows(&self) -> usize {
        self.outs[0] * self.outs[1]
    }
    fn rows_per_tile(&self) -> usize {
        let per_row = (self.channels * self.kvol() * self.outs[2]).max(1);
        (TILE_ELEMS / per_row).clamp(1, self.out_rows().max(1))
    }
    fn is_identity(&self) -> bool {
        self.k == [1, 1, 1] && self.st == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Unfolds output rows `[r0, r1)` (row = one `(slice, h)` pair) of a single
/// batch item into `cols`, laid out `[channels * kvol, (r1 - r0) * out_w]`.
fn im2col_rows<S: Scalar>(x: &[S], g: &Geo, r0: usize, r1: usize, cols: &mut [S]) {
    let ow = g.outs[2];
    let tile_p = (r1 - r0) * ow;
    let plane = g.in_plane();
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * plane..(c + 1) * plane];
        for kd in 0..g.k[0] {
            for kh in 0..g.k[1] {
                for kw in 0..g.k[2] {
                    let dst = &mut cols[row * tile_p..(row + 1) * tile_p];
                    row += 1;
                    for r in r0..r1 {
                        let (od, oh) = (r / g.outs[1], r % g.outs[1]);
                        let seg = &mut dst[(r - r0) * ow..(r - r0 + 1) * ow];
                        let id = (od * g.st[0] + kd) as isize - g.pad[0] as isize;
                        let ih = (oh * g.st[1] + kh) as isize - g.pad[1] as isize;
                        if id < 0 || ih < 0 || id >= g.ins[0] as isize || ih >= g.ins[1] as isize {
                            seg.fill(S::zero());
                            continue;
                        }
                        let base = (id as usize * g.ins[1] + ih as usize) * g.ins[2];
                        let src = &xc[base..base + g.ins[2]];
                        if g.st[2] == 1 {
                            let (lo, hi) = valid_span(ow, g.ins[2], kw as isize - g.pad[2] as isize);
                            seg[..lo].fill(S::zero());
                            seg[hi..].fill(S::zero());
                            if lo < hi {
                                let s0 = (lo + kw) - g.pad[2];
                                seg[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                            }
                            continue;
                        }
                        for (o, v) in seg.iter_mut().enumerate() {
                            let iw = (o * g.st[2] + kw) as isize - g.pad[2] as isize;
                            *v = if iw < 0 || iw >= g.ins[2] as isize { S::zero() } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: accumulates `cols` back into `x`.
fn col2im_rows<S: Scalar>(cols: &[S], g: &Geo, r0: usize, r1: usize, x: &mut [S]) {
    let ow = g.outs[2];
    let tile_p = (r1 - r0) * ow;
    let plane = g.in_plane();
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &mut x[c * plane..(c + 1) * plane];
        for kd in 0..g.k[0] {
            for kh in 0..g.k[1] {
                for kw in 0..g.k[2] {
                    let src = &cols[row * tile_p..(row + 1) * tile_p];
                    row += 1;
                    for r in r0..r1 {
                        let (od, oh) = (r / g.outs[1], r % g.outs[1]);
                        let seg = &src[(r - r0) * ow..(r - r0 + 1) * ow];
                        let id = (od * g.st[0] + kd) as isize - g.pad[0] as isize;
                        let ih = (oh * g.st[1] + kh) as isize - g.pad[1] as isize;
                        if id < 0 || ih < 0 || id >= g.ins[0] as isize || ih >= g.ins[1] as isize {
                            continue;
                        }
                        let base = (id as usize * g.ins[1] + ih as usize) * g.ins[2];
                        let dst = &mut xc[base..base + g.ins[2]];
                        if g.st[2] == 1 {
                            let (lo, hi) = valid_span(ow, g.ins[2], kw as isize - g.pad[2] as isize);
                            if lo < hi {
                                let d0 = (lo + kw) - g.pad[2];
                                for (d, &v) in dst[d0..d0 + hi - lo].iter_mut().zip(&seg[lo..hi]) {
                                    *d += v;
                                }
                            }
                            continue;
                        }
                        for (o, &v) in seg.iter().enumerate() {
                            let iw = (o * g.st[2] + kw) as isize - g.pad[2] as isize;
                            if iw >= 0 && iw < g.ins[2] as isize {
                                dst[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `o in [lo, hi)` of a length-`n_out` axis for which
/// `o + delta` lies inside `[0, n_in)`.
fn valid_span(n_out: usize, n_in: usize, delta: isize) -> (usize, usize) {
    let lo = (-delta).max(0) as usize;
    let hi = (n_in as isize - delta).clamp(0, n_out as isize) as usize;
    (lo.min(hi), hi)
}

/// Calls `f(dst, src, len)` for every contiguous run of a shift that maps
/// position `q` of a grid to `q + delta` of the same grid, restricted to
/// destination slices `dst_d` and source slices `src_d`.
fn for_shift(
    dims: [usize; 3],
    delta: [isize; 3],
    dst_d: Range<usize>,
    src_d: Range<usize>,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (d0, d1) = valid_span(dims[0], dims[0], delta[0]);
    let d0 = d0.max(dst_d.start).max((src_d.start as isize - delta[0]).max(0) as usize);
    let d1 = d1.min(dst_d.end).min((src_d.end as isize - delta[0]).max(0) as usize);
    let (h0, h1) = valid_span(dims[1], dims[1], delta[1]);
    let (w0, w1) = valid_span(dims[2], dims[2], delta[2]);
    if w0 >= w1 {
        return;
    }
    for d in d0..d1 {
        for h in h0..h1 {
            let dst = (d * dims[1] + h) * dims[2] + w0;
            let src = (((d as isize + delta[0]) as usize * dims[1] + (h as isize + delta[1]) as usize) * dims[2]) as isize
                + w0 as isize
                + delta[2];
            f(dst, src as usize, w1 - w0);
        }
    }
}

impl Geo {
    /// Offsets of every kernel tap, in weight order.
    fn tap_offsets(&self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(self.kvol());
        for kd in 0..self.k[0] {
            for kh in 0..self.k[1] {
                for kw in 0..self.k[2] {
                    out.push([
                        kd as isize - self.pad[0] as isize,
                        kh as isize - self.pad[1] as isize,
                        kw as isize - self.pad[2] as isize,
                    ]);
                }
            }
        }
        out
    }

    /// Stride-1 size-preserving convolution whose output is narrower than
    /// its input: multiply the raw input by every tap and shift-add, which
    /// avoids unfolding the wide side.
    fn prefers_shift(&self, c_out: usize) -> bool {
        self.st == [1, 1, 1]
            && self.outs == self.ins
            && !self.is_identity()
            && c_out < self.channels
            && self.kvol() * c_out * self.ins[1] * self.ins[2] <= 4 * TILE_ELEMS
    }

    /// Depth slices per tile of the shift path.
    fn shift_slab(&self, c_out: usize) -> usize {
        let per_slice = (self.kvol() * c_out * self.ins[1] * self.ins[2]).max(1);
        (SHIFT_ELEMS / per_slice).clamp(1, self.ins[0])
    }
}

/// `[c_out, c_in, kvol]` weights as a `[kvol * c_out, c_in]` matrix.
fn taps_major<S: Scalar>(w: &[S], c_out: usize, c_in: usize, kvol: usize) -> Vec<S> {
    let mut out = vec![S::zero(); w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for t in 0..kvol {
                out[(t * c_out + co) * c_in + ci] = w[(co * c_in + ci) * kvol + t];
            }
        }
    }
    out
}

fn taps_minor<S: Scalar>(wp: &[S], c_out: usize, c_in: usize, kvol: usize, w: &mut [S]) {
    for co in 0..c_out {
        for ci in 0..c_in {
            for t in 0..kvol {
                w[(co * c_in + ci) * kvol + t] += wp[(t * c_out + co) * c_in + ci];
            }
        }
    }
}

fn conv_geo(x: &[usize], w: &[usize], geom: ConvGeom) -> Result<(Geo, Vec<usize>)> {
    let ins = spatial3(x)?;
    if w.len() != x.len() {
        return Err(Error::Shape(format!("conv weight rank {} does not match input rank {}", w.len(), x.len())));
    }
    if w[1] != x[1] {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, feature map has {} (input {:?}, weight {:?})",
            w[1], x[1], x, w
        )));
    }
    let k = w[2];
    if w[2..].iter().any(|&v| v != k) || k == 0 {
        return Err(Error::Shape(format!("conv kernels must be isotropic, got {w:?}")));
    }
    if geom.stride == 0 {
        return Err(Error::Shape("conv stride must be positive".into()));
    }
    let rank = x.len();
    let kk = axes3(rank, k, 1);
    let st = axes3(rank, geom.stride, 1);
    let pad = axes3(rank, geom.pad, 0);
    let mut outs = [0; 3];
    for a in 0..3 {
        let span = ins[a] + 2 * pad[a];
        if span < kk[a] {
            return Err(Error::Shape(format!("conv kernel {k} larger than padded input {x:?}")));
        }
        outs[a] = (span - kk[a]) / st[a] + 1;
    }
    let g = Geo { channels: x[1], ins, outs, k: kk, st, pad };
    Ok((g, with_spatial(x[0], w[0], rank, outs)))
}

pub fn conv_shape(x: &[usize], w: &[usize], geom: ConvGeom) -> Result<Vec<usize>> {
    conv_geo(x, w, geom).map(|(_, s)| s)
}

/// Convolution; weight `[c_out, c_in, k...]`, bias `[c_out]`.
pub fn conv_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>, geom: ConvGeom) -> Result<Tensor<S>> {
    let (g, out_shape) = conv_geo(x.shape(), w.shape(), geom)?;
    let c_out = w.shape()[0];
    if b.numel() != c_out {
        return Err(Error::Shape(format!("conv bias has {} entries, expected {c_out}", b.numel())));
    }
    let kc = g.channels * g.kvol();
    let (pin, pout) = (g.in_plane(), g.out_plane());
    let mut y = Tensor::zeros(&out_shape);
    let wm = MatRef::row_major(w.data(), c_out, kc);
    let rows_per = g.rows_per_tile();
    let mut cols = Vec::new();
    let (mut taps, mut z) = (None, Vec::new());
    for n in 0..x.batch() {
        let xi = &x.data()[n * g.channels * pin..(n + 1) * g.channels * pin];
        let yi = &mut y.data_mut()[n * c_out * pout..(n + 1) * c_out * pout];
        if g.is_identity() {
            gemm(S::one(), wm, MatRef::row_major(xi, kc, pout), S::zero(), yi, pout);
        } else if g.prefers_shift(c_out) {
            let wp = taps.get_or_insert_with(|| taps_major(w.data(), c_out, g.channels, g.kvol()));
            let kv = g.kvol();
            let hw = g.ins[1] * g.ins[2];
            let wpm = MatRef::row_major(wp, kv * c_out, g.channels);
            let slab = g.shift_slab(c_out);
            let mut a = 0;
            while a < g.ins[0] {
                let b = (a + slab).min(g.ins[0]);
                let sp = (b - a) * hw;
                z.resize(kv * c_out * sp, S::zero());
                gemm(S::one(), wpm, MatRef::with_ld(&xi[a * hw..], g.channels, sp, pin), S::zero(), &mut z, sp);
                for (t, delta) in g.tap_offsets().into_iter().enumerate() {
                    for co in 0..c_out {
                        let zr = &z[(t * c_out + co) * sp..(t * c_out + co + 1) * sp];
                        let yr = &mut yi[co * pout..(co + 1) * pout];
                        for_shift(g.ins, delta, 0..g.ins[0], a..b, |d, s, len| {
                            let s = s - a * hw;
                            for (u, &v) in yr[d..d + len].iter_mut().zip(&zr[s..s + len]) {
                                *u += v;
                            }
                        });
                    }
                }
                a = b;
            }
        } else {
            let mut r0 = 0;
            while r0 < g.out_rows() {
                let r1 = (r0 + rows_per).min(g.out_rows());
                let tp = (r1 - r0) * g.outs[2];
                cols.resize(kc * tp, S::zero());
                im2col_rows(xi, &g, r0, r1, &mut cols);
                let off = r0 * g.outs[2];
                gemm(S::one(), wm, MatRef::row_major(&cols, kc, tp), S::zero(), &mut yi[off..], pout);
                r0 = r1;
            }
        }
        for (co, &bias) in b.data().iter().enumerate() {
            for v in &mut yi[co * pout..(co + 1) * pout] {
                *v += bias;
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv_forward`] with respect to input, weight and bias.
pub fn conv_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    geom: ConvGeom,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (g, out_shape) = conv_geo(x.shape(), w.shape(), geom)?;
    if dy.shape() != out_shape.as_slice() {
        return Err(Error::Shape(format!("conv gradient shape {:?} != {out_shape:?}", dy.shape())));
    }
    let c_out = w.shape()[0];
    let kc = g.channels * g.kvol();
    let (pin, pout) = (g.in_plane(), g.out_plane());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[c_out]);
    let wm = MatRef::row_major(w.data(), c_out, kc);
    let rows_per = g.rows_per_tile();
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let (mut taps, mut shifted, mut dwp) = (None, Vec::new(), Vec::new());
    for n in 0..x.batch() {
        let xi = &x.data()[n * g.channels * pin..(n + 1) * g.channels * pin];
        let dyi = &dy.data()[n * c_out * pout..(n + 1) * c_out * pout];
        for co in 0..c_out {
            db.data_mut()[co] += dyi[co * pout..(co + 1) * pout].iter().copied().sum();
        }
        let dxi = &mut dx.data_mut()[n * g.channels * pin..(n + 1) * g.channels * pin];
        if g.is_identity() {
            let dym = MatRef::row_major(dyi, c_out, pout);
            gemm(S::one(), dym, MatRef::row_major(xi, kc, pout).t(), S::one(), dw.data_mut(), kc);
            gemm(S::one(), wm.t(), dym, S::zero(), dxi, pout);
            continue;
        }
        if g.prefers_shift(c_out) {
            let kv = g.kvol();
            let hw = g.ins[1] * g.ins[2];
            let wp = taps.get_or_insert_with(|| taps_major(w.data(), c_out, g.channels, kv));
            dwp.resize(kv * c_out * g.channels, S::zero());
            let slab = g.shift_slab(c_out);
            let mut a = 0;
            while a < g.ins[0] {
                let b = (a + slab).min(g.ins[0]);
                let sp = (b - a) * hw;
                shifted.clear();
                shifted.resize(kv * c_out * sp, S::zero());
                for (t, delta) in g.tap_offsets().into_iter().enumerate() {
                    let back = [-delta[0], -delta[1], -delta[2]];
                    for co in 0..c_out {
                        let dr = &mut shifted[(t * c_out + co) * sp..(t * c_out + co + 1) * sp];
                        let sr = &dyi[co * pout..(co + 1) * pout];
                        for_shift(g.ins, back, a..b, 0..g.ins[0], |d, s, len| {
                            dr[d - a * hw..d - a * hw + len].copy_from_slice(&sr[s..s + len])
                        });
                    }
                }
                let dm = MatRef::row_major(&shifted, kv * c_out, sp);
                let xs = MatRef::with_ld(&xi[a * hw..], g.channels, sp, pin);
                gemm(S::one(), dm, xs.t(), S::one(), &mut dwp, g.channels);
                let wpm = MatRef::row_major(wp, kv * c_out, g.channels);
                gemm(S::one(), wpm.t(), dm, S::zero(), &mut dxi[a * hw..], pin);
                a = b;
            }
            continue;
        }
        let mut r0 = 0;
        while r0 < g.out_rows() {
            let r1 = (r0 + rows_per).min(g.out_rows());
            let tp = (r1 - r0) * g.outs[2];
            let off = r0 * g.outs[2];
            cols.resize(kc * tp, S::zero());
            dcols.resize(kc * tp, S::zero());
            im2col_rows(xi, &g, r0, r1, &mut cols);
            let dym = MatRef::with_ld(&dyi[off..], c_out, tp, pout);
            gemm(S::one(), dym, MatRef::row_major(&cols, kc, tp).t(), S::one(), dw.data_mut(), kc);
            gemm(S::one(), wm.t(), dym, S::zero(), &mut dcols, tp);
            col2im_rows(&dcols, &g, r0, r1, dxi);
            r0 = r1;
        }
    }
    if !dwp.is_empty() {
        taps_minor(&dwp, c_out, g.channels, g.kvol(), dw.data_mut());
    }
    Ok((dx, dw, db))
}

/// Geometry of a kernel=stride transposed convolution, expressed as the
/// im2col geometry of its (larger) output map.
fn deconv_geo(x: &[usize], w: &[usize]) -> Result<(Geo, Vec<usize>)> {
    let ins = spatial3(x)?;
    if w.len() != x.len() {
        return Err(Error::Shape(format!("deconv weight rank {} does not match input rank {}", w.len(), x.len())));
    }
    if w[0] != x[1] {
        return Err(Error::Shape(format!(
            "deconv expects {} input channels, feature map has {} (input {:?}, weight {:?})",
            w[0], x[1], x, w
        )));
    }
    let k = w[2];
    if w[2..].iter().any(|&v| v != k) || k == 0 {
        return Err(Error::Shape(format!("deconv kernels must be isotropic, got {w:?}")));
    }
    let rank = x.len();
    let kk = axes3(rank, k, 1);
    let big = [ins[0] * kk[0], ins[1] * kk[1], ins[2] * kk[2]];
    let g = Geo { channels: w[1], ins: big, outs: ins, k: kk, st: kk, pad: [0; 3] };
    Ok((g, with_spatial(x[0], w[1], rank, big)))
}

pub fn deconv_shape(x: &[usize], w: &[usize]) -> Result<Vec<usize>> {
    deconv_geo(x, w).map(|(_, s)| s)
}

/// Transposed convolution with stride equal to the kernel size; weight
/// `[c_in, c_out, k...]`, bias `[c_out]`.
pub fn deconv_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (g, out_shape) = deconv_geo(x.shape(), w.shape())?;
    let (c_in, c_out) = (w.shape()[0], w.shape()[1]);
    if b.numel() != c_out {
        return Err(Error::Shape(format!("deconv bias has {} entries, expected {c_out}", b.numel())));
    }
    let kc = c_out * g.kvol();
    let (p_small, p_big) = (g.out_plane(), g.in_plane());
    let wm = MatRef::row_major(w.data(), c_in, kc);
    let mut y = Tensor::zeros(&out_shape);
    let rows_per = g.rows_per_tile();
    let mut cols = Vec::new();
    for n in 0..x.batch() {
        let xi = &x.data()[n * c_in * p_small..(n + 1) * c_in * p_small];
        let yi = &mut y.data_mut()[n * c_out * p_big..(n + 1) * c_out * p_big];
        let mut r0 = 0;
        while r0 < g.out_rows() {
            let r1 = (r0 + rows_per).min(g.out_rows());
            let tp = (r1 - r0) * g.outs[2];
            let off = r0 * g.outs[2];
            cols.resize(kc * tp, S::zero());
            gemm(S::one(), wm.t(), MatRef::with_ld(&xi[off..], c_in, tp, p_small), S::zero(), &mut cols, tp);
            col2im_rows(&cols, &g, r0, r1, yi);
            r0 = r1;
        }
        for (co, &bias) in b.data().iter().enumerate() {
            for v in &mut yi[co * p_big..(co + 1) * p_big] {
                *v += bias;
            }
        }
    }
    Ok(y)
}

pub fn deconv_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (g, out_shape) = deconv_geo(x.shape(), w.shape())?;
    if dy.shape() != out_shape.as_slice() {
        return Err(Error::Shape(format!("deconv gradient shape {:?} != {out_shape:?}", dy.shape())));
    }
    let (c_in, c_out) = (w.shape()[0], w.shape()[1]);
    let kc = c_out * g.kvol();
    let (p_small, p_big) = (g.out_plane(), g.in_plane());
    let wm = MatRef::row_major(w.data(), c_in, kc);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[c_out]);
    let rows_per = g.rows_per_tile();
    let mut cols = Vec::new();
    for n in 0..x.batch() {
        let xi = &x.data()[n * c_in * p_small..(n + 1) * c_in * p_small];
        let dyi = &dy.data()[n * c_out * p_big..(n + 1) * c_out * p_big];
        for co in 0..c_out {
            db.data_mut()[co] += dyi[co * p_big..(co + 1) * p_big].iter().copied().sum();
        }
        let dxi = &mut dx.data_mut()[n * c_in * p_small..(n + 1) * c_in * p_small];
        let mut r0 = 0;
        while r0 < g.out_rows() {
            let r1 = (r0 + rows_per).min(g.out_rows());
            let tp = (r1 - r0) * g.outs[2];
            let off = r0 * g.outs[2];
            cols.resize(kc * tp, S::zero());
            im2col_rows(dyi, &g, r0, r1, &mut cols);
            let colm = MatRef::row_major(&cols, kc, tp);
            gemm(S::one(), wm, colm, S::zero(), &mut dxi[off..], p_small);
            gemm(S::one(), MatRef::with_ld(&xi[off..], c_in, tp, p_small), colm.t(), S::one(), dw.data_mut(), kc);
            r0 = r1;
        }
    }
    Ok((dx, dw, db))
}

/// Output shape of non-overlapping pooling with an isotropic window.
pub fn pool_shape(x: &[usize], window: usize) -> Result<Vec<usize>> {
    let ins = spatial3(x)?;
    let win = axes3(x.len(), window, 1);
    if window == 0 {
        return Err(Error::Shape("pool window must be positive".into()));
    }
    let mut outs = [0; 3];
    for a in 0..3 {
        if ins[a] % win[a] != 0 {
            return Err(Error::Shape(format!(
                "spatial extents {:?} are not divisible by pool window {window}",
                &x[2..]
            )));
        }
        outs[a] = ins[a] / win[a];
    }
    Ok(with_spatial(x[0], x[1], x.len(), outs))
}

/// Max pooling with window = stride. Returns the pooled map and, per output
/// element, the flat in-plane index of the selected input.
pub fn max_pool_forward<S: Scalar>(x: &Tensor<S>, window: usize) -> Result<(Tensor<S>, Vec<u32>)> {
    let out_shape = pool_shape(x.shape(), window)?;
    let ins = spatial3(x.shape())?;
    let outs = spatial3(&out_shape)?;
    let win = axes3(x.rank(), window, 1);
    let planes = x.batch() * x.channels();
    let (pin, pout) = (ins[0] * ins[1] * ins[2], outs[0] * outs[1] * outs[2]);
    let mut y = Tensor::zeros(&out_shape);
    let mut arg = vec![0u32; y.numel()];
    for p in 0..planes {
        let xp = &x.data()[p * pin..(p + 1) * pin];
        let yp = &mut y.data_mut()[p * pout..(p + 1) * pout];
        let ap = &mut arg[p * pout..(p + 1) * pout];
        for od in 0..outs[0] {
            for oh in 0..outs[1] {
                for ow in 0..outs[2] {
                    let mut best = S::zero();
                    let mut best_i = usize::MAX;
                    for kd in 0..win[0] {
                        for kh in 0..win[1] {
                            let row = ((od * win[0] + kd) * ins[1] + oh * win[1] + kh) * ins[2] + ow * win[2];
                            for kw in 0..win[2] {
                                let v = xp[row + kw];
                                if best_i == usize::MAX || v > best {
                                    best = v;
                                    best_i = row + kw;
                                }
                            }
                        }
                    }
                    let o = (od * outs[1] + oh) * outs[2] + ow;
                    yp[o] = best;
                    ap[o] = best_i as u32;
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool_backward<S: Scalar>(x_shape: &[usize], arg: &[u32], dy: &Tensor<S>) -> Tensor<S> {
    let mut dx = Tensor::zeros(x_shape);
    let planes = x_shape[0] * x_shape[1];
    let pin: usize = x_shape[2..].iter().product();
    let pout = dy.numel() / planes.max(1);
    for p in 0..planes {
        let dxp = &mut dx.data_mut()[p * pin..(p + 1) * pin];
        for o in 0..pout {
            dxp[arg[p * pout + o] as usize] += dy.data()[p * pout + o];
        }
    }
    dx
}

/// Output shape of linear upsampling by an integer factor on every
/// spatial axis.
pub fn upsample_shape(x: &[usize], factor: usize) -> Result<Vec<usize>> {
    let ins = spatial3(x)?;
    if factor == 0 {
        return Err(Error::Shape("upsampling factor must be positive".into()));
    }
    let f = axes3(x.len(), factor, 1);
    Ok(with_spatial(x[0], x[1], x.len(), [ins[0] * f[0], ins[1] * f[1], ins[2] * f[2]]))
}

/// Half-pixel-centred linear interpolation weights: for every output index,
/// the two source indices and the weight of the second one.
fn lerp_table(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|j| {
            let src = ((j as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn resample_axis<S: Scalar>(x: &[S], outer: usize, n_in: usize, inner: usize, table: &[(usize, usize, f64)]) -> Vec<S> {
    let n_out = table.len();
    if inner == 1 {
        let taps: Vec<(usize, usize, S, S)> =
            table.iter().map(|&(i0, i1, t)| (i0, i1, S::from_f64(1.0 - t), S::from_f64(t))).collect();
        let mut y = Vec::with_capacity(outer * n_out);
        for xs in x.chunks_exact(n_in) {
            y.extend(taps.iter().map(|&(i0, i1, w0, w1)| w0 * xs[i0] + w1 * xs[i1]));
        }
        return y;
    }
    let mut y = vec![S::zero(); outer * n_out * inner];
    for o in 0..outer {
        let xs = &x[o * n_in * inner..(o + 1) * n_in * inner];
        let ys = &mut y[o * n_out * inner..(o + 1) * n_out * inner];
        for (j, &(i0, i1, t)) in table.iter().enumerate() {
            let (w0, w1) = (S::from_f64(1.0 - t), S::from_f64(t));
            let dst = &mut ys[j * inner..(j + 1) * inner];
            let a = &xs[i0 * inner..(i0 + 1) * inner];
            let b = &xs[i1 * inner..(i1 + 1) * inner];
            for ((d, &va), &vb) in dst.iter_mut().zip(a).zip(b) {
                *d = w0 * va + w1 * vb;
            }
        }
    }
    y
}

fn resample_axis_adjoint<S: Scalar>(
    dy: &[S],
    outer: usize,
    n_in: usize,
    inner: usize,
    table: &[(usize, usize, f64)],
) -> Vec<S> {
    let n_out = table.len();
    let mut dx = vec![S::zero(); outer * n_in * inner];
    if inner == 1 {
        let taps: Vec<(usize, usize, S, S)> =
            table.iter().map(|&(i0, i1, t)| (i0, i1, S::from_f64(1.0 - t), S::from_f64(t))).collect();
        for (dys, dxs) in dy.chunks_exact(n_out).zip(dx.chunks_exact_mut(n_in)) {
            for (&g, &(i0, i1, w0, w1)) in dys.iter().zip(&taps) {
                dxs[i0] += w0 * g;
                dxs[i1] += w1 * g;
            }
        }
        return dx;
    }
    for o in 0..outer {
        let dys = &dy[o * n_out * inner..(o + 1) * n_out * inner];
        let dxs = &mut dx[o * n_in * inner..(o + 1) * n_in * inner];
        for (j, &(i0, i1, t)) in table.iter().enumerate() {
            let (w0, w1) = (S::from_f64(1.0 - t), S::from_f64(t));
            let src = &dys[j * inner..(j + 1) * inner];
            for (k, &g) in src.iter().enumerate() {
                dxs[i0 * inner + k] += w0 * g;
                dxs[i1 * inner + k] += w1 * g;
            }
        }
    }
    dx
}

/// Spatial axes (as tensor axis indices) that an upsampling resamples.
fn spatial_axes(rank: usize) -> std::ops::Range<usize> {
    2..rank
}

/// Bilinear (2D) or trilinear (3D) upsampling by an integer factor.
pub fn upsample_forward<S: Scalar>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let out_shape = upsample_shape(x.shape(), factor)?;
    if factor == 1 {
        return Ok(x.clone());
    }
    let mut shape = x.shape().to_vec();
    let mut data = x.data().to_vec();
    for axis in spatial_axes(x.rank()).rev() {
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let table = lerp_table(shape[axis], factor);
        data = resample_axis(&data, outer, shape[axis], inner, &table);
        shape[axis] *= factor;
    }
    Tensor::from_vec(out_shape, data)
}

pub fn upsample_backward<S: Scalar>(x_shape: &[usize], factor: usize, dy: &Tensor<S>) -> Result<Tensor<S>> {
    if factor == 1 {
        return Ok(dy.clone());
    }
    let mut shape = dy.shape().to_vec();
    let mut data = dy.data().to_vec();
    for axis in spatial_axes(x_shape.len()) {
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n_in = x_shape[axis];
        let table = lerp_table(n_in, factor);
        data = resample_axis_adjoint(&data, outer, n_in, inner, &table);
        shape[axis] = n_in;
    }
    Tensor::from_vec(x_shape.to_vec(), data)
}

/// Saved state of a training-mode batch normalization.
pub struct BnCache<S> {
    pub xhat: Tensor<S>,
    pub inv_std: Vec<S>,
    pub mean: Vec<S>,
    /// Unbiased batch variance, used for the running estimate.
    pub var_unbiased: Vec<S>,
}

fn bn_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let p: usize = shape[2..].iter().product();
    (n, c, p)
}

/// Per-channel normalization over the batch and spatial axes.
pub fn batch_norm_train<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<(Tensor<S>, BnCache<S>)> {
    let (n, c, p) = bn_layout(x.shape());
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!("batch norm over {c} channels got {} scales", gamma.numel())));
    }
    let m = (n * p) as f64;
    let mut mean = vec![S::zero(); c];
    let mut inv_std = vec![S::zero(); c];
    let mut var_unbiased = vec![S::zero(); c];
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * p;
            s += x.data()[off..off + p].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * p;
            ss += x.data()[off..off + p].iter().map(|v| (v.to_f64() - mu).powi(2)).sum::<f64>();
        }
        let var = ss / m;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        mean[ch] = S::from_f64(mu);
        inv_std[ch] = S::from_f64(istd);
        var_unbiased[ch] = S::from_f64(if m > 1.0 { ss / (m - 1.0) } else { var });
        let (g, bt, mu_s, is) = (gamma.data()[ch], beta.data()[ch], S::from_f64(mu), S::from_f64(istd));
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                let h = (x.data()[i] - mu_s) * is;
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + bt;
            }
        }
    }
    Ok((y, BnCache { xhat, inv_std, mean, var_unbiased }))
}

pub fn batch_norm_train_backward<S: Scalar>(
    cache: &BnCache<S>,
    gamma: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, c, p) = bn_layout(dy.shape());
    let m = S::from_f64((n * p) as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let (mut sb, mut sg) = (S::zero(), S::zero());
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                sb += dy.data()[i];
                sg += dy.data()[i] * cache.xhat.data()[i];
            }
        }
        dbeta.data_mut()[ch] = sb;
        dgamma.data_mut()[ch] = sg;
        let scale = gamma.data()[ch] * cache.inv_std[ch] / m;
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                dx.data_mut()[i] = scale * (m * dy.data()[i] - sb - cache.xhat.data()[i] * sg);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Inference-mode normalization with running statistics. Returns the output
/// and the normalized input (needed for gradients of the affine terms).
pub fn batch_norm_eval<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, c, p) = bn_layout(x.shape());
    if gamma.numel() != c || running_mean.numel() != c || running_var.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!("batch norm over {c} channels got mismatched statistics")));
    }
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    for ch in 0..c {
        let is = S::from_f64(1.0 / (running_var.data()[ch].to_f64() + BN_EPS).sqrt());
        let (mu, g, bt) = (running_mean.data()[ch], gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                let h = (x.data()[i] - mu) * is;
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + bt;
            }
        }
    }
    Ok((y, xhat))
}

pub fn batch_norm_eval_backward<S: Scalar>(
    xhat: &Tensor<S>,
    gamma: &Tensor<S>,
    running_var: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, c, p) = bn_layout(dy.shape());
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let scale = gamma.data()[ch] * S::from_f64(1.0 / (running_var.data()[ch].to_f64() + BN_EPS).sqrt());
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                let g = dy.data()[i];
                dbeta.data_mut()[ch] += g;
                dgamma.data_mut()[ch] += g * xhat.data()[i];
                dx.data_mut()[i] = g * scale;
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn concat_shape(shapes: &[&[usize]]) -> Result<Vec<usize>> {
    let first = shapes.first().ok_or_else(|| Error::Contract("concatenation of an empty list".into()))?;
    let mut c = 0;
    for s in shapes {
        if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
            return Err(Error::Shape(format!("cannot concatenate {s:?} with {first:?} along channels")));
        }
        c += s[1];
    }
    let mut out = first.to_vec();
    out[1] = c;
    Ok(out)
}

/// Channel-wise concatenation.
pub fn concat_forward<S: Scalar>(xs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let shapes: Vec<&[usize]> = xs.iter().map(|t| t.shape()).collect();
    let out_shape = concat_shape(&shapes)?;
    let n = out_shape[0];
    let p: usize = out_shape[2..].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for b in 0..n {
        for t in xs {
            let block = t.channels() * p;
            data.extend_from_slice(&t.data()[b * block..(b + 1) * block]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Splits a channel-concatenated gradient back into per-input gradients.
pub fn concat_backward<S: Scalar>(shapes: &[Vec<usize>], dy: &Tensor<S>) -> Vec<Tensor<S>> {
    let n = dy.batch();
    let p: usize = dy.spatial().iter().product();
    let mut outs: Vec<Vec<S>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let total = dy.channels() * p;
    for b in 0..n {
        let mut off = b * total;
        for (s, o) in shapes.iter().zip(outs.iter_mut()) {
            let block = s[1] * p;
            o.extend_from_slice(&dy.data()[off..off + block]);
            off += block;
        }
    }
    shapes
        .iter()
        .zip(outs)
        .map(|(s, d)| Tensor::from_vec(s.clone(), d).expect("concat gradient sizes are consistent"))
        .collect()
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn relu_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    y.zip_map(dy, |v, g| if v > S::zero() { g } else { S::zero() }).expect("relu shapes match")
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| {
        let v = v.to_f64();
        S::from_f64(if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { v.exp() / (1.0 + v.exp()) })
    })
}

pub fn sigmoid_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    y.zip_map(dy, |p, g| g * p * (S::one() - p)).expect("sigmoid shapes match")
}

/// Normalized exponential over the channel axis at every spatial position.
pub fn softmax_channels<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, p) = bn_layout(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for i in 0..p {
            let idx = |ch: usize| (b * c + ch) * p + i;
            let m = (0..c).map(|ch| x.data()[idx(ch)].to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (x.data()[idx(ch)].to_f64() - m).exp()).sum();
            for ch in 0..c {
                y.data_mut()[idx(ch)] = S::from_f64((x.data()[idx(ch)].to_f64() - m).exp() / z);
            }
        }
    }
    y
}

pub fn softmax_channels_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let (n, c, p) = bn_layout(y.shape());
    let mut dx = Tensor::zeros(y.shape());
    for b in 0..n {
        for i in 0..p {
            let idx = |ch: usize| (b * c + ch) * p + i;
            let dot: S = (0..c).map(|ch| y.data()[idx(ch)] * dy.data()[idx(ch)]).sum();
            for ch in 0..c {
                dx.data_mut()[idx(ch)] = y.data()[idx(ch)] * (dy.data()[idx(ch)] - dot);
            }
        }
    }
    dx
}
