//! Numeric kernels behind the graph operations. All functions work on
//! NCHW tensors and are single-threaded with a fixed reduction order, so a
//! given input always produces bit-identical output.

use std::borrow::Cow;

use super::{matmul, Float, Tensor};
use crate::error::{Error, Result};

/// How a convolution reads pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ConvMode {
    /// Ordinary cross-correlation with zero padding.
    Zero,
    /// Cross-correlation of differences `x(p + o) - x(p)` with replicate
    /// padding. Equal to `Zero` mode for zero-sum kernels away from the
    /// border, and exactly zero on constant input.
    Residual,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        w: &[usize],
        stride: usize,
        pad: usize,
        mode: ConvMode,
    ) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        };
        let (&[n, cin, h, wd], &[cout, wcin, kh, kw]) = (x, w) else {
            return Err(mismatch());
        };
        if wcin != cin || kh != kw || kh == 0 || stride == 0 {
            return Err(mismatch());
        }
        let k = kh;
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: x.to_vec(),
                reason: format!("kernel {k} with pad {pad} does not fit"),
            });
        }
        if mode == ConvMode::Residual && (stride != 1 || k % 2 == 0 || pad != k / 2) {
            return Err(Error::invalid(
                "residual convolution needs an odd kernel, stride 1 and same padding",
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output column range for kernel column `kx`.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.pad);
        let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
        let hi = if self.w + pad > kx {
            ((self.w - 1 + pad - kx) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds the batch into a `(cin·k·k) × (n·ho·wo)` matrix.
fn im2col<T: Float>(x: &[T], g: &ConvGeom, mode: ConvMode) -> Vec<T> {
    let np = g.n * g.plane();
    let mut cols = vec![T::zero(); g.rows() * np];
    match mode {
        ConvMode::Zero => im2col_zero(x, g, &mut cols),
        ConvMode::Residual => im2col_residual(x, g, &mut cols),
    }
    cols
}

fn im2col_zero<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let np = g.n * g.plane();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * np..(row + 1) * np];
                let (lo, hi) = g.valid_cols(kx);
                for n in 0..g.n {
                    let src = &x[(n * g.cin + ci) * g.h * g.w..(n * g.cin + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut dst_row[n * g.plane() + oy * g.wo..][..g.wo];
                        if g.stride == 1 {
                            let ix0 = lo + kx - g.pad;
                            dst[lo..hi].copy_from_slice(&src_row[ix0..ix0 + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = src_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col_residual<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let np = g.n * g.plane();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let src = &x[(n * g.cin + ci) * g.h * g.w..(n * g.cin + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = clamp(oy as isize + ky as isize - g.pad as isize, g.h);
                        for ox in 0..g.wo {
                            let ix = clamp(ox as isize + kx as isize - g.pad as isize, g.w);
                            dst_row[n * g.plane() + oy * g.wo + ox] =
                                src[iy * g.w + ix] - src[oy * g.w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input.
fn col2im<T: Float>(cols: &[T], g: &ConvGeom, mode: ConvMode, dx: &mut [T]) {
    let np = g.n * g.plane();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src_row = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let base = (n * g.cin + ci) * g.h * g.w;
                    let dst = &mut dx[base..base + g.h * g.w];
                    for oy in 0..g.ho {
                        let src = &src_row[n * g.plane() + oy * g.wo..][..g.wo];
                        match mode {
                            ConvMode::Zero => {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                let (lo, hi) = g.valid_cols(kx);
                                let drow = &mut dst[iy as usize * g.w..][..g.w];
                                for ox in lo..hi {
                                    drow[ox * g.stride + kx - g.pad] += src[ox];
                                }
                            }
                            ConvMode::Residual => {
                                let iy = clamp(oy as isize + ky as isize - g.pad as isize, g.h);
                                for ox in 0..g.wo {
                                    let ix =
                                        clamp(ox as isize + kx as isize - g.pad as isize, g.w);
                                    dst[iy * g.w + ix] += src[ox];
                                    dst[oy * g.w + ox] -= src[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Reorders `[n][c][p]` into `[c][n·p]`.
fn batch_to_channel_major<T: Float>(x: &[T], n: usize, c: usize, p: usize) -> Cow<'_, [T]> {
    if n == 1 {
        return Cow::Borrowed(x);
    }
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..][..p].copy_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
    Cow::Owned(out)
}

fn channel_major_to_batch<T: Float>(x: Vec<T>, n: usize, c: usize, p: usize) -> Vec<T> {
    if n == 1 {
        return x;
    }
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..][..p].copy_from_slice(&x[ch * n * p + b * p..][..p]);
        }
    }
    out
}

fn unfold<'a, T: Float>(x: &'a [T], g: &ConvGeom, mode: ConvMode) -> Cow<'a, [T]> {
    if g.is_pointwise() && mode == ConvMode::Zero {
        batch_to_channel_major(x, g.n, g.cin, g.plane())
    } else {
        Cow::Owned(im2col(x, g, mode))
    }
}

pub(crate) fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    mode: ConvMode,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad, mode)?;
    if let Some(b) = b {
        if b.numel() != g.cout {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let np = g.n * g.plane();
    let cols = unfold(x.data(), &g, mode);
    let mut out = vec![T::zero(); g.cout * np];
    matmul(g.cout, g.rows(), np, w.data(), false, &cols, false, &mut out, false);
    if let Some(b) = b {
        for (co, row) in out.chunks_mut(np).enumerate() {
            let bias = b.data()[co];
            row.iter_mut().for_each(|v| *v += bias);
        }
    }
    let out = channel_major_to_batch(out, g.n, g.cout, g.plane());
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
    mode: ConvMode,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad, mode)?;
    let np = g.n * g.plane();
    let gt = batch_to_channel_major(grad.data(), g.n, g.cout, g.plane());
    let dw = if need[1] {
        let cols = unfold(x.data(), &g, mode);
        let mut dw = vec![T::zero(); g.cout * g.rows()];
        matmul(g.cout, np, g.rows(), &gt, false, &cols, true, &mut dw, false);
        Some(Tensor::new(w.shape(), dw)?)
    } else {
        None
    };
    let db = need[2].then(|| {
        Tensor::from_fn(&[g.cout], |co| gt[co * np..(co + 1) * np].iter().copied().sum())
    });
    let dx = if need[0] {
        let mut dcols = vec![T::zero(); g.rows() * np];
        matmul(g.rows(), g.cout, np, w.data(), true, &gt, false, &mut dcols, false);
        let dx = if g.is_pointwise() && mode == ConvMode::Zero {
            channel_major_to_batch(dcols, g.n, g.cin, g.plane())
        } else {
            let mut dx = vec![T::zero(); x.numel()];
            col2im(&dcols, &g, mode, &mut dx);
            dx
        };
        Some(Tensor::new(x.shape(), dx)?)
    } else {
        None
    };
    Ok(ConvGrads { dx, dw, db })
}

/// Source index pairs and weights for bilinear resampling along one axis
/// (half-pixel centres, i.e. align-corners false).
fn bilinear_axis(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Float>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let ys = bilinear_axis(h, factor);
    let xs = bilinear_axis(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let lx = T::of(lx);
                let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                dst[oy * wo + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub(crate) fn upsample_backward<T: Float>(
    shape: &[usize],
    grad: &Tensor<T>,
    factor: usize,
) -> Result<Tensor<T>> {
    let (h, w) = (shape[2], shape[3]);
    let ys = bilinear_axis(h, factor);
    let xs = bilinear_axis(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); shape.iter().product()];
    for (dst, src) in dx.chunks_mut(h * w).zip(grad.data().chunks(ho * wo)) {
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let lx = T::of(lx);
                let gv = src[oy * wo + ox];
                let top = gv * (T::one() - ly);
                let bot = gv * ly;
                dst[y0 * w + x0] += top * (T::one() - lx);
                dst[y0 * w + x1] += top * lx;
                dst[y1 * w + x0] += bot * (T::one() - lx);
                dst[y1 * w + x1] += bot * lx;
            }
        }
    }
    Tensor::new(shape, dx)
}

/// Normalization statistics saved for the backward pass.
pub(crate) struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes over the channel axis independently at each (n, y, x).
pub(crate) fn layer_norm_forward<T: Float>(
    x: &Tensor<T>,
    gamma: Option<&Tensor<T>>,
    beta: Option<&Tensor<T>>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormSaved<T>)> {
    let (n, c, h, w) = x.dims4()?;
    for p in [gamma, beta].into_iter().flatten() {
        if p.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let plane = h * w;
    let inv_c = T::one() / T::of(c as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = vec![T::zero(); n * plane];
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + p;
            let mean = (0..c).map(|ch| xd[at(ch)]).sum::<T>() * inv_c;
            let var = (0..c)
                .map(|ch| {
                    let d = xd[at(ch)] - mean;
                    d * d
                })
                .sum::<T>()
                * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd[b * plane + p] = r;
            for ch in 0..c {
                let xh = (xd[at(ch)] - mean) * r;
                xhat[at(ch)] = xh;
                let gm = gamma.map_or(T::one(), |g| g.data()[ch]);
                let bt = beta.map_or(T::zero(), |b| b.data()[ch]);
                out[at(ch)] = gm * xh + bt;
            }
        }
    }
    Ok((Tensor::new(x.shape(), out)?, LayerNormSaved { xhat, rstd }))
}

pub(crate) fn layer_norm_backward<T: Float>(
    shape: &[usize],
    saved: &LayerNormSaved<T>,
    gamma: Option<&Tensor<T>>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let gd = grad.data();
    let mut dx = vec![T::zero(); gd.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let inv_c = T::one() / T::of(c as f64);
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + p;
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for ch in 0..c {
                let gm = gamma.map_or(T::one(), |g| g.data()[ch]);
                let d = gd[at(ch)] * gm;
                sum_d += d;
                sum_dx += d * saved.xhat[at(ch)];
                dgamma[ch] += gd[at(ch)] * saved.xhat[at(ch)];
                dbeta[ch] += gd[at(ch)];
            }
            let r = saved.rstd[b * plane + p];
            for ch in 0..c {
                let gm = gamma.map_or(T::one(), |g| g.data()[ch]);
                let d = gd[at(ch)] * gm;
                dx[at(ch)] = r * (d - inv_c * sum_d - saved.xhat[at(ch)] * inv_c * sum_dx);
            }
        }
    }
    (
        Tensor::new(shape, dx).unwrap(),
        Tensor::new(&[c], dgamma).unwrap(),
        Tensor::new(&[c], dbeta).unwrap(),
    )
}

/// Softmax over all spatial positions of each (n, c) plane.
pub(crate) fn softmax_positions<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    let mut out = x.data().to_vec();
    for plane in out.chunks_mut(h * w) {
        let max = plane.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in plane.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        plane.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_positions_backward<T: Float>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let plane = y.shape()[2] * y.shape()[3];
    let mut dx = vec![T::zero(); y.numel()];
    for ((dst, yp), gp) in dx
        .chunks_mut(plane)
        .zip(y.data().chunks(plane))
        .zip(grad.data().chunks(plane))
    {
        let dot: T = yp.iter().zip(gp).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(yp).zip(gp) {
            *d = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape(), dx).unwrap()
}
