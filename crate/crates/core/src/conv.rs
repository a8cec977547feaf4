//! Dense, depthwise and pointwise convolutions over `(H, W, C)` or
//! `(N, H, W, C)` tensors, plus the raw gradient kernels the tape uses.
//!
//! Indexing follows the ML cross-correlation convention: output pixel
//! `(i, j)` reads input `(i·s + l − pad_top, j·s + m − pad_left)` for kernel
//! tap `(l, m)`. `Same` padding puts the kernel origin at `(⌊h/2⌋, ⌊w/2⌋)`.
//! Reductions accumulate in `f64` and round once on store.

use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, DepthwiseKernel, PointwiseKernel, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero-filled borders; output keeps `⌈H/s⌉ × ⌈W/s⌉`.
    #[default]
    Same,
    /// No padding; output is `((H−h)/s + 1) × ((W−w)/s + 1)`.
    Valid,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(Error::invalid(format!("unknown padding '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub padding: Padding,
    pub stride: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            padding: Padding::Same,
            stride: 1,
        }
    }
}

impl From<Padding> for ConvGeometry {
    fn from(padding: Padding) -> Self {
        ConvGeometry { padding, stride: 1 }
    }
}

/// Resolved sliding-window geometry for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pad_top: usize,
    pad_left: usize,
    stride: usize,
    batched: bool,
}

impl Window {
    pub fn resolve(x: &[usize], kh: usize, kw: usize, c: usize, geom: ConvGeometry) -> Result<Self> {
        let (n, h, w, xc, batched) = match *x {
            [h, w, xc] => (1, h, w, xc, false),
            [n, h, w, xc] => (n, h, w, xc, true),
            _ => {
                return Err(Error::shape(format!(
                    "convolution input must be (H, W, C) or (N, H, W, C), got {x:?}"
                )))
            }
        };
        if xc != c {
            return Err(Error::shape(format!(
                "channel mismatch: input has {xc}, kernel expects {c}"
            )));
        }
        if geom.stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        let s = geom.stride;
        let (oh, ow, pad_top, pad_left) = match geom.padding {
            Padding::Same => (h.div_ceil(s), w.div_ceil(s), kh / 2, kw / 2),
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape(format!(
                        "kernel {kh}x{kw} larger than unpadded input {h}x{w}"
                    )));
                }
                ((h - kh) / s + 1, (w - kw) / s + 1, 0, 0)
            }
        };
        Ok(Window {
            n,
            h,
            w,
            c,
            kh,
            kw,
            oh,
            ow,
            pad_top,
            pad_left,
            stride: s,
            batched,
        })
    }

    pub fn output_shape(&self, channels: usize) -> Vec<usize> {
        if self.batched {
            vec![self.n, self.oh, self.ow, channels]
        } else {
            vec![self.oh, self.ow, channels]
        }
    }

    /// Visits every in-bounds `(output pixel, tap, input pixel)` triple.
    /// Pixel indices are flat over `(n, row, col)`; the tap is `l·kw + m`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for n in 0..self.n {
            for oi in 0..self.oh {
                for oj in 0..self.ow {
                    let out_pix = (n * self.oh + oi) * self.ow + oj;
                    for l in 0..self.kh {
                        let Some(ii) = (oi * self.stride + l).checked_sub(self.pad_top) else {
                            continue;
                        };
                        if ii >= self.h {
                            continue;
                        }
                        for m in 0..self.kw {
                            let Some(jj) = (oj * self.stride + m).checked_sub(self.pad_left)
                            else {
                                continue;
                            };
                            if jj >= self.w {
                                continue;
                            }
                            let in_pix = (n * self.h + ii) * self.w + jj;
                            f(out_pix, l * self.kw + m, in_pix);
                        }
                    }
                }
            }
        }
    }

    /// Like [`for_each_tap`](Self::for_each_tap) but groups consecutive
    /// output columns into runs `(first out pixel, tap, first in pixel, len)`.
    /// With stride 1 both pixel ranges of a run are contiguous; with larger
    /// strides every run has length 1.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        if self.stride != 1 {
            self.for_each_tap(|op, tap, ip| f(op, tap, ip, 1));
            return;
        }
        for n in 0..self.n {
            for oi in 0..self.oh {
                for l in 0..self.kh {
                    let Some(ii) = (oi + l).checked_sub(self.pad_top) else {
                        continue;
                    };
                    if ii >= self.h {
                        continue;
                    }
                    for m in 0..self.kw {
                        // Columns oj with 0 <= oj + m - pad_left < w.
                        let lo = self.pad_left.saturating_sub(m);
                        let hi = (self.w + self.pad_left - m).min(self.ow);
                        if lo >= hi {
                            continue;
                        }
                        let out_pix = (n * self.oh + oi) * self.ow + lo;
                        let in_pix = (n * self.h + ii) * self.w + lo + m - self.pad_left;
                        f(out_pix, l * self.kw + m, in_pix, hi - lo);
                    }
                }
            }
        }
    }

    fn out_pixels(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

// ---------------------------------------------------------------------------
// Public forward ops

pub fn conv2d(x: &Tensor, k: &ConvKernel, padding: Padding) -> Result<Tensor> {
    conv2d_with(x, k, padding.into())
}

pub fn conv2d_with(x: &Tensor, k: &ConvKernel, geom: ConvGeometry) -> Result<Tensor> {
    conv2d_raw(x, k.weights(), k.bias(), geom)
}

pub(crate) fn conv2d_raw(
    x: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let &[kh, kw, c, t] = weights.shape() else {
        return Err(Error::shape(format!(
            "conv kernel must be (h, w, C, T), got {:?}",
            weights.shape()
        )));
    };
    if let Some(b) = bias {
        if b.shape() != [t] {
            return Err(Error::shape(format!("conv bias must be ({t}), got {:?}", b.shape())));
        }
    }
    let win = Window::resolve(x.shape(), kh, kw, c, geom)?;
    let xs = x.data();
    let ks = weights.data();
    let mut acc = vec![0f64; win.out_pixels() * t];
    win.for_each_tap(|op, tap, ip| {
        let xrow = &xs[ip * c..(ip + 1) * c];
        let kblock = &ks[tap * c * t..(tap + 1) * c * t];
        let out = &mut acc[op * t..(op + 1) * t];
        for (ci, &xv) in xrow.iter().enumerate() {
            let xv = xv as f64;
            for (o, &kv) in out.iter_mut().zip(&kblock[ci * t..(ci + 1) * t]) {
                *o += xv * kv as f64;
            }
        }
    });
    let data = match bias {
        Some(b) => acc
            .chunks_exact(t)
            .flat_map(|px| px.iter().zip(b.data()).map(|(&a, &bv)| (a + bv as f64) as f32))
            .collect(),
        None => acc.into_iter().map(|a| a as f32).collect(),
    };
    Ok(Tensor::from_parts(win.output_shape(t), data))
}

pub fn depthwise_conv2d(x: &Tensor, k: &DepthwiseKernel, padding: Padding) -> Result<Tensor> {
    depthwise_conv2d_with(x, k, padding.into())
}

pub fn depthwise_conv2d_with(x: &Tensor, k: &DepthwiseKernel, geom: ConvGeometry) -> Result<Tensor> {
    depthwise_raw(x, k.weights(), geom)
}

pub(crate) fn depthwise_raw(x: &Tensor, weights: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let &[kh, kw, g] = weights.shape() else {
        return Err(Error::shape(format!(
            "depthwise kernel must be (h, w, G), got {:?}",
            weights.shape()
        )));
    };
    let win = Window::resolve(x.shape(), kh, kw, g, geom)?;
    let xs = x.data();
    let ks = weights.data();
    let mut acc = vec![0f64; win.out_pixels() * g];
    win.for_each_run(|op, tap, ip, len| {
        let krow = &ks[tap * g..(tap + 1) * g];
        let out = &mut acc[op * g..(op + len) * g];
        for (orow, xrow) in out.chunks_exact_mut(g).zip(xs[ip * g..(ip + len) * g].chunks_exact(g)) {
            for ((o, &xv), &kv) in orow.iter_mut().zip(xrow).zip(krow) {
                *o += xv as f64 * kv as f64;
            }
        }
    });
    Ok(Tensor::from_parts(
        win.output_shape(g),
        acc.into_iter().map(|a| a as f32).collect(),
    ))
}

pub fn pointwise_conv2d(x: &Tensor, k: &PointwiseKernel) -> Result<Tensor> {
    pointwise_raw(x, k.weights())
}

pub(crate) fn pointwise_raw(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let &[c, t] = weights.shape() else {
        return Err(Error::shape(format!(
            "pointwise kernel must be (C, T), got {:?}",
            weights.shape()
        )));
    };
    let win = Window::resolve(x.shape(), 1, 1, c, ConvGeometry::default())?;
    let xs = x.data();
    let ks = weights.data();
    let mut out = Vec::with_capacity(win.out_pixels() * t);
    let mut acc = vec![0f64; t];
    for xrow in xs.chunks_exact(c) {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (ci, &xv) in xrow.iter().enumerate() {
            let xv = xv as f64;
            for (o, &kv) in acc.iter_mut().zip(&ks[ci * t..(ci + 1) * t]) {
                *o += xv * kv as f64;
            }
        }
        out.extend(acc.iter().map(|&a| a as f32));
    }
    Ok(Tensor::from_parts(win.output_shape(t), out))
}

/// 1D convolution over `(W, C)` or `(N, W, C)` with a `(1, w, C, T)` kernel.
pub fn conv1d(x: &Tensor, k: &ConvKernel, padding: Padding) -> Result<Tensor> {
    if k.h() != 1 {
        return Err(Error::shape(format!("conv1d needs kernel height 1, got {}", k.h())));
    }
    let (lifted, out_rank) = lift_1d(x)?;
    let y = conv2d(&lifted, k, padding)?;
    drop_1d(y, out_rank)
}

/// 1D depthwise convolution with a `(1, w, G)` kernel.
pub fn depthwise_conv1d(x: &Tensor, k: &DepthwiseKernel, padding: Padding) -> Result<Tensor> {
    if k.h() != 1 {
        return Err(Error::shape(format!(
            "depthwise_conv1d needs kernel height 1, got {}",
            k.h()
        )));
    }
    let (lifted, out_rank) = lift_1d(x)?;
    let y = depthwise_conv2d(&lifted, k, padding)?;
    drop_1d(y, out_rank)
}

/// 1D pointwise convolution.
pub fn pointwise_conv1d(x: &Tensor, k: &PointwiseKernel) -> Result<Tensor> {
    let (lifted, out_rank) = lift_1d(x)?;
    drop_1d(pointwise_conv2d(&lifted, k)?, out_rank)
}

fn lift_1d(x: &Tensor) -> Result<(Tensor, usize)> {
    match *x.shape() {
        [w, c] => Ok((x.reshape(&[1, w, c])?, 2)),
        [n, w, c] => Ok((x.reshape(&[n, 1, w, c])?, 3)),
        _ => Err(Error::shape(format!(
            "1D input must be (W, C) or (N, W, C), got {:?}",
            x.shape()
        ))),
    }
}

fn drop_1d(y: Tensor, rank: usize) -> Result<Tensor> {
    let s = y.shape().to_vec();
    if rank == 2 {
        y.reshape(&[s[1], s[2]])
    } else {
        y.reshape(&[s[0], s[2], s[3]])
    }
}

// ---------------------------------------------------------------------------
// Gradient kernels. `dy` has the forward output's layout.

pub(crate) fn conv2d_grad_input(dy: &[f32], weights: &Tensor, win: &Window) -> Vec<f32> {
    let c = win.c;
    let t = weights.shape()[3];
    let kt = transpose_blocks(weights.data(), c, t);
    let mut dx = vec![0f64; win.n * win.h * win.w * c];
    win.for_each_tap(|op, tap, ip| {
        let g = &dy[op * t..(op + 1) * t];
        let block = &kt[tap * c * t..(tap + 1) * c * t];
        let d = &mut dx[ip * c..(ip + 1) * c];
        for (ti, &gv) in g.iter().enumerate() {
            let gv = gv as f64;
            for (o, &kv) in d.iter_mut().zip(&block[ti * c..(ti + 1) * c]) {
                *o += gv * kv as f64;
            }
        }
    });
    dx.into_iter().map(|v| v as f32).collect()
}

/// Transposes each consecutive `(c, t)` block to `(t, c)` so input gradients
/// can be accumulated as contiguous axpy updates.
fn transpose_blocks(k: &[f32], c: usize, t: usize) -> Vec<f32> {
    let mut out = vec![0f32; k.len()];
    for (src, dst) in k.chunks_exact(c * t).zip(out.chunks_exact_mut(c * t)) {
        for ci in 0..c {
            for ti in 0..t {
                dst[ti * c + ci] = src[ci * t + ti];
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_kernel(dy: &[f32], x: &[f32], win: &Window, t: usize) -> Vec<f32> {
    let c = win.c;
    let mut dk = vec![0f64; win.kh * win.kw * c * t];
    win.for_each_tap(|op, tap, ip| {
        let g = &dy[op * t..(op + 1) * t];
        let block = &mut dk[tap * c * t..(tap + 1) * c * t];
        for (ci, &xv) in x[ip * c..(ip + 1) * c].iter().enumerate() {
            let xv = xv as f64;
            for (d, &gv) in block[ci * t..(ci + 1) * t].iter_mut().zip(g) {
                *d += xv * gv as f64;
            }
        }
    });
    dk.into_iter().map(|v| v as f32).collect()
}

pub(crate) fn depthwise_grad_input(dy: &[f32], weights: &Tensor, win: &Window) -> Vec<f32> {
    let g = win.c;
    let ks = weights.data();
    let mut dx = vec![0f64; win.n * win.h * win.w * g];
    win.for_each_run(|op, tap, ip, len| {
        let krow = &ks[tap * g..(tap + 1) * g];
        let grads = dy[op * g..(op + len) * g].chunks_exact(g);
        for (drow, grow) in dx[ip * g..(ip + len) * g].chunks_exact_mut(g).zip(grads) {
            for ((d, &kv), &gv) in drow.iter_mut().zip(krow).zip(grow) {
                *d += kv as f64 * gv as f64;
            }
        }
    });
    dx.into_iter().map(|v| v as f32).collect()
}

pub(crate) fn depthwise_grad_kernel(dy: &[f32], x: &[f32], win: &Window) -> Vec<f32> {
    let g = win.c;
    let mut dk = vec![0f64; win.kh * win.kw * g];
    win.for_each_run(|op, tap, ip, len| {
        let krow = &mut dk[tap * g..(tap + 1) * g];
        let grads = dy[op * g..(op + len) * g].chunks_exact(g);
        for (xrow, grow) in x[ip * g..(ip + len) * g].chunks_exact(g).zip(grads) {
            for ((d, &xv), &gv) in krow.iter_mut().zip(xrow).zip(grow) {
                *d += xv as f64 * gv as f64;
            }
        }
    });
    dk.into_iter().map(|v| v as f32).collect()
}

pub(crate) fn pointwise_grad_input(dy: &[f32], weights: &Tensor) -> Vec<f32> {
    let (c, t) = (weights.shape()[0], weights.shape()[1]);
    let kt = transpose_blocks(weights.data(), c, t);
    let mut dx = vec![0f64; dy.len() / t * c];
    for (g, d) in dy.chunks_exact(t).zip(dx.chunks_exact_mut(c)) {
        for (ti, &gv) in g.iter().enumerate() {
            let gv = gv as f64;
            for (o, &kv) in d.iter_mut().zip(&kt[ti * c..(ti + 1) * c]) {
                *o += gv * kv as f64;
            }
        }
    }
    dx.into_iter().map(|v| v as f32).collect()
}

pub(crate) fn pointwise_grad_kernel(dy: &[f32], x: &[f32], c: usize, t: usize) -> Vec<f32> {
    let mut dk = vec![0f64; c * t];
    for (xrow, g) in x.chunks_exact(c).zip(dy.chunks_exact(t)) {
        for (ci, &xv) in xrow.iter().enumerate() {
            let xv = xv as f64;
            for (d, &gv) in dk[ci * t..(ci + 1) * t].iter_mut().zip(g) {
                *d += xv * gv as f64;
            }
        }
    }
    dk.into_iter().map(|v| v as f32).collect()
}
