//! Raw forward/backward kernels on NCHW tensors.
//!
//! These functions know nothing about autodiff; [`crate::ops`] wires them
//! into the graph. Every reduction runs in a fixed order so results are
//! bit-reproducible.

use crate::error::{invalid, Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

/// Upper bound on im2col scratch elements per chunk.
const IM2COL_CHUNK: usize = 1 << 22;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn rows_per_chunk(&self) -> usize {
        (IM2COL_CHUNK / (self.patch() * self.wo).max(1)).clamp(1, self.ho)
    }
}

fn conv_geom<T: Float>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    let (b, c, h, wd) = x.dims4("conv2d")?;
    let (co, ci, kh, kw) = w.dims4("conv2d weight")?;
    if ci != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d channels",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if kh != kw {
        return Err(invalid("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    let ho = conv_out_size(h, kh, stride, pad)
        .ok_or_else(|| invalid("conv2d", format!("kernel {kh} too large for height {h}")))?;
    let wo = conv_out_size(wd, kw, stride, pad)
        .ok_or_else(|| invalid("conv2d", format!("kernel {kw} too large for width {wd}")))?;
    Ok((
        b,
        co,
        ConvGeom {
            c,
            h,
            w: wd,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        },
    ))
}

/// Valid output-column range `[lo, hi)` for kernel column `kx` with stride 1.
#[inline]
fn unit_stride_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).min(g.wo);
    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
    (lo, hi)
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, oy0: usize, rows: usize, cols: &mut [T]) {
    let n = rows * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for r in 0..rows {
                    let d = &mut dst[r * g.wo..(r + 1) * g.wo];
                    let iy = ((oy0 + r) * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = unit_stride_span(g, kx);
                        d[..lo].fill(T::zero());
                        let off = kx as isize - g.pad as isize;
                        d[lo..hi].copy_from_slice(
                            &src[(lo as isize + off) as usize..(hi as isize + off) as usize],
                        );
                        d[hi..].fill(T::zero());
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, oy0: usize, rows: usize, x: &mut [T]) {
    let n = rows * g.wo;
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let srcrow = &cols[row * n..(row + 1) * n];
                for r in 0..rows {
                    let s = &srcrow[r * g.wo..(r + 1) * g.wo];
                    let iy = ((oy0 + r) * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = unit_stride_span(g, kx);
                        let off = kx as isize - g.pad as isize;
                        let d = &mut dst[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (a, &b) in d.iter_mut().zip(&s[lo..hi]) {
                            *a += b;
                        }
                    } else {
                        for (ox, &v) in s.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding. `w` is `[C_out, C_in, k, k]`.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (b, co, g) = conv_geom(x, w, stride, pad)?;
    if let Some(bias) = bias {
        if bias.shape() != [co] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![co],
                rhs: bias.shape().to_vec(),
            });
        }
    }
    let in_sz = g.c * g.h * g.w;
    let out_hw = g.ho * g.wo;
    let kdim = g.patch();
    let mut out = vec![T::zero(); b * co * out_hw];
    let rows_chunk = g.rows_per_chunk();
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * rows_chunk * g.wo]
    };
    for bi in 0..b {
        let xb = &x.data()[bi * in_sz..(bi + 1) * in_sz];
        let ob = &mut out[bi * co * out_hw..(bi + 1) * co * out_hw];
        if g.pointwise() {
            unsafe {
                T::gemm(
                    co,
                    g.c,
                    out_hw,
                    T::one(),
                    w.data().as_ptr(),
                    g.c as isize,
                    1,
                    xb.as_ptr(),
                    out_hw as isize,
                    1,
                    T::zero(),
                    ob.as_mut_ptr(),
                    out_hw as isize,
                    1,
                );
            }
        } else {
            let mut oy0 = 0;
            while oy0 < g.ho {
                let rows = rows_chunk.min(g.ho - oy0);
                let n = rows * g.wo;
                im2col(xb, &g, oy0, rows, &mut cols[..kdim * n]);
                unsafe {
                    T::gemm(
                        co,
                        kdim,
                        n,
                        T::one(),
                        w.data().as_ptr(),
                        kdim as isize,
                        1,
                        cols.as_ptr(),
                        n as isize,
                        1,
                        T::zero(),
                        ob.as_mut_ptr().add(oy0 * g.wo),
                        out_hw as isize,
                        1,
                    );
                }
                oy0 += rows;
            }
        }
        if let Some(bias) = bias {
            for (o, &bv) in ob.chunks_exact_mut(out_hw).zip(bias.data()) {
                for v in o {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new([b, co, g.ho, g.wo], out)
}

pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] given the output gradient.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_weight: bool,
) -> Result<Conv2dGrads<T>> {
    let (b, co, g) = conv_geom(x, w, stride, pad)?;
    if grad_out.shape() != [b, co, g.ho, g.wo] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d backward",
            lhs: vec![b, co, g.ho, g.wo],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let in_sz = g.c * g.h * g.w;
    let out_hw = g.ho * g.wo;
    let kdim = g.patch();
    let mut dx = need_input.then(|| vec![T::zero(); b * in_sz]);
    let mut dw = need_weight.then(|| vec![T::zero(); co * kdim]);
    let mut db = vec![T::zero(); co];
    let rows_chunk = g.rows_per_chunk();
    let scratch = if g.pointwise() { 0 } else { kdim * rows_chunk * g.wo };
    let mut cols = vec![T::zero(); if need_weight { scratch } else { 0 }];
    let mut dcols = vec![T::zero(); if need_input { scratch } else { 0 }];

    for bi in 0..b {
        let xb = &x.data()[bi * in_sz..(bi + 1) * in_sz];
        let gb = &grad_out.data()[bi * co * out_hw..(bi + 1) * co * out_hw];
        for (d, row) in db.iter_mut().zip(gb.chunks_exact(out_hw)) {
            *d += row.iter().copied().sum::<T>();
        }
        if g.pointwise() {
            if let Some(dw) = dw.as_mut() {
                // dw[co, c] += g[co, p] * x[c, p]^T
                unsafe {
                    T::gemm(
                        co,
                        out_hw,
                        g.c,
                        T::one(),
                        gb.as_ptr(),
                        out_hw as isize,
                        1,
                        xb.as_ptr(),
                        1,
                        out_hw as isize,
                        T::one(),
                        dw.as_mut_ptr(),
                        g.c as isize,
                        1,
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[bi * in_sz..(bi + 1) * in_sz];
                unsafe {
                    T::gemm(
                        g.c,
                        co,
                        out_hw,
                        T::one(),
                        w.data().as_ptr(),
                        1,
                        g.c as isize,
                        gb.as_ptr(),
                        out_hw as isize,
                        1,
                        T::zero(),
                        dxb.as_mut_ptr(),
                        out_hw as isize,
                        1,
                    );
                }
            }
            continue;
        }
        let mut oy0 = 0;
        while oy0 < g.ho {
            let rows = rows_chunk.min(g.ho - oy0);
            let n = rows * g.wo;
            let gchunk = unsafe { gb.as_ptr().add(oy0 * g.wo) };
            if let Some(dw) = dw.as_mut() {
                im2col(xb, &g, oy0, rows, &mut cols[..kdim * n]);
                unsafe {
                    T::gemm(
                        co,
                        n,
                        kdim,
                        T::one(),
                        gchunk,
                        out_hw as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        n as isize,
                        T::one(),
                        dw.as_mut_ptr(),
                        kdim as isize,
                        1,
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                unsafe {
                    T::gemm(
                        kdim,
                        co,
                        n,
                        T::one(),
                        w.data().as_ptr(),
                        1,
                        kdim as isize,
                        gchunk,
                        out_hw as isize,
                        1,
                        T::zero(),
                        dcols.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                let dxb = &mut dx[bi * in_sz..(bi + 1) * in_sz];
                col2im(&dcols[..kdim * n], &g, oy0, rows, dxb);
            }
            oy0 += rows;
        }
    }
    Ok(Conv2dGrads {
        input: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        weight: dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
        bias: Tensor::new([co], db)?,
    })
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat index of the winning input element.
pub fn max_pool2<T: Float>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = x.dims4("max_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid("max_pool2", format!("spatial size {h}x{w} is not even")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(out.capacity());
    let xd = x.data();
    for p in 0..b * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    // strict comparison keeps the first maximum on ties
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([b, c, ho, wo], out)?, arg))
}

pub fn max_pool2_backward<T: Float>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    dx
}

/// Source taps for one output coordinate of a half-pixel bilinear resample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

/// Taps for upsampling an axis of length `n` by integer `scale`.
///
/// Output index `i` samples source coordinate `(i + 0.5) / scale - 0.5`,
/// clamped below at 0 (edge pixels replicate), i.e. `align_corners = false`.
pub fn bilinear_taps<T: Float>(n: usize, scale: usize) -> Vec<Tap<T>> {
    (0..n * scale)
        .map(|i| {
            let src = ((i as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap {
                lo,
                hi,
                frac: T::from_f64_lossy(frac),
            }
        })
        .collect()
}

/// `a + t (b - a)`, clamped to the endpoints so constants and bounds survive
/// rounding exactly.
#[inline]
fn lerp<T: Float>(a: T, b: T, t: T) -> T {
    let v = a + t * (b - a);
    v.max(a.min(b)).min(a.max(b))
}

/// Bilinear upsampling of the last two axes by an integer factor.
pub fn upsample_bilinear<T: Float>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    if scale == 0 {
        return Err(invalid("upsample_bilinear", "scale must be >= 1"));
    }
    let (b, c, h, w) = x.dims4("upsample_bilinear")?;
    if scale == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h * scale, w * scale);
    let ty = bilinear_taps::<T>(h, scale);
    let tx = bilinear_taps::<T>(w, scale);
    let mut out = vec![T::zero(); b * c * ho * wo];
    let mut tmp = vec![T::zero(); h * wo];
    for (p, op) in out.chunks_exact_mut(ho * wo).enumerate() {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (ox, t) in tx.iter().enumerate() {
                tmp[y * wo + ox] = lerp(row[t.lo], row[t.hi], t.frac);
            }
        }
        for (oy, t) in ty.iter().enumerate() {
            let (r0, r1) = (&tmp[t.lo * wo..(t.lo + 1) * wo], &tmp[t.hi * wo..(t.hi + 1) * wo]);
            for (ox, v) in op[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                *v = lerp(r0[ox], r1[ox], t.frac);
            }
        }
    }
    Tensor::new([b, c, ho, wo], out)
}

pub fn upsample_bilinear_backward<T: Float>(
    input_shape: &[usize],
    scale: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = match input_shape {
        &[b, c, h, w] => (b, c, h, w),
        _ => {
            return Err(TensorError::Rank {
                op: "upsample_bilinear backward",
                expected: 4,
                shape: input_shape.to_vec(),
            })
        }
    };
    if scale == 1 {
        return Ok(grad_out.clone());
    }
    let (ho, wo) = (h * scale, w * scale);
    let ty = bilinear_taps::<T>(h, scale);
    let tx = bilinear_taps::<T>(w, scale);
    let mut dx = vec![T::zero(); b * c * h * w];
    let mut tmp = vec![T::zero(); h * wo];
    for (p, dp) in dx.chunks_exact_mut(h * w).enumerate() {
        let gp = &grad_out.data()[p * ho * wo..(p + 1) * ho * wo];
        tmp.fill(T::zero());
        for (oy, t) in ty.iter().enumerate() {
            let g = &gp[oy * wo..(oy + 1) * wo];
            let w0 = T::one() - t.frac;
            for ox in 0..wo {
                tmp[t.lo * wo + ox] += w0 * g[ox];
                tmp[t.hi * wo + ox] += t.frac * g[ox];
            }
        }
        for y in 0..h {
            let trow = &tmp[y * wo..(y + 1) * wo];
            let drow = &mut dp[y * w..(y + 1) * w];
            for (ox, t) in tx.iter().enumerate() {
                drow[t.lo] += (T::one() - t.frac) * trow[ox];
                drow[t.hi] += t.frac * trow[ox];
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Replicate ("edge") padding of the last two axes.
pub fn pad_replicate<T: Float>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("pad_replicate")?;
    if pad == 0 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..ho {
            let row = &plane[oy.saturating_sub(pad).min(h - 1) * w..][..w];
            out.extend(std::iter::repeat_n(row[0], pad));
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(row[w - 1], pad));
        }
    }
    Tensor::new([b, c, ho, wo], out)
}

pub fn pad_replicate_backward<T: Float>(input_shape: &[usize], pad: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let wo = w + 2 * pad;
    let ho = h + 2 * pad;
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (dp, gp) in dx
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(grad_out.data().chunks_exact(ho * wo))
    {
        for oy in 0..ho {
            let y = oy.saturating_sub(pad).min(h - 1);
            for ox in 0..wo {
                let x = ox.saturating_sub(pad).min(w - 1);
                dp[y * w + x] += gp[oy * wo + ox];
            }
        }
    }
    dx
}

/// Window `[top, top+out_h) x [left, left+out_w)` of the last two axes.
pub fn crop2d<T: Float>(x: &Tensor<T>, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("crop2d")?;
    if top + out_h > h || left + out_w > w {
        return Err(invalid(
            "crop2d",
            format!("window {out_h}x{out_w} at ({top},{left}) exceeds {h}x{w}"),
        ));
    }
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for y in top..top + out_h {
            out.extend_from_slice(&plane[y * w + left..y * w + left + out_w]);
        }
    }
    Tensor::new([b, c, out_h, out_w], out)
}

pub fn crop2d_backward<T: Float>(input_shape: &[usize], top: usize, left: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (dp, gp) in dx
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(grad_out.data().chunks_exact(oh * ow))
    {
        for y in 0..oh {
            dp[(top + y) * w + left..(top + y) * w + left + ow].copy_from_slice(&gp[y * ow..(y + 1) * ow]);
        }
    }
    dx
}

/// Per-channel statistics over the batch and spatial axes (biased variance).
pub fn channel_moments<T: Float>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4("batch_norm")?;
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += x.data()[(bi * c + ci) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / n;
        let mut ss = 0.0;
        for bi in 0..b {
            ss += x.data()[(bi * c + ci) * hw..][..hw]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = ss / n;
    }
    Ok((mean, var))
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel.
pub fn channel_affine<T: Float>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4("batch_norm")?;
    let hw = h * w;
    let mut out = x.clone();
    for (p, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
        let ci = p % c;
        let (m, s, g, bt) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
        for v in plane {
            *v = g * ((*v - m) * s) + bt;
        }
    }
    Ok(out)
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward pass of batch normalization.
///
/// With `batch_stats`, `mean`/`inv_std` are the statistics of `x` itself and
/// the input gradient includes their dependence on `x`; otherwise they are
/// treated as constants (running statistics).
pub fn batch_norm_backward<T: Float>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    grad_out: &Tensor<T>,
    batch_stats: bool,
) -> Result<BatchNormGrads<T>> {
    let (b, c, h, w) = x.dims4("batch_norm backward")?;
    x.expect_same_shape(grad_out, "batch_norm backward")?;
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = Tensor::zeros(x.shape().to_vec());
    for ci in 0..c {
        let (m, s) = (mean[ci].as_f64(), inv_std[ci].as_f64());
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for bi in 0..b {
            let off = (bi * c + ci) * hw;
            for (xv, gv) in x.data()[off..off + hw].iter().zip(&grad_out.data()[off..off + hw]) {
                let g = gv.as_f64();
                sum_g += g;
                sum_gx += g * (xv.as_f64() - m) * s;
            }
        }
        dgamma[ci] = T::from_f64_lossy(sum_gx);
        dbeta[ci] = T::from_f64_lossy(sum_g);
        let gs = gamma[ci].as_f64() * s;
        for bi in 0..b {
            let off = (bi * c + ci) * hw;
            let xs = &x.data()[off..off + hw];
            let gs_in = &grad_out.data()[off..off + hw];
            let ds = &mut dx.data_mut()[off..off + hw];
            for ((d, xv), gv) in ds.iter_mut().zip(xs).zip(gs_in) {
                let g = gv.as_f64();
                let v = if batch_stats {
                    let xhat = (xv.as_f64() - m) * s;
                    gs * (g - sum_g / n - xhat * sum_gx / n)
                } else {
                    gs * g
                };
                *d = T::from_f64_lossy(v);
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: Tensor::new([c], dgamma)?,
        beta: Tensor::new([c], dbeta)?,
    })
}
