//! Raw array kernels behind the differentiable ops.
//!
//! Every kernel is given in a `*_seq` form, and, with the `parallel` feature,
//! a `*_par` form that splits work across rayon. Parallel variants only ever
//! split over slots whose values are computed independently, with the same
//! per-slot accumulation order as the sequential code, so the two paths
//! produce bit-identical results. Dispatch helpers pick the parallel path for
//! large inputs and fall back to sequential below a work threshold.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work (in multiply-adds) below which dispatch stays sequential.
const PAR_MIN_WORK: usize = 32 * 1024;

/// Kernel layout accepted by [`conv2d_fwd`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ConvMode {
    /// Kernel (out, in, 1, 1): per-pixel channel mix.
    Pointwise1x1,
    /// Kernel (c, 1, 3, 3): one 3x3 filter per channel.
    Depthwise3x3,
    /// Kernel (out, in, 3, 3): dense 3x3 convolution.
    Full3x3,
}

/// Resolved convolution geometry shared by the forward and backward kernels.
pub struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

pub fn conv_dims(
    input: Shape,
    kernel: Shape,
    mode: ConvMode,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if stride == 0 {
        return Err(Error::contract("conv2d stride must be positive"));
    }
    let mismatch = |ctx: &'static str| Error::ShapeMismatch {
        context: ctx,
        lhs: kernel.to_string(),
        rhs: input.to_string(),
    };
    let (co, kh, kw, depthwise) = match mode {
        ConvMode::Pointwise1x1 => {
            if kernel.c != input.c || kernel.h != 1 || kernel.w != 1 {
                return Err(mismatch("conv2d pointwise_1x1 kernel vs input"));
            }
            (kernel.n, 1, 1, false)
        }
        ConvMode::Depthwise3x3 => {
            if kernel.n != input.c || kernel.c != 1 || kernel.h != 3 || kernel.w != 3 {
                return Err(mismatch("conv2d depthwise_3x3 kernel vs input"));
            }
            (input.c, 3, 3, true)
        }
        ConvMode::Full3x3 => {
            if kernel.c != input.c || kernel.h != 3 || kernel.w != 3 {
                return Err(mismatch("conv2d full_3x3 kernel vs input"));
            }
            (kernel.n, 3, 3, false)
        }
    };
    if input.h + 2 * padding < kh || input.w + 2 * padding < kw {
        return Err(Error::contract(format!(
            "conv2d input {} too small for {}x{} kernel with padding {}",
            input, kh, kw, padding
        )));
    }
    let ho = (input.h + 2 * padding - kh) / stride + 1;
    let wo = (input.w + 2 * padding - kw) / stride + 1;
    Ok(ConvDims {
        n: input.n,
        ci: input.c,
        co,
        h: input.h,
        w: input.w,
        kh,
        kw,
        ho,
        wo,
        stride,
        padding,
        depthwise,
    })
}

/// Valid output-column range for a given kernel column, so that every input
/// column `ow * stride + kw - padding` stays inside `[0, w)`.
#[inline]
fn ow_range(wo: usize, w: usize, stride: usize, padding: usize, kw: usize) -> (usize, usize) {
    let lo = if kw >= padding {
        0
    } else {
        (padding - kw).div_ceil(stride)
    };
    let max_iw = w as isize - 1;
    let hi = ((max_iw + padding as isize - kw as isize) / stride as isize + 1).clamp(0, wo as isize);
    (lo.min(wo), hi as usize)
}

fn conv_fwd_slab(
    x: &[f32],
    k: &[f32],
    bias: Option<&[f32]>,
    d: &ConvDims,
    n: usize,
    co: usize,
    out_plane: &mut [f32],
) {
    let b = bias.map_or(0.0, |b| b[co]);
    out_plane.iter_mut().for_each(|v| *v = b);
    let (ci_lo, ci_hi, k_co) = if d.depthwise { (co, co + 1, co) } else { (0, d.ci, co) };
    for ci in ci_lo..ci_hi {
        let k_ci = if d.depthwise { 0 } else { ci };
        let in_plane = &x[(n * d.ci + ci) * d.h * d.w..][..d.h * d.w];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let wgt = k[((k_co * if d.depthwise { 1 } else { d.ci } + k_ci) * d.kh + kh) * d.kw + kw];
                let (ow_lo, ow_hi) = ow_range(d.wo, d.w, d.stride, d.padding, kw);
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in 0..d.ho {
                    let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let in_row = &in_plane[ih as usize * d.w..][..d.w];
                    let out_row = &mut out_plane[oh * d.wo..][..d.wo];
                    if d.stride == 1 {
                        let iw0 = (ow_lo + kw) as isize - d.padding as isize;
                        let src = &in_row[iw0 as usize..][..ow_hi - ow_lo];
                        let dst = &mut out_row[ow_lo..ow_hi];
                        for (o, i) in dst.iter_mut().zip(src) {
                            *o += wgt * i;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                            out_row[ow] += wgt * in_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Sequential convolution forward.
pub fn conv2d_fwd_seq(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, d: &ConvDims) -> Tensor {
    let mut out = Tensor::zeros(Shape::new(d.n, d.co, d.ho, d.wo));
    let plane = d.ho * d.wo;
    let (xd, kd, bd) = (x.data(), k.data(), bias.map(|b| b.data()));
    for (i, slab) in out.data_mut().chunks_mut(plane).enumerate() {
        conv_fwd_slab(xd, kd, bd, d, i / d.co, i % d.co, slab);
    }
    out
}

/// Rayon convolution forward; one task per (batch, out-channel) plane.
#[cfg(feature = "parallel")]
pub fn conv2d_fwd_par(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, d: &ConvDims) -> Tensor {
    let mut out = Tensor::zeros(Shape::new(d.n, d.co, d.ho, d.wo));
    let plane = d.ho * d.wo;
    let (xd, kd, bd) = (x.data(), k.data(), bias.map(|b| b.data()));
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(i, slab)| conv_fwd_slab(xd, kd, bd, d, i / d.co, i % d.co, slab));
    out
}

pub(crate) fn conv2d_fwd(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, d: &ConvDims) -> Tensor {
    let inner = if d.depthwise { d.kh * d.kw } else { d.ci * d.kh * d.kw };
    let work = d.n * d.co * d.ho * d.wo * inner;
    #[cfg(feature = "parallel")]
    if d.n * d.co > 1 && work >= PAR_MIN_WORK {
        return conv2d_fwd_par(x, k, bias, d);
    }
    let _ = work;
    conv2d_fwd_seq(x, k, bias, d)
}

fn conv_grad_input_slab(
    gout: &[f32],
    k: &[f32],
    d: &ConvDims,
    n: usize,
    ci: usize,
    gx_plane: &mut [f32],
) {
    let (co_lo, co_hi) = if d.depthwise { (ci, ci + 1) } else { (0, d.co) };
    for co in co_lo..co_hi {
        let k_ci = if d.depthwise { 0 } else { ci };
        let k_cs = if d.depthwise { 1 } else { d.ci };
        let g_plane = &gout[(n * d.co + co) * d.ho * d.wo..][..d.ho * d.wo];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let wgt = k[((co * k_cs + k_ci) * d.kh + kh) * d.kw + kw];
                let (ow_lo, ow_hi) = ow_range(d.wo, d.w, d.stride, d.padding, kw);
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in 0..d.ho {
                    let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let g_row = &g_plane[oh * d.wo..][..d.wo];
                    let gx_row = &mut gx_plane[ih as usize * d.w..][..d.w];
                    if d.stride == 1 {
                        let iw0 = (ow_lo + kw) as isize - d.padding as isize;
                        let dst = &mut gx_row[iw0 as usize..][..ow_hi - ow_lo];
                        for (gx, g) in dst.iter_mut().zip(&g_row[ow_lo..ow_hi]) {
                            *gx += wgt * g;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                            gx_row[iw as usize] += wgt * g_row[ow];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_grad_input_seq(gout: &Tensor, k: &Tensor, d: &ConvDims) -> Tensor {
    let mut gx = Tensor::zeros(Shape::new(d.n, d.ci, d.h, d.w));
    let plane = d.h * d.w;
    let (gd, kd) = (gout.data(), k.data());
    for (i, slab) in gx.data_mut().chunks_mut(plane).enumerate() {
        conv_grad_input_slab(gd, kd, d, i / d.ci, i % d.ci, slab);
    }
    gx
}

#[cfg(feature = "parallel")]
pub fn conv2d_grad_input_par(gout: &Tensor, k: &Tensor, d: &ConvDims) -> Tensor {
    let mut gx = Tensor::zeros(Shape::new(d.n, d.ci, d.h, d.w));
    let plane = d.h * d.w;
    let (gd, kd) = (gout.data(), k.data());
    gx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(i, slab)| conv_grad_input_slab(gd, kd, d, i / d.ci, i % d.ci, slab));
    gx
}

pub(crate) fn conv2d_grad_input(gout: &Tensor, k: &Tensor, d: &ConvDims) -> Tensor {
    let inner = if d.depthwise { d.kh * d.kw } else { d.co * d.kh * d.kw };
    let work = d.n * d.ci * d.h * d.w * inner;
    #[cfg(feature = "parallel")]
    if d.n * d.ci > 1 && work >= PAR_MIN_WORK {
        return conv2d_grad_input_par(gout, k, d);
    }
    let _ = work;
    conv2d_grad_input_seq(gout, k, d)
}

fn conv_grad_kernel_chunk(
    x: &[f32],
    gout: &[f32],
    d: &ConvDims,
    co: usize,
    gk_chunk: &mut [f32],
) {
    let (ci_lo, ci_hi) = if d.depthwise { (co, co + 1) } else { (0, d.ci) };
    for ci in ci_lo..ci_hi {
        let k_ci = if d.depthwise { 0 } else { ci };
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let (ow_lo, ow_hi) = ow_range(d.wo, d.w, d.stride, d.padding, kw);
                let mut acc = 0.0f32;
                if ow_lo < ow_hi {
                    for n in 0..d.n {
                        let g_plane = &gout[(n * d.co + co) * d.ho * d.wo..][..d.ho * d.wo];
                        let in_plane = &x[(n * d.ci + ci) * d.h * d.w..][..d.h * d.w];
                        for oh in 0..d.ho {
                            let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            let g_row = &g_plane[oh * d.wo..][..d.wo];
                            let in_row = &in_plane[ih as usize * d.w..][..d.w];
                            if d.stride == 1 {
                                let iw0 = (ow_lo + kw) as isize - d.padding as isize;
                                for (g, i) in g_row[ow_lo..ow_hi]
                                    .iter()
                                    .zip(&in_row[iw0 as usize..][..ow_hi - ow_lo])
                                {
                                    acc += g * i;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw =
                                        (ow * d.stride + kw) as isize - d.padding as isize;
                                    acc += g_row[ow] * in_row[iw as usize];
                                }
                            }
                        }
                    }
                }
                gk_chunk[(k_ci * d.kh + kh) * d.kw + kw] = acc;
            }
        }
    }
}

pub fn conv2d_grad_kernel_seq(x: &Tensor, gout: &Tensor, k_shape: Shape, d: &ConvDims) -> Tensor {
    let mut gk = Tensor::zeros(k_shape);
    let chunk = k_shape.c * k_shape.h * k_shape.w;
    let (xd, gd) = (x.data(), gout.data());
    for (co, slab) in gk.data_mut().chunks_mut(chunk).enumerate() {
        conv_grad_kernel_chunk(xd, gd, d, co, slab);
    }
    gk
}

#[cfg(feature = "parallel")]
pub fn conv2d_grad_kernel_par(x: &Tensor, gout: &Tensor, k_shape: Shape, d: &ConvDims) -> Tensor {
    let mut gk = Tensor::zeros(k_shape);
    let chunk = k_shape.c * k_shape.h * k_shape.w;
    let (xd, gd) = (x.data(), gout.data());
    gk.data_mut()
        .par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(co, slab)| conv_grad_kernel_chunk(xd, gd, d, co, slab));
    gk
}

pub(crate) fn conv2d_grad_kernel(x: &Tensor, gout: &Tensor, k_shape: Shape, d: &ConvDims) -> Tensor {
    let work = k_shape.numel() * d.n * d.ho * d.wo;
    #[cfg(feature = "parallel")]
    if k_shape.n > 1 && work >= PAR_MIN_WORK {
        return conv2d_grad_kernel_par(x, gout, k_shape, d);
    }
    let _ = work;
    conv2d_grad_kernel_seq(x, gout, k_shape, d)
}

pub(crate) fn conv2d_grad_bias(gout: &Tensor, co: usize) -> Tensor {
    let s = gout.shape();
    let mut gb = Tensor::zeros(Shape::new(1, co, 1, 1));
    let plane = s.h * s.w;
    for n in 0..s.n {
        for c in 0..co {
            let g_plane = &gout.data()[(n * co + c) * plane..][..plane];
            let mut acc = 0.0f32;
            for g in g_plane {
                acc += g;
            }
            gb.data_mut()[c] += acc;
        }
    }
    gb
}

// ---------------------------------------------------------------------------
// Channel layer norm
// ---------------------------------------------------------------------------

fn layer_norm_slab(x: &[f32], gain: &[f32], shift: &[f32], eps: f32, c: usize, plane: usize, out: &mut [f32]) {
    // One batch item: channel stats per spatial location.
    for p in 0..plane {
        let mut mean = 0.0f32;
        for ch in 0..c {
            mean += x[ch * plane + p];
        }
        mean /= c as f32;
        let mut var = 0.0f32;
        for ch in 0..c {
            let dv = x[ch * plane + p] - mean;
            var += dv * dv;
        }
        var /= c as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for ch in 0..c {
            out[ch * plane + p] = gain[ch] * ((x[ch * plane + p] - mean) * inv) + shift[ch];
        }
    }
}

pub fn layer_norm_fwd_seq(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f32) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    let slab = s.c * s.plane();
    for (n, o) in out.data_mut().chunks_mut(slab).enumerate() {
        layer_norm_slab(&x.data()[n * slab..][..slab], gain.data(), shift.data(), eps, s.c, s.plane(), o);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn layer_norm_fwd_par(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f32) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    let slab = s.c * s.plane();
    let (xd, gd, sd) = (x.data(), gain.data(), shift.data());
    out.data_mut()
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(n, o)| layer_norm_slab(&xd[n * slab..][..slab], gd, sd, eps, s.c, s.plane(), o));
    out
}

pub(crate) fn layer_norm_fwd(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f32) -> Tensor {
    #[cfg(feature = "parallel")]
    if x.shape().n > 1 && x.numel() >= PAR_MIN_WORK {
        return layer_norm_fwd_par(x, gain, shift, eps);
    }
    layer_norm_fwd_seq(x, gain, shift, eps)
}

/// Returns (grad_input, grad_gain, grad_shift).
pub(crate) fn layer_norm_bwd(
    x: &Tensor,
    gain: &Tensor,
    gout: &Tensor,
    eps: f32,
) -> (Tensor, Tensor, Tensor) {
    let s = x.shape();
    let (c, plane) = (s.c, s.plane());
    let mut gx = Tensor::zeros(s);
    let mut ggain = Tensor::zeros(gain.shape());
    let mut gshift = Tensor::zeros(gain.shape());
    for n in 0..s.n {
        let base = n * c * plane;
        let xs = &x.data()[base..][..c * plane];
        let gs = &gout.data()[base..][..c * plane];
        let gxs = &mut gx.data_mut()[base..][..c * plane];
        for p in 0..plane {
            let mut mean = 0.0f32;
            for ch in 0..c {
                mean += xs[ch * plane + p];
            }
            mean /= c as f32;
            let mut var = 0.0f32;
            for ch in 0..c {
                let dv = xs[ch * plane + p] - mean;
                var += dv * dv;
            }
            var /= c as f32;
            let inv = 1.0 / (var + eps).sqrt();
            // y = (x - mean) * inv; gy = gout * gain
            let mut mean_gy = 0.0f32;
            let mut mean_gy_y = 0.0f32;
            for ch in 0..c {
                let y = (xs[ch * plane + p] - mean) * inv;
                let gy = gs[ch * plane + p] * gain.data()[ch];
                mean_gy += gy;
                mean_gy_y += gy * y;
            }
            mean_gy /= c as f32;
            mean_gy_y /= c as f32;
            for ch in 0..c {
                let y = (xs[ch * plane + p] - mean) * inv;
                let gy = gs[ch * plane + p] * gain.data()[ch];
                gxs[ch * plane + p] = (gy - mean_gy - y * mean_gy_y) * inv;
                ggain.data_mut()[ch] += gs[ch * plane + p] * y;
                gshift.data_mut()[ch] += gs[ch * plane + p];
            }
        }
    }
    (gx, ggain, gshift)
}

// ---------------------------------------------------------------------------
// Softmax over the last axis
// ---------------------------------------------------------------------------

fn softmax_row(x: &[f32], out: &mut [f32]) {
    let max = x.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
    let mut sum = 0.0f32;
    for (o, v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

pub fn softmax_last_seq(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for (o, row) in out.data_mut().chunks_mut(s.w).zip(x.data().chunks(s.w)) {
        softmax_row(row, o);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn softmax_last_par(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    out.data_mut()
        .par_chunks_mut(s.w)
        .zip(x.data().par_chunks(s.w))
        .for_each(|(o, row)| softmax_row(row, o));
    out
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    #[cfg(feature = "parallel")]
    if x.numel() >= PAR_MIN_WORK && x.numel() > x.shape().w {
        return softmax_last_par(x);
    }
    softmax_last_seq(x)
}

/// Softmax backward given the forward output `y`.
pub(crate) fn softmax_last_bwd(y: &Tensor, gout: &Tensor) -> Tensor {
    let s = y.shape();
    let mut gx = Tensor::zeros(s);
    for ((gx_row, y_row), g_row) in gx
        .data_mut()
        .chunks_mut(s.w)
        .zip(y.data().chunks(s.w))
        .zip(gout.data().chunks(s.w))
    {
        let mut dot = 0.0f32;
        for (y, g) in y_row.iter().zip(g_row) {
            dot += y * g;
        }
        for ((gx, y), g) in gx_row.iter_mut().zip(y_row).zip(g_row) {
            *gx = y * (g - dot);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Spatial L2 normalization (per batch-channel plane)
// ---------------------------------------------------------------------------

pub(crate) const L2_EPS: f32 = 1e-12;

pub(crate) fn l2norm_spatial_fwd(x: &Tensor) -> Tensor {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    for (o, xs) in out.data_mut().chunks_mut(plane).zip(x.data().chunks(plane)) {
        let mut sq = 0.0f32;
        for v in xs {
            sq += v * v;
        }
        let inv = 1.0 / (sq + L2_EPS).sqrt();
        for (o, v) in o.iter_mut().zip(xs) {
            *o = v * inv;
        }
    }
    out
}

pub(crate) fn l2norm_spatial_bwd(x: &Tensor, gout: &Tensor) -> Tensor {
    let s = x.shape();
    let plane = s.plane();
    let mut gx = Tensor::zeros(s);
    for ((gxs, xs), gs) in gx
        .data_mut()
        .chunks_mut(plane)
        .zip(x.data().chunks(plane))
        .zip(gout.data().chunks(plane))
    {
        let mut sq = 0.0f32;
        for v in xs {
            sq += v * v;
        }
        let nrm = (sq + L2_EPS).sqrt();
        let inv = 1.0 / nrm;
        let mut dot = 0.0f32;
        for (g, v) in gs.iter().zip(xs) {
            dot += g * (v * inv);
        }
        for ((gx, g), v) in gxs.iter_mut().zip(gs).zip(xs) {
            *gx = (g - (v * inv) * dot) * inv;
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Channel attention products
// ---------------------------------------------------------------------------

fn gram_row(a: &[f32], b: &[f32], c: usize, plane: usize, i: usize, out_row: &mut [f32]) {
    let ai = &a[i * plane..][..plane];
    for j in 0..c {
        let bj = &b[j * plane..][..plane];
        let mut acc = 0.0f32;
        for (x, y) in ai.iter().zip(bj) {
            acc += x * y;
        }
        out_row[j] = acc;
    }
}

/// `out[n, 0, i, j] = <a[n, i, :, :], b[n, j, :, :]>`: the CxC cross-channel
/// correlation of two feature maps.
pub fn gram_seq(a: &Tensor, b: &Tensor) -> Tensor {
    let s = a.shape();
    let (c, plane) = (s.c, s.plane());
    let mut out = Tensor::zeros(Shape::new(s.n, 1, c, c));
    for (idx, row) in out.data_mut().chunks_mut(c).enumerate() {
        let (n, i) = (idx / c, idx % c);
        gram_row(&a.data()[n * c * plane..][..c * plane], &b.data()[n * c * plane..][..c * plane], c, plane, i, row);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn gram_par(a: &Tensor, b: &Tensor) -> Tensor {
    let s = a.shape();
    let (c, plane) = (s.c, s.plane());
    let mut out = Tensor::zeros(Shape::new(s.n, 1, c, c));
    let (ad, bd) = (a.data(), b.data());
    out.data_mut().par_chunks_mut(c).enumerate().for_each(|(idx, row)| {
        let (n, i) = (idx / c, idx % c);
        gram_row(&ad[n * c * plane..][..c * plane], &bd[n * c * plane..][..c * plane], c, plane, i, row);
    });
    out
}

pub(crate) fn gram(a: &Tensor, b: &Tensor) -> Tensor {
    let s = a.shape();
    #[cfg(feature = "parallel")]
    if s.n * s.c > 1 && s.c * s.c * s.plane() >= PAR_MIN_WORK {
        return gram_par(a, b);
    }
    gram_seq(a, b)
}

/// Backward of [`gram_seq`]: returns (grad_a, grad_b).
pub(crate) fn gram_bwd(a: &Tensor, b: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let s = a.shape();
    let (c, plane) = (s.c, s.plane());
    let mut ga = Tensor::zeros(s);
    let mut gb = Tensor::zeros(s);
    for n in 0..s.n {
        let g = &gout.data()[n * c * c..][..c * c];
        let an = &a.data()[n * c * plane..][..c * plane];
        let bn = &b.data()[n * c * plane..][..c * plane];
        let gan = &mut ga.data_mut()[n * c * plane..][..c * plane];
        for i in 0..c {
            let row = &mut gan[i * plane..][..plane];
            for j in 0..c {
                let w = g[i * c + j];
                for (o, v) in row.iter_mut().zip(&bn[j * plane..][..plane]) {
                    *o += w * v;
                }
            }
        }
        let gbn = &mut gb.data_mut()[n * c * plane..][..c * plane];
        for j in 0..c {
            let row = &mut gbn[j * plane..][..plane];
            for i in 0..c {
                let w = g[i * c + j];
                for (o, v) in row.iter_mut().zip(&an[i * plane..][..plane]) {
                    *o += w * v;
                }
            }
        }
    }
    (ga, gb)
}

fn attn_apply_row(s_row: &[f32], v: &[f32], plane: usize, out_row: &mut [f32]) {
    for (j, w) in s_row.iter().enumerate() {
        for (o, x) in out_row.iter_mut().zip(&v[j * plane..][..plane]) {
            *o += w * x;
        }
    }
}

/// `out[n, i, :, :] = sum_j s[n, 0, i, j] * v[n, j, :, :]`: applies a CxC
/// attention matrix to the channel axis of `v`.
pub fn attn_apply_seq(s: &Tensor, v: &Tensor) -> Tensor {
    let vs = v.shape();
    let (c, plane) = (vs.c, vs.plane());
    let mut out = Tensor::zeros(vs);
    for (idx, row) in out.data_mut().chunks_mut(plane).enumerate() {
        let (n, i) = (idx / c, idx % c);
        attn_apply_row(&s.data()[(n * c + i) * c..][..c], &v.data()[n * c * plane..][..c * plane], plane, row);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn attn_apply_par(s: &Tensor, v: &Tensor) -> Tensor {
    let vs = v.shape();
    let (c, plane) = (vs.c, vs.plane());
    let mut out = Tensor::zeros(vs);
    let (sd, vd) = (s.data(), v.data());
    out.data_mut().par_chunks_mut(plane).enumerate().for_each(|(idx, row)| {
        let (n, i) = (idx / c, idx % c);
        attn_apply_row(&sd[(n * c + i) * c..][..c], &vd[n * c * plane..][..c * plane], plane, row);
    });
    out
}

pub(crate) fn attn_apply(s: &Tensor, v: &Tensor) -> Tensor {
    let vs = v.shape();
    #[cfg(feature = "parallel")]
    if vs.n * vs.c > 1 && vs.c * vs.numel() >= PAR_MIN_WORK {
        return attn_apply_par(s, v);
    }
    attn_apply_seq(s, v)
}

/// Backward of [`attn_apply_seq`]: returns (grad_s, grad_v).
pub(crate) fn attn_apply_bwd(s: &Tensor, v: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let vs = v.shape();
    let (c, plane) = (vs.c, vs.plane());
    let mut gs = Tensor::zeros(s.shape());
    let mut gv = Tensor::zeros(vs);
    for n in 0..vs.n {
        let vn = &v.data()[n * c * plane..][..c * plane];
        let gn = &gout.data()[n * c * plane..][..c * plane];
        let sn = &s.data()[n * c * c..][..c * c];
        let gsn = &mut gs.data_mut()[n * c * c..][..c * c];
        for i in 0..c {
            let gi = &gn[i * plane..][..plane];
            for j in 0..c {
                let mut acc = 0.0f32;
                for (g, x) in gi.iter().zip(&vn[j * plane..][..plane]) {
                    acc += g * x;
                }
                gsn[i * c + j] = acc;
            }
        }
        let gvn = &mut gv.data_mut()[n * c * plane..][..c * plane];
        for j in 0..c {
            let row = &mut gvn[j * plane..][..plane];
            for i in 0..c {
                let w = sn[i * c + j];
                for (o, g) in row.iter_mut().zip(&gn[i * plane..][..plane]) {
                    *o += w * g;
                }
            }
        }
    }
    (gs, gv)
}

// ---------------------------------------------------------------------------
// Directional recurrent scans
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ScanDir {
    Up,
    Down,
    Left,
    Right,
}

impl ScanDir {
    pub const ALL: [ScanDir; 4] = [ScanDir::Up, ScanDir::Down, ScanDir::Left, ScanDir::Right];

    fn vertical(self) -> bool {
        matches!(self, ScanDir::Up | ScanDir::Down)
    }

    /// Scan-axis positions in traversal order.
    fn order(self, len: usize) -> Box<dyn Iterator<Item = usize>> {
        match self {
            ScanDir::Down | ScanDir::Right => Box::new(0..len),
            ScanDir::Up | ScanDir::Left => Box::new((0..len).rev()),
        }
    }
}

/// One batch item of the recurrence h(t) = relu(f(t) + G h(t-1)).
///
/// `g` is a CxC channel mix; the state holds one channel vector per position
/// on the perpendicular axis. Vertical scans walk rows (contiguous), while
/// horizontal scans walk columns (strided).
fn scan_slab(f: &[f32], g: &[f32], dir: ScanDir, c: usize, h: usize, w: usize, out: &mut [f32]) {
    let plane = h * w;
    let (steps, perp) = if dir.vertical() { (h, w) } else { (w, h) };
    let mut state = vec![0.0f32; c * perp];
    let mut first = true;
    for t in dir.order(steps) {
        // Load driving column/row, add G * previous state, apply relu.
        let mut next = vec![0.0f32; c * perp];
        for ch in 0..c {
            let dst = &mut next[ch * perp..][..perp];
            if dir.vertical() {
                dst.copy_from_slice(&f[ch * plane + t * w..][..w]);
            } else {
                for (p, d) in dst.iter_mut().enumerate() {
                    *d = f[ch * plane + p * w + t];
                }
            }
        }
        if !first {
            for co in 0..c {
                let dst = &mut next[co * perp..][..perp];
                for ci in 0..c {
                    let wgt = g[co * c + ci];
                    for (d, s) in dst.iter_mut().zip(&state[ci * perp..][..perp]) {
                        *d += wgt * s;
                    }
                }
            }
        }
        next.iter_mut().for_each(|v| *v = v.max(0.0));
        for ch in 0..c {
            let src = &next[ch * perp..][..perp];
            if dir.vertical() {
                out[ch * plane + t * w..][..w].copy_from_slice(src);
            } else {
                for (p, s) in src.iter().enumerate() {
                    out[ch * plane + p * w + t] = *s;
                }
            }
        }
        state = next;
        first = false;
    }
}

pub fn scan_fwd_seq(f: &Tensor, g: &Tensor, dir: ScanDir) -> Tensor {
    let s = f.shape();
    let mut out = Tensor::zeros(s);
    let slab = s.c * s.plane();
    for (n, o) in out.data_mut().chunks_mut(slab).enumerate() {
        scan_slab(&f.data()[n * slab..][..slab], g.data(), dir, s.c, s.h, s.w, o);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn scan_fwd_par(f: &Tensor, g: &Tensor, dir: ScanDir) -> Tensor {
    let s = f.shape();
    let mut out = Tensor::zeros(s);
    let slab = s.c * s.plane();
    let (fd, gd) = (f.data(), g.data());
    out.data_mut()
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(n, o)| scan_slab(&fd[n * slab..][..slab], gd, dir, s.c, s.h, s.w, o));
    out
}

pub(crate) fn scan_fwd(f: &Tensor, g: &Tensor, dir: ScanDir) -> Tensor {
    let s = f.shape();
    #[cfg(feature = "parallel")]
    if s.n > 1 && s.c * s.numel() >= PAR_MIN_WORK {
        return scan_fwd_par(f, g, dir);
    }
    scan_fwd_seq(f, g, dir)
}

/// BPTT through the scan. Returns (grad_f, grad_g); `hout` is the forward
/// output, from which the relu mask is recovered (h > 0 iff pre-activation
/// was > 0).
pub(crate) fn scan_bwd(
    f: &Tensor,
    g: &Tensor,
    hout: &Tensor,
    gout: &Tensor,
    dir: ScanDir,
) -> (Tensor, Tensor) {
    let s = f.shape();
    let (c, h, w, plane) = (s.c, s.h, s.w, s.plane());
    let (steps, perp) = if dir.vertical() { (h, w) } else { (w, h) };
    let mut gf = Tensor::zeros(s);
    let mut gg = Tensor::zeros(g.shape());
    let order: Vec<usize> = dir.order(steps).collect();
    for n in 0..s.n {
        let base = n * c * plane;
        let hslab = &hout.data()[base..][..c * plane];
        let gslab = &gout.data()[base..][..c * plane];
        let load = |buf: &mut [f32], slab: &[f32], t: usize| {
            for ch in 0..c {
                let dst = &mut buf[ch * perp..][..perp];
                if dir.vertical() {
                    dst.copy_from_slice(&slab[ch * plane + t * w..][..w]);
                } else {
                    for (p, d) in dst.iter_mut().enumerate() {
                        *d = slab[ch * plane + p * w + t];
                    }
                }
            }
        };
        let mut u_next = vec![0.0f32; c * perp];
        let mut buf = vec![0.0f32; c * perp];
        let mut hbuf = vec![0.0f32; c * perp];
        // Walk the scan order backwards.
        for (step_idx, &t) in order.iter().enumerate().rev() {
            load(&mut buf, gslab, t);
            if step_idx + 1 < order.len() {
                // add G^T * u(t+1)
                for ci in 0..c {
                    let dst = &mut buf[ci * perp..][..perp];
                    for co in 0..c {
                        let wgt = g.data()[co * c + ci];
                        for (d, s) in dst.iter_mut().zip(&u_next[co * perp..][..perp]) {
                            *d += wgt * s;
                        }
                    }
                }
            }
            load(&mut hbuf, hslab, t);
            for (u, hv) in buf.iter_mut().zip(&hbuf) {
                if *hv <= 0.0 {
                    *u = 0.0;
                }
            }
            // grad_f(t) = u(t)
            for ch in 0..c {
                let src = &buf[ch * perp..][..perp];
                let gfs = &mut gf.data_mut()[base..][..c * plane];
                if dir.vertical() {
                    gfs[ch * plane + t * w..][..w].copy_from_slice(src);
                } else {
                    for (p, s) in src.iter().enumerate() {
                        gfs[ch * plane + p * w + t] = *s;
                    }
                }
            }
            // grad_G += u(t) h(t-1)^T for every non-initial step
            if step_idx > 0 {
                let t_prev = order[step_idx - 1];
                load(&mut hbuf, hslab, t_prev);
                for co in 0..c {
                    for ci in 0..c {
                        let mut acc = 0.0f32;
                        for (u, hv) in buf[co * perp..][..perp].iter().zip(&hbuf[ci * perp..][..perp]) {
                            acc += u * hv;
                        }
                        gg.data_mut()[co * c + ci] += acc;
                    }
                }
            }
            std::mem::swap(&mut u_next, &mut buf);
        }
    }
    (gf, gg)
}

// ---------------------------------------------------------------------------
// Misc structural kernels
// ---------------------------------------------------------------------------

pub(crate) fn upsample2x_fwd(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h * 2, s.w * 2));
    let (iw, ow) = (s.w, s.w * 2);
    for nc in 0..s.n * s.c {
        let src = &x.data()[nc * s.plane()..][..s.plane()];
        let dst = &mut out.data_mut()[nc * s.plane() * 4..][..s.plane() * 4];
        for ih in 0..s.h {
            for dy in 0..2 {
                let drow = &mut dst[(ih * 2 + dy) * ow..][..ow];
                let srow = &src[ih * iw..][..iw];
                for (i, v) in srow.iter().enumerate() {
                    drow[2 * i] = *v;
                    drow[2 * i + 1] = *v;
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2x_bwd(gout: &Tensor) -> Tensor {
    let s = gout.shape();
    let (h, w) = (s.h / 2, s.w / 2);
    let mut gx = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for nc in 0..s.n * s.c {
        let src = &gout.data()[nc * s.plane()..][..s.plane()];
        let dst = &mut gx.data_mut()[nc * h * w..][..h * w];
        for ih in 0..h {
            let drow = &mut dst[ih * w..][..w];
            for dy in 0..2 {
                let srow = &src[(ih * 2 + dy) * s.w..][..s.w];
                for (i, d) in drow.iter_mut().enumerate() {
                    *d += srow[2 * i] + srow[2 * i + 1];
                }
            }
        }
    }
    gx
}

/// Kahan-compensated sum over the whole buffer; fixed order.
pub(crate) fn sum_all(x: &[f32]) -> f32 {
    let mut sum = 0.0f32;
    let mut comp = 0.0f32;
    for &v in x {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}
