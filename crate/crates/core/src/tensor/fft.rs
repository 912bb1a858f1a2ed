//! 2-D real FFT over the spatial axes of a tensor, per (batch, channel)
//! slice. Forward is unnormalized; the inverse divides by H*W, so
//! `irfft2(rfft2(x), W) == x` and a constant slice transforms to a single DC
//! bin holding `c * H * W`.


use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

type Cpx = Complex<f32>;

/// Half-spectrum of a real 2-D transform: `w_half = floor(W/2) + 1` columns
/// are stored; the rest are implied by conjugate symmetry.
#[derive(Clone, Debug)]
pub struct ComplexGrid {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w_half: usize,
    pub re: Vec<f32>,
    pub im: Vec<f32>,
}

impl ComplexGrid {
    fn zeros(n: usize, c: usize, h: usize, w_half: usize) -> Self {
        let len = n * c * h * w_half;
        ComplexGrid {
            n,
            c,
            h,
            w_half,
            re: vec![0.0; len],
            im: vec![0.0; len],
        }
    }

    #[inline]
    fn idx(&self, n: usize, c: usize, kh: usize, kw: usize) -> usize {
        ((n * self.c + c) * self.h + kh) * self.w_half + kw
    }

    pub fn re_at(&self, n: usize, c: usize, kh: usize, kw: usize) -> f32 {
        self.re[self.idx(n, c, kh, kw)]
    }

    pub fn im_at(&self, n: usize, c: usize, kh: usize, kw: usize) -> f32 {
        self.im[self.idx(n, c, kh, kw)]
    }
}

struct Plans {
    row_fwd: Arc<dyn Fft<f32>>,
    row_inv: Arc<dyn Fft<f32>>,
    col_fwd: Arc<dyn Fft<f32>>,
    col_inv: Arc<dyn Fft<f32>>,
}

fn plans(h: usize, w: usize) -> Plans {
    static PLANNER: OnceLock<Mutex<FftPlanner<f32>>> = OnceLock::new();
    let mut p = PLANNER
        .get_or_init(|| Mutex::new(FftPlanner::new()))
        .lock()
        .expect("fft planner lock");
    Plans {
        row_fwd: p.plan_fft_forward(w),
        row_inv: p.plan_fft_inverse(w),
        col_fwd: p.plan_fft_forward(h),
        col_inv: p.plan_fft_inverse(h),
    }
}

/// Forward transform of one real H x W slice into its H x w_half spectrum.
fn slice_rfft2(x: &[f32], h: usize, w: usize, wh: usize, p: &Plans, re: &mut [f32], im: &mut [f32]) {
    let mut grid = vec![Cpx::new(0.0, 0.0); h * wh];
    let mut row = vec![Cpx::new(0.0, 0.0); w];
    for r in 0..h {
        for (dst, src) in row.iter_mut().zip(&x[r * w..][..w]) {
            *dst = Cpx::new(*src, 0.0);
        }
        p.row_fwd.process(&mut row);
        grid[r * wh..][..wh].copy_from_slice(&row[..wh]);
    }
    let mut col = vec![Cpx::new(0.0, 0.0); h];
    for kw in 0..wh {
        for (r, c) in col.iter_mut().enumerate() {
            *c = grid[r * wh + kw];
        }
        p.col_fwd.process(&mut col);
        for (r, c) in col.iter().enumerate() {
            re[r * wh + kw] = c.re;
            im[r * wh + kw] = c.im;
        }
    }
}

/// Inverse-direction transform of one half-spectrum back to a real slice.
///
/// With `mirror` the missing columns are reconstructed by conjugate symmetry
/// (the true inverse); without it they are zero-filled, which is the adjoint
/// of the forward map. `norm` scales the result (1/(H*W) for the inverse,
/// 1 for the adjoint).
fn slice_half_to_real(
    re: &[f32],
    im: &[f32],
    h: usize,
    w: usize,
    wh: usize,
    p: &Plans,
    mirror: bool,
    norm: f32,
    out: &mut [f32],
) {
    // Columns first: Z[u, kw] = sum_kh X[kh, kw] e^{+2pi i kh u / H}.
    let mut z = vec![Cpx::new(0.0, 0.0); h * wh];
    let mut col = vec![Cpx::new(0.0, 0.0); h];
    for kw in 0..wh {
        for (r, c) in col.iter_mut().enumerate() {
            *c = Cpx::new(re[r * wh + kw], im[r * wh + kw]);
        }
        p.col_inv.process(&mut col);
        for (r, c) in col.iter().enumerate() {
            z[r * wh + kw] = *c;
        }
    }
    let mut row = vec![Cpx::new(0.0, 0.0); w];
    for u in 0..h {
        let zr = &z[u * wh..][..wh];
        row[..wh].copy_from_slice(zr);
        for kw in wh..w {
            row[kw] = if mirror { zr[w - kw].conj() } else { Cpx::new(0.0, 0.0) };
        }
        p.row_inv.process(&mut row);
        for (o, c) in out[u * w..][..w].iter_mut().zip(&row) {
            *o = c.re * norm;
        }
    }
}

/// 2-D real FFT of every (batch, channel) slice.
pub fn rfft2(x: &Tensor) -> ComplexGrid {
    let s = x.shape();
    let wh = s.w / 2 + 1;
    let mut grid = ComplexGrid::zeros(s.n, s.c, s.h, wh);
    let p = plans(s.h, s.w);
    let slab_in = s.plane();
    let slab_out = s.h * wh;
    let run = |((re, im), src): ((&mut [f32], &mut [f32]), &[f32])| {
        slice_rfft2(src, s.h, s.w, wh, &p, re, im);
    };
    #[cfg(feature = "parallel")]
    if s.n * s.c > 1 && x.numel() >= 16 * 1024 {
        grid.re
            .par_chunks_mut(slab_out)
            .zip(grid.im.par_chunks_mut(slab_out))
            .zip(x.data().par_chunks(slab_in))
            .for_each(run);
        return grid;
    }
    grid.re
        .chunks_mut(slab_out)
        .zip(grid.im.chunks_mut(slab_out))
        .zip(x.data().chunks(slab_in))
        .for_each(run);
    grid
}

/// Inverse of [`rfft2`]; `width` must be the original W of the signal.
pub fn irfft2(grid: &ComplexGrid, width: usize) -> Result<Tensor> {
    if width / 2 + 1 != grid.w_half {
        return Err(Error::contract(format!(
            "irfft2 width {} is inconsistent with stored half-spectrum of {} columns",
            width, grid.w_half
        )));
    }
    let (h, wh) = (grid.h, grid.w_half);
    let mut out = Tensor::zeros(Shape::new(grid.n, grid.c, h, width));
    let p = plans(h, width);
    let norm = 1.0 / (h * width) as f32;
    let slab_out = h * width;
    let slab_in = h * wh;
    let run = |(dst, (re, im)): (&mut [f32], (&[f32], &[f32]))| {
        slice_half_to_real(re, im, h, width, wh, &p, true, norm, dst);
    };
    #[cfg(feature = "parallel")]
    if grid.n * grid.c > 1 && out.numel() >= 16 * 1024 {
        out.data_mut()
            .par_chunks_mut(slab_out)
            .zip(grid.re.par_chunks(slab_in).zip(grid.im.par_chunks(slab_in)))
            .for_each(run);
        return Ok(out);
    }
    out.data_mut()
        .chunks_mut(slab_out)
        .zip(grid.re.chunks(slab_in).zip(grid.im.chunks(slab_in)))
        .for_each(run);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stacked-channel form used on the autodiff tape
// ---------------------------------------------------------------------------

/// Spectrum as a plain tensor: channels `[0, C)` are real parts and
/// `[C, 2C)` imaginary parts, shape (N, 2C, H, w_half).
pub(crate) fn rfft2_stacked(x: &Tensor) -> Tensor {
    let s = x.shape();
    let grid = rfft2(x);
    let wh = grid.w_half;
    let mut out = Tensor::zeros(Shape::new(s.n, 2 * s.c, s.h, wh));
    let slab = s.h * wh;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = (n * s.c + c) * slab;
            let dst_re = (n * 2 * s.c + c) * slab;
            let dst_im = (n * 2 * s.c + s.c + c) * slab;
            out.data_mut()[dst_re..dst_re + slab].copy_from_slice(&grid.re[src..src + slab]);
            out.data_mut()[dst_im..dst_im + slab].copy_from_slice(&grid.im[src..src + slab]);
        }
    }
    out
}

fn stacked_to_grid(y: &Tensor) -> ComplexGrid {
    let s = y.shape();
    let c = s.c / 2;
    let mut grid = ComplexGrid::zeros(s.n, c, s.h, s.w);
    let slab = s.h * s.w;
    for n in 0..s.n {
        for ch in 0..c {
            let src_re = (n * s.c + ch) * slab;
            let src_im = (n * s.c + c + ch) * slab;
            let dst = (n * c + ch) * slab;
            grid.re[dst..dst + slab].copy_from_slice(&y.data()[src_re..src_re + slab]);
            grid.im[dst..dst + slab].copy_from_slice(&y.data()[src_im..src_im + slab]);
        }
    }
    grid
}

pub(crate) fn irfft2_stacked(y: &Tensor, width: usize) -> Result<Tensor> {
    let s = y.shape();
    if s.c % 2 != 0 {
        return Err(Error::contract(format!(
            "stacked spectrum needs an even channel count, got {}",
            s.c
        )));
    }
    irfft2(&stacked_to_grid(y), width)
}

/// Adjoint of [`rfft2_stacked`]: zero-pad the half spectrum and run the
/// unnormalized inverse, keeping the real part.
pub(crate) fn rfft2_stacked_adjoint(gout: &Tensor, width: usize) -> Tensor {
    let grid = stacked_to_grid(gout);
    let (h, wh) = (grid.h, grid.w_half);
    let mut out = Tensor::zeros(Shape::new(grid.n, grid.c, h, width));
    let p = plans(h, width);
    let slab_out = h * width;
    let slab_in = h * wh;
    for ((dst, re), im) in out
        .data_mut()
        .chunks_mut(slab_out)
        .zip(grid.re.chunks(slab_in))
        .zip(grid.im.chunks(slab_in))
    {
        slice_half_to_real(re, im, h, width, wh, &p, false, 1.0, dst);
    }
    out
}

/// Adjoint of [`irfft2_stacked`]: the forward transform of the output
/// gradient, scaled by m/(H*W) where m = 2 on bins that have a mirrored
/// twin in the full spectrum and 1 on self-conjugate columns.
pub(crate) fn irfft2_stacked_adjoint(gout: &Tensor) -> Tensor {
    let s = gout.shape();
    let mut g = rfft2_stacked(gout);
    let wh = s.w / 2 + 1;
    let norm = 1.0 / s.plane() as f32;
    let gs = g.shape();
    let slab = gs.h * gs.w;
    for chunk in g.data_mut().chunks_mut(slab) {
        for row in chunk.chunks_mut(wh) {
            for (kw, v) in row.iter_mut().enumerate() {
                let m = if kw >= 1 && kw <= s.w - wh { 2.0 } else { 1.0 };
                *v *= m * norm;
            }
        }
    }
    g
}
