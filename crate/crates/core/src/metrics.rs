//! Evaluation protocol: CIELAB conversion, then RMSE (and an MAE variant)
//! in LAB space, PSNR on RGB, and windowed SSIM on luma, each over the whole
//! image, the shadow region, and the non-shadow region.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Reported when `pred == gt` exactly (MSE = 0, PSNR unbounded).
pub const PSNR_SENTINEL: f64 = 99.0;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Region {
    All,
    Shadow,
    NonShadow,
}

impl Region {
    fn selects(&self, in_shadow: bool) -> bool {
        match self {
            Region::All => true,
            Region::Shadow => in_shadow,
            Region::NonShadow => !in_shadow,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Region::All => "all",
            Region::Shadow => "shadow",
            Region::NonShadow => "non-shadow",
        }
    }
}

/// The nine protocol numbers, the MAE-in-LAB variants, and region pixel
/// counts.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricsReport {
    pub rmse_all: f64,
    pub rmse_nonshadow: f64,
    pub rmse_shadow: f64,
    pub ssim_all: f64,
    pub ssim_nonshadow: f64,
    pub ssim_shadow: f64,
    pub psnr_all: f64,
    pub psnr_nonshadow: f64,
    pub psnr_shadow: f64,
    pub mae_all: f64,
    pub mae_nonshadow: f64,
    pub mae_shadow: f64,
    pub n_shadow: usize,
    pub n_nonshadow: usize,
}

fn validate_rgb(t: &Tensor, what: &str) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::contract(format!(
            "{what} must be a (1,3,H,W) RGB tensor, got {s}"
        )));
    }
    for v in t.data() {
        if !(0.0..=255.0).contains(v) {
            return Err(Error::contract(format!(
                "{what} has value {v} outside the 8-bit range [0,255]"
            )));
        }
    }
    Ok(())
}

fn validate_mask(mask: &Tensor, like: Shape) -> Result<()> {
    let s = mask.shape();
    if s.n != 1 || s.c != 1 || s.h != like.h || s.w != like.w {
        return Err(Error::ShapeMismatch {
            context: "metrics mask",
            lhs: s.to_string(),
            rhs: like.to_string(),
        });
    }
    for v in mask.data() {
        if v.abs() > 1e-6 && (v - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "metrics mask must be binary, found {v}"
            )));
        }
    }
    Ok(())
}

fn srgb_linearize(v: f64) -> f64 {
    let c = v / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// One sRGB pixel (8-bit range, D65 white) to CIELAB.
pub fn rgb_pixel_to_lab(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (rl, gl, bl) = (srgb_linearize(r), srgb_linearize(g), srgb_linearize(b));
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    let (fx, fy, fz) = (lab_f(x / 0.95047), lab_f(y), lab_f(z / 1.08883));
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Converts a (1,3,H,W) RGB tensor in [0,255] to L,a,b channels.
pub fn rgb_to_lab(image: &Tensor) -> Result<Tensor> {
    validate_rgb(image, "rgb_to_lab input")?;
    let s = image.shape();
    let mut out = Tensor::zeros(s);
    let plane = s.plane();
    for p in 0..plane {
        let (l, a, b) = rgb_pixel_to_lab(
            image.data()[p] as f64,
            image.data()[plane + p] as f64,
            image.data()[2 * plane + p] as f64,
        );
        out.data_mut()[p] = l as f32;
        out.data_mut()[plane + p] = a as f32;
        out.data_mut()[2 * plane + p] = b as f32;
    }
    Ok(out)
}

fn region_pixels(mask: &Tensor, region: Region) -> Vec<usize> {
    mask.data()
        .iter()
        .enumerate()
        .filter(|(_, v)| region.selects(**v > 0.5))
        .map(|(i, _)| i)
        .collect()
}

fn ensure_nonempty(pixels: &[usize], region: Region) -> Result<()> {
    if pixels.is_empty() {
        return Err(Error::EmptyRegion {
            region: region.name(),
        });
    }
    Ok(())
}

/// Root mean square error in LAB over the selected region (mean over region
/// pixels and the three LAB channels).
pub fn rmse_lab(pred: &Tensor, gt: &Tensor, mask: &Tensor, region: Region) -> Result<f64> {
    let (lab_p, lab_g) = (rgb_to_lab(pred)?, rgb_to_lab(gt)?);
    validate_mask(mask, pred.shape())?;
    lab_region_error(&lab_p, &lab_g, mask, region, true)
}

/// Mean absolute error in LAB; the shadow-removal literature often reports
/// this under the RMSE name, so both are exposed.
pub fn mae_lab(pred: &Tensor, gt: &Tensor, mask: &Tensor, region: Region) -> Result<f64> {
    let (lab_p, lab_g) = (rgb_to_lab(pred)?, rgb_to_lab(gt)?);
    validate_mask(mask, pred.shape())?;
    lab_region_error(&lab_p, &lab_g, mask, region, false)
}

/// Region error on already-converted LAB tensors; `squared` picks RMSE over
/// MAE.
pub fn lab_region_error(
    lab_pred: &Tensor,
    lab_gt: &Tensor,
    mask: &Tensor,
    region: Region,
    squared: bool,
) -> Result<f64> {
    let pixels = region_pixels(mask, region);
    ensure_nonempty(&pixels, region)?;
    let plane = lab_pred.shape().plane();
    let mut acc = 0.0f64;
    for &p in &pixels {
        for c in 0..3 {
            let d = lab_pred.data()[c * plane + p] as f64 - lab_gt.data()[c * plane + p] as f64;
            acc += if squared { d * d } else { d.abs() };
        }
    }
    let mean = acc / (3.0 * pixels.len() as f64);
    Ok(if squared { mean.sqrt() } else { mean })
}

/// Peak signal-to-noise ratio over the region's RGB values; identical
/// inputs report [`PSNR_SENTINEL`].
pub fn psnr(pred: &Tensor, gt: &Tensor, mask: &Tensor, region: Region) -> Result<f64> {
    validate_rgb(pred, "psnr pred")?;
    validate_rgb(gt, "psnr gt")?;
    validate_mask(mask, pred.shape())?;
    let pixels = region_pixels(mask, region);
    ensure_nonempty(&pixels, region)?;
    let plane = pred.shape().plane();
    let mut acc = 0.0f64;
    for &p in &pixels {
        for c in 0..3 {
            let d = pred.data()[c * plane + p] as f64 - gt.data()[c * plane + p] as f64;
            acc += d * d;
        }
    }
    let mse = acc / (3.0 * pixels.len() as f64);
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn luma601(image: &Tensor) -> Vec<f64> {
    let plane = image.shape().plane();
    (0..plane)
        .map(|p| {
            0.299 * image.data()[p] as f64
                + 0.587 * image.data()[plane + p] as f64
                + 0.114 * image.data()[2 * plane + p] as f64
        })
        .collect()
}

/// Windowed SSIM (11x11 Gaussian, sigma 1.5, K1 = 0.01, K2 = 0.03, L = 255)
/// on ITU-R 601 luma, averaged over valid window centers whose mask value
/// matches the region.
pub fn ssim(pred: &Tensor, gt: &Tensor, mask: &Tensor, region: Region) -> Result<f64> {
    validate_rgb(pred, "ssim pred")?;
    validate_rgb(gt, "ssim gt")?;
    validate_mask(mask, pred.shape())?;
    let s = pred.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            s.h, s.w
        )));
    }
    let (sum, count) = ssim_region_sums(&luma601(pred), &luma601(gt), mask, s.h, s.w, region);
    if count == 0 {
        return Err(Error::EmptyRegion {
            region: region.name(),
        });
    }
    Ok(sum / count as f64)
}

/// Sum of per-window SSIM values and window count for one region.
fn ssim_region_sums(
    x: &[f64],
    y: &[f64],
    mask: &Tensor,
    h: usize,
    w: usize,
    region: Region,
) -> (f64, usize) {
    let win = gaussian_window();
    let half = SSIM_WINDOW / 2;
    const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
    const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
    let row_sums = |ch: usize| -> (f64, usize) {
        let mut sum = 0.0;
        let mut count = 0usize;
        for cw in half..w - half {
            if !region.selects(mask.data()[ch * w + cw] > 0.5) {
                continue;
            }
            let (mut mx, mut my) = (0.0f64, 0.0f64);
            let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                let row = (ch - half + i) * w + cw - half;
                for j in 0..SSIM_WINDOW {
                    let g = win[i * SSIM_WINDOW + j];
                    let (xv, yv) = (x[row + j], y[row + j]);
                    mx += g * xv;
                    my += g * yv;
                    sxx += g * xv * xv;
                    syy += g * yv * yv;
                    sxy += g * xv * yv;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            let val = ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                / ((mx * mx + my * my + C1) * (vx + vy + C2));
            sum += val;
            count += 1;
        }
        (sum, count)
    };
    let rows: Vec<usize> = (half..h - half).collect();
    let partials: Vec<(f64, usize)>;
    #[cfg(feature = "parallel")]
    {
        partials = if rows.len() * w >= 64 * 64 {
            rows.par_iter().map(|ch| row_sums(*ch)).collect()
        } else {
            rows.iter().map(|ch| row_sums(*ch)).collect()
        };
    }
    #[cfg(not(feature = "parallel"))]
    {
        partials = rows.iter().map(|ch| row_sums(*ch)).collect();
    }
    partials
        .into_iter()
        .fold((0.0, 0), |(s, c), (ps, pc)| (s + ps, c + pc))
}

/// Fills the full report for one aligned (pred, gt, mask) triple. Empty
/// shadow or non-shadow regions surface as errors, not NaNs.
pub fn evaluate_pair(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<MetricsReport> {
    validate_rgb(pred, "evaluate pred")?;
    validate_rgb(gt, "evaluate gt")?;
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            context: "evaluate_pair pred/gt",
            lhs: pred.shape().to_string(),
            rhs: gt.shape().to_string(),
        });
    }
    validate_mask(mask, pred.shape())?;
    let n_shadow = mask.data().iter().filter(|v| **v > 0.5).count();
    let n_nonshadow = mask.numel() - n_shadow;
    let report = MetricsReport {
        rmse_all: rmse_lab(pred, gt, mask, Region::All)?,
        rmse_nonshadow: rmse_lab(pred, gt, mask, Region::NonShadow)?,
        rmse_shadow: rmse_lab(pred, gt, mask, Region::Shadow)?,
        ssim_all: ssim(pred, gt, mask, Region::All)?,
        ssim_nonshadow: ssim(pred, gt, mask, Region::NonShadow)?,
        ssim_shadow: ssim(pred, gt, mask, Region::Shadow)?,
        psnr_all: psnr(pred, gt, mask, Region::All)?,
        psnr_nonshadow: psnr(pred, gt, mask, Region::NonShadow)?,
        psnr_shadow: psnr(pred, gt, mask, Region::Shadow)?,
        mae_all: mae_lab(pred, gt, mask, Region::All)?,
        mae_nonshadow: mae_lab(pred, gt, mask, Region::NonShadow)?,
        mae_shadow: mae_lab(pred, gt, mask, Region::Shadow)?,
        n_shadow,
        n_nonshadow,
    };
    Ok(report)
}

/// How a dataset-level report aggregates per-image numbers.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum Aggregation {
    /// Mean of per-image metric values.
    #[default]
    PerImage,
    /// Metrics recomputed over all pixels/windows pooled dataset-wide.
    Pooled,
}

/// Mean of per-image reports (fields averaged independently).
pub fn average_reports(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len().max(1) as f64;
    let mut out = MetricsReport::default();
    for r in reports {
        out.rmse_all += r.rmse_all / n;
        out.rmse_nonshadow += r.rmse_nonshadow / n;
        out.rmse_shadow += r.rmse_shadow / n;
        out.ssim_all += r.ssim_all / n;
        out.ssim_nonshadow += r.ssim_nonshadow / n;
        out.ssim_shadow += r.ssim_shadow / n;
        out.psnr_all += r.psnr_all / n;
        out.psnr_nonshadow += r.psnr_nonshadow / n;
        out.psnr_shadow += r.psnr_shadow / n;
        out.mae_all += r.mae_all / n;
        out.mae_nonshadow += r.mae_nonshadow / n;
        out.mae_shadow += r.mae_shadow / n;
        out.n_shadow += r.n_shadow;
        out.n_nonshadow += r.n_nonshadow;
    }
    out
}

/// Raw sums for pooled aggregation.
#[derive(Clone, Copy, Debug, Default)]
pub struct PooledSums {
    // [shadow, nonshadow]
    lab_sq: [f64; 2],
    lab_abs: [f64; 2],
    rgb_sq: [f64; 2],
    pixels: [usize; 2],
    ssim_sum: [f64; 2],
    ssim_windows: [usize; 2],
}

pub fn accumulate_pooled(pred: &Tensor, gt: &Tensor, mask: &Tensor, into: &mut PooledSums) -> Result<()> {
    validate_rgb(pred, "evaluate pred")?;
    validate_rgb(gt, "evaluate gt")?;
    validate_mask(mask, pred.shape())?;
    let (lab_p, lab_g) = (rgb_to_lab(pred)?, rgb_to_lab(gt)?);
    let plane = pred.shape().plane();
    for p in 0..plane {
        let idx = if mask.data()[p] > 0.5 { 0 } else { 1 };
        into.pixels[idx] += 1;
        for c in 0..3 {
            let dl = lab_p.data()[c * plane + p] as f64 - lab_g.data()[c * plane + p] as f64;
            into.lab_sq[idx] += dl * dl;
            into.lab_abs[idx] += dl.abs();
            let dr = pred.data()[c * plane + p] as f64 - gt.data()[c * plane + p] as f64;
            into.rgb_sq[idx] += dr * dr;
        }
    }
    let s = pred.shape();
    let (xp, yp) = (luma601(pred), luma601(gt));
    for (i, region) in [Region::Shadow, Region::NonShadow].into_iter().enumerate() {
        let (sum, count) = ssim_region_sums(&xp, &yp, mask, s.h, s.w, region);
        into.ssim_sum[i] += sum;
        into.ssim_windows[i] += count;
    }
    Ok(())
}

pub fn pooled_report(sums: &PooledSums) -> MetricsReport {
    let rmse = |sq: f64, n: usize| if n == 0 { 0.0 } else { (sq / (3.0 * n as f64)).sqrt() };
    let mae = |ab: f64, n: usize| if n == 0 { 0.0 } else { ab / (3.0 * n as f64) };
    let psnr_of = |sq: f64, n: usize| {
        if n == 0 {
            return 0.0;
        }
        let mse = sq / (3.0 * n as f64);
        if mse == 0.0 {
            PSNR_SENTINEL
        } else {
            10.0 * (255.0f64 * 255.0 / mse).log10()
        }
    };
    let ssim_of = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    let tot_px = sums.pixels[0] + sums.pixels[1];
    let tot_sq = sums.lab_sq[0] + sums.lab_sq[1];
    let tot_ab = sums.lab_abs[0] + sums.lab_abs[1];
    let tot_rgb = sums.rgb_sq[0] + sums.rgb_sq[1];
    let tot_ssim = sums.ssim_sum[0] + sums.ssim_sum[1];
    let tot_win = sums.ssim_windows[0] + sums.ssim_windows[1];
    MetricsReport {
        rmse_all: rmse(tot_sq, tot_px),
        rmse_shadow: rmse(sums.lab_sq[0], sums.pixels[0]),
        rmse_nonshadow: rmse(sums.lab_sq[1], sums.pixels[1]),
        mae_all: mae(tot_ab, tot_px),
        mae_shadow: mae(sums.lab_abs[0], sums.pixels[0]),
        mae_nonshadow: mae(sums.lab_abs[1], sums.pixels[1]),
        psnr_all: psnr_of(tot_rgb, tot_px),
        psnr_shadow: psnr_of(sums.rgb_sq[0], sums.pixels[0]),
        psnr_nonshadow: psnr_of(sums.rgb_sq[1], sums.pixels[1]),
        ssim_all: ssim_of(tot_ssim, tot_win),
        ssim_shadow: ssim_of(sums.ssim_sum[0], sums.ssim_windows[0]),
        ssim_nonshadow: ssim_of(sums.ssim_sum[1], sums.ssim_windows[1]),
        n_shadow: sums.pixels[0],
        n_nonshadow: sums.pixels[1],
    }
}

/// CSV header matching the evaluation table column order, with the MAE
/// variants appended.
pub const CSV_HEADER: &str =
    "id,RMSE,RMSE-N,RMSE-S,SSIM,SSIM-N,SSIM-S,PSNR,PSNR-N,PSNR-S,MAE,MAE-N,MAE-S";

pub fn csv_row(id: &str, r: &MetricsReport) -> String {
    format!(
        "{id},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
        r.rmse_all,
        r.rmse_nonshadow,
        r.rmse_shadow,
        r.ssim_all,
        r.ssim_nonshadow,
        r.ssim_shadow,
        r.psnr_all,
        r.psnr_nonshadow,
        r.psnr_shadow,
        r.mae_all,
        r.mae_nonshadow,
        r.mae_shadow,
    )
}

/// Flat `key = value` form of a report.
pub fn report_key_values(r: &MetricsReport) -> String {
    let mut s = String::new();
    for (k, v) in [
        ("rmse_all", r.rmse_all),
        ("rmse_nonshadow", r.rmse_nonshadow),
        ("rmse_shadow", r.rmse_shadow),
        ("ssim_all", r.ssim_all),
        ("ssim_nonshadow", r.ssim_nonshadow),
        ("ssim_shadow", r.ssim_shadow),
        ("psnr_all", r.psnr_all),
        ("psnr_nonshadow", r.psnr_nonshadow),
        ("psnr_shadow", r.psnr_shadow),
        ("mae_all", r.mae_all),
        ("mae_nonshadow", r.mae_nonshadow),
        ("mae_shadow", r.mae_shadow),
    ] {
        s.push_str(&format!("{k} = {v:.6}\n"));
    }
    s.push_str(&format!("n_shadow = {}\n", r.n_shadow));
    s.push_str(&format!("n_nonshadow = {}\n", r.n_nonshadow));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_image(h: usize, w: usize, v: f32) -> Tensor {
        Tensor::full(Shape::new(1, 3, h, w), v)
    }

    fn rect_mask(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> Tensor {
        let mut m = Tensor::zeros(Shape::new(1, 1, h, w));
        for r in 0..h {
            for c in 0..w {
                if on(r, c) {
                    m.set(0, 0, r, c, 1.0);
                }
            }
        }
        m
    }

    #[test]
    fn lab_anchor_points() {
        let (l, a, b) = rgb_pixel_to_lab(255.0, 255.0, 255.0);
        assert!((l - 100.0).abs() < 0.01 && a.abs() < 0.01 && b.abs() < 0.01);
        let (l, a, b) = rgb_pixel_to_lab(0.0, 0.0, 0.0);
        assert!(l.abs() < 1e-9 && a.abs() < 1e-9 && b.abs() < 1e-9);
        let (l, a, b) = rgb_pixel_to_lab(119.0, 119.0, 119.0);
        assert!((l - 50.0).abs() < 0.5, "gray L = {l}");
        assert!(a.abs() < 0.01 && b.abs() < 0.01);
    }

    #[test]
    fn rgb_to_lab_rejects_out_of_range() {
        let mut img = const_image(2, 2, 100.0);
        img.data_mut()[0] = 256.0;
        assert!(rgb_to_lab(&img).is_err());
    }

    #[test]
    fn identical_pair_is_perfect() {
        let img = {
            let mut t = const_image(12, 12, 0.0);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = ((i * 97) % 256) as f32;
            }
            t
        };
        let mask = rect_mask(12, 12, |r, _| r < 6);
        let rep = evaluate_pair(&img, &img, &mask).unwrap();
        assert_eq!(rep.rmse_all, 0.0);
        assert_eq!(rep.rmse_shadow, 0.0);
        assert_eq!(rep.ssim_all, 1.0);
        assert_eq!(rep.ssim_nonshadow, 1.0);
        assert_eq!(rep.psnr_all, PSNR_SENTINEL);
        assert_eq!(rep.n_shadow + rep.n_nonshadow, 144);
    }

    #[test]
    fn empty_shadow_region_is_an_error() {
        let img = const_image(12, 12, 10.0);
        let mask = Tensor::zeros(Shape::new(1, 1, 12, 12));
        let err = evaluate_pair(&img, &img, &mask).unwrap_err();
        assert!(matches!(err, Error::EmptyRegion { region: "shadow" }));
    }

    #[test]
    fn psnr_closed_forms() {
        // MSE = 255^2 -> 0 dB: pred 0, gt 255 everywhere.
        let mask = rect_mask(11, 11, |r, _| r == 0);
        let p = psnr(&const_image(11, 11, 0.0), &const_image(11, 11, 255.0), &mask, Region::All)
            .unwrap();
        assert!(p.abs() < 1e-9);
        // MSE = 100 -> 28.1308 dB
        let p = psnr(&const_image(11, 11, 50.0), &const_image(11, 11, 60.0), &mask, Region::All)
            .unwrap();
        assert!((p - 28.1308).abs() < 1e-3, "{p}");
        // monotone in MSE
        let p2 = psnr(&const_image(11, 11, 50.0), &const_image(11, 11, 66.0), &mask, Region::All)
            .unwrap();
        assert!(p2 < p);
    }

    #[test]
    fn ssim_constant_pair_closed_form() {
        let mask = rect_mask(11, 11, |r, _| r < 3);
        let got = ssim(&const_image(11, 11, 100.0), &const_image(11, 11, 110.0), &mask, Region::All)
            .unwrap();
        let c1 = (0.01f64 * 255.0).powi(2);
        let want = (2.0 * 100.0 * 110.0 + c1) / (100.0f64.powi(2) + 110.0f64.powi(2) + c1);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!((-1.0..=1.0).contains(&got));
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let mask = rect_mask(8, 8, |_, _| true);
        assert!(ssim(&const_image(8, 8, 1.0), &const_image(8, 8, 1.0), &mask, Region::All).is_err());
    }

    #[test]
    fn masked_offset_decomposes() {
        // offset only inside the mask: rmse_nonshadow = 0, rmse_shadow = d,
        // rmse_all = d * sqrt(shadow fraction)
        let (h, w) = (16, 16);
        let gt = const_image(h, w, 100.0);
        let mask = rect_mask(h, w, |r, c| r < 8 && c < 8);
        let mut pred = gt.clone();
        let plane = h * w;
        for p in 0..plane {
            if mask.data()[p] > 0.5 {
                for c in 0..3 {
                    pred.data_mut()[c * plane + p] += 10.0;
                }
            }
        }
        let lab_p = rgb_to_lab(&pred).unwrap();
        let lab_g = rgb_to_lab(&gt).unwrap();
        let d_shadow = lab_region_error(&lab_p, &lab_g, &mask, Region::Shadow, true).unwrap();
        let d_non = lab_region_error(&lab_p, &lab_g, &mask, Region::NonShadow, true).unwrap();
        let d_all = lab_region_error(&lab_p, &lab_g, &mask, Region::All, true).unwrap();
        assert_eq!(d_non, 0.0);
        assert!(d_shadow > 0.0);
        let frac: f64 = 64.0 / 256.0;
        assert!((d_all - d_shadow * frac.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn pooled_matches_single_image() {
        let mut t = const_image(12, 12, 0.0);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i * 31) % 250) as f32;
        }
        let mut t2 = t.clone();
        for v in t2.data_mut() {
            *v = (*v + 5.0).min(255.0);
        }
        let mask = rect_mask(12, 12, |r, c| (r + c) % 3 == 0);
        let single = evaluate_pair(&t, &t2, &mask).unwrap();
        let mut sums = PooledSums::default();
        accumulate_pooled(&t, &t2, &mask, &mut sums).unwrap();
        let pooled = pooled_report(&sums);
        assert!((single.rmse_all - pooled.rmse_all).abs() < 1e-9);
        assert!((single.ssim_shadow - pooled.ssim_shadow).abs() < 1e-9);
        assert!((single.psnr_nonshadow - pooled.psnr_nonshadow).abs() < 1e-9);
    }
}
