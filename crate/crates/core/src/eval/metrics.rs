//! Image quality metrics on frames with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Frame, Tensor};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check(a: &Frame, b: &Frame) -> Result<()> {
    a.tensor().check_same_shape(b.tensor(), "metric inputs")
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.data().len() as f64
}

/// `10 log10(1 / MSE)`, at most [`PSNR_CAP`].
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    check(a, b)?;
    let m = mse(a.tensor(), b.tensor());
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Root-mean-square difference on the 0–255 scale.
pub fn interpolation_error(a: &Frame, b: &Frame) -> Result<f64> {
    check(a, b)?;
    Ok(255.0 * mse(a.tensor(), b.tensor()).sqrt())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (k, t) in taps.iter_mut().enumerate() {
        let x = k as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable "valid" Gaussian filter of a single-channel image.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * x[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows of the luminance.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let x = a.luminance().into_data();
    let y = b.luminance().into_data();
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let sxx = filter_valid(&prod(&x, &x), h, w, &taps);
    let syy = filter_valid(&prod(&y, &y), h, w, &taps);
    let sxy = filter_valid(&prod(&x, &y), h, w, &taps);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut total = 0.0;
    for k in 0..mx.len() {
        let (ux, uy) = (mx[k], my[k]);
        let vx = sxx[k] - ux * ux;
        let vy = syy[k] - uy * uy;
        let cxy = sxy[k] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}
