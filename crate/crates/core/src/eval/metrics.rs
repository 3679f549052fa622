//! Full-reference image quality metrics on `[0, 1]` images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::scalar::Scalar;

/// PSNR written to reports in place of `+inf`.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_len<T>(what: &'static str, a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(what, format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// Neumaier-compensated sum, so that constant inputs average exactly.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

pub fn mse<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    check_len("mse", a, b)?;
    let s = compensated_sum(a.iter().zip(b).map(|(x, y)| {
        let d = x.to_f64_lossy() - y.to_f64_lossy();
        d * d
    }));
    Ok(s / a.len() as f64)
}

/// `10 log10(1 / mse)`, `+inf` for identical inputs.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn capped(psnr: f64) -> f64 {
    psnr.min(PSNR_CAP)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Channel-mean grayscale of a CHW buffer.
fn gray<T: Scalar>(data: &[T], channels: usize, hw: usize) -> Vec<f64> {
    (0..hw).map(|i| (0..channels).map(|c| data[c * hw + i].to_f64_lossy()).sum::<f64>() / channels as f64).collect()
}

/// Valid-mode separable filtering with the SSIM window.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows of the channel
/// mean images of two CHW buffers.
pub fn ssim<T: Scalar>(a: &[T], b: &[T], channels: usize, height: usize, width: usize) -> Result<f64> {
    check_len("ssim", a, b)?;
    if a.len() != channels * height * width {
        return Err(Error::shape("ssim", format!("{} values for {channels}x{height}x{width}", a.len())));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("{height}x{width} image is smaller than the SSIM window")));
    }
    let hw = height * width;
    let (ga, gb) = (gray(a, channels, hw), gray(b, channels, hw));
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let f = |v: &[f64]| filter_valid(v, height, width, &k);
    let (ma, mb) = (f(&ga), f(&gb));
    let (saa, sbb, sab) = (f(&prod(&ga, &ga)), f(&prod(&gb, &gb)), f(&prod(&ga, &gb)));
    let total: f64 = (0..ma.len())
        .map(|i| {
            let (mua, mub) = (ma[i], mb[i]);
            let va = saa[i] - mua * mua;
            let vb = sbb[i] - mub * mub;
            let cov = sab[i] - mua * mub;
            ((2.0 * mua * mub + C1) * (2.0 * cov + C2)) / ((mua * mua + mub * mub + C1) * (va + vb + C2))
        })
        .sum();
    Ok(total / ma.len() as f64)
}

pub fn image_ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_geometry(b) {
        return Err(Error::shape("ssim", "image geometry differs"));
    }
    ssim(&a.data, &b.data, a.channels, a.height, a.width)
}

/// Scores of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl FrameMetrics {
    pub fn compute(pred: &Image, gt: &Image) -> Result<Self> {
        if !pred.same_geometry(gt) {
            return Err(Error::shape("metrics", "image geometry differs"));
        }
        let mse = mse(&pred.data, &gt.data)?;
        Ok(Self { psnr: capped(psnr_from_mse(mse)), ssim: image_ssim(pred, gt)?, mse })
    }
}

/// Per-frame and mean scores for one subject or sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subject: String,
    pub sequence: String,
    pub frames: Vec<FrameMetrics>,
    pub mean: FrameMetrics,
}

impl MetricReport {
    pub fn new(subject: impl Into<String>, sequence: impl Into<String>, frames: Vec<FrameMetrics>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("metric report needs at least one frame".into()));
        }
        let n = frames.len() as f64;
        let mean = FrameMetrics {
            psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
            ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
            mse: frames.iter().map(|f| f.mse).sum::<f64>() / n,
        };
        Ok(Self { subject: subject.into(), sequence: sequence.into(), frames, mean })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}
