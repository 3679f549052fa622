//! Capture-artifact simulation and geometric augmentation.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::figure::BACKGROUND;
use super::ImageFrame;
use crate::error::{Error, Result};
use crate::model::keypoints::{to_normalized, to_pixel};
use crate::model::NUM_KEYPOINTS;
use crate::raster::Image;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    /// Number of holes punched into the figure, at most 6.
    pub hole_count: usize,
    /// Hole semi-axis range in pixels.
    pub hole_radius: (f64, f64),
    pub noise_sigma: f64,
    /// Gaussian blur sigma in pixels.
    pub blur_sigma: f64,
    /// Max shift as a fraction of the width; the same value bounds the
    /// rotation (radians) and the relative scale change.
    pub jitter: f64,
    /// Max relative per-channel gain change.
    pub color_shift: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self { hole_count: 4, hole_radius: (2.0, 5.0), noise_sigma: 0.03, blur_sigma: 1.0, jitter: 0.015, color_shift: 0.08 }
    }
}

impl DegradeConfig {
    /// No degradation at all.
    pub fn none() -> Self {
        Self { hole_count: 0, hole_radius: (0.0, 0.0), noise_sigma: 0.0, blur_sigma: 0.0, jitter: 0.0, color_shift: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let mags = [self.hole_radius.0, self.hole_radius.1, self.noise_sigma, self.blur_sigma, self.jitter, self.color_shift];
        if mags.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) || self.hole_radius.0 > self.hole_radius.1 {
            return Err(Error::InvalidArgument(format!("invalid degradation magnitudes: {self:?}")));
        }
        if self.hole_count > 6 {
            return Err(Error::InvalidArgument(format!("hole_count {} exceeds 6", self.hole_count)));
        }
        Ok(())
    }
}

/// Rotation, isotropic scale and translation about the image centre, in
/// pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub angle: f64,
    pub scale: f64,
    pub shift: [f64; 2],
}

impl Similarity {
    pub fn identity() -> Self {
        Self { angle: 0.0, scale: 1.0, shift: [0.0, 0.0] }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn center(h: usize, w: usize) -> [f64; 2] {
        [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0]
    }

    /// Where source pixel `p` lands.
    pub fn forward(&self, p: [f64; 2], h: usize, w: usize) -> [f64; 2] {
        let c = Self::center(h, w);
        let (s, co) = self.angle.sin_cos();
        let (x, y) = (p[0] - c[0], p[1] - c[1]);
        [c[0] + self.scale * (co * x - s * y) + self.shift[0], c[1] + self.scale * (s * x + co * y) + self.shift[1]]
    }

    /// Source position read by output pixel `q`.
    pub fn inverse(&self, q: [f64; 2], h: usize, w: usize) -> [f64; 2] {
        let c = Self::center(h, w);
        let (s, co) = self.angle.sin_cos();
        let (x, y) = ((q[0] - c[0] - self.shift[0]) / self.scale, (q[1] - c[1] - self.shift[1]) / self.scale);
        [c[0] + co * x + s * y, c[1] - s * x + co * y]
    }

    /// Resamples `img`; samples falling outside read `fill`.
    pub fn warp(&self, img: &Image, fill: &[f32]) -> Image {
        if self.is_identity() {
            return img.clone();
        }
        let (h, w) = (img.height, img.width);
        let mut out = Image::new(img.channels, h, w);
        for y in 0..h {
            for x in 0..w {
                let [sx, sy] = self.inverse([x as f64, y as f64], h, w);
                let inside = sx >= -0.5 && sy >= -0.5 && sx <= w as f64 - 0.5 && sy <= h as f64 - 0.5;
                for c in 0..img.channels {
                    let v = if inside { img.sample(c, sx, sy) } else { fill[c] };
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| (v / s) as f32).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let v: f32 = k.iter().enumerate().map(|(i, kv)| kv * img.get(c, y as usize, (x + i as isize - r).clamp(0, w - 1) as usize)).sum();
                tmp.set(c, y as usize, x as usize, v);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f32 = k.iter().enumerate().map(|(i, kv)| kv * tmp.get(c, (y + i as isize - r).clamp(0, h - 1) as usize, x as usize)).sum();
                out.set(c, y as usize, x as usize, v);
            }
        }
    }
    out
}

/// Simulated rendered input: jitter, blur, holes, noise, colour shift, in
/// that order. Inputs are not modified.
pub fn degrade(gt: &Image, mask: &Image, cfg: &DegradeConfig, seed: u64) -> Result<Image> {
    cfg.validate()?;
    if gt.channels != 3 || mask.channels != 1 || gt.height != mask.height || gt.width != mask.width {
        return Err(Error::InvalidArgument("degrade needs a 3-channel image and a matching mask".into()));
    }
    let mut rng = seed::rng(seed, &[0xde9]);
    let (h, w) = (gt.height, gt.width);
    let mut img = gt.clone();

    if cfg.jitter > 0.0 {
        let j = cfg.jitter;
        let t = Similarity {
            angle: rng.random_range(-j..=j),
            scale: 1.0 + rng.random_range(-j..=j),
            shift: [rng.random_range(-j..=j) * w as f64, rng.random_range(-j..=j) * w as f64],
        };
        img = t.warp(&img, &BACKGROUND);
    }
    img = blur(&img, cfg.blur_sigma);

    let inside: Vec<usize> = (0..h * w).filter(|&i| mask.data[i] > 0.5).collect();
    if !inside.is_empty() {
        for _ in 0..cfg.hole_count {
            let centre = inside[rng.random_range(0..inside.len())];
            let (cy, cx) = ((centre / w) as f64, (centre % w) as f64);
            let (lo, hi) = cfg.hole_radius;
            let (ra, rb) = (rng.random_range(lo..=hi).max(0.5), rng.random_range(lo..=hi).max(0.5));
            let phi = rng.random_range(0.0..PI);
            let (s, c) = phi.sin_cos();
            for &i in &inside {
                let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                let (u, v) = ((c * dx + s * dy) / ra, (-s * dx + c * dy) / rb);
                if u * u + v * v <= 1.0 {
                    for (ch, &b) in BACKGROUND.iter().enumerate() {
                        img.data[ch * h * w + i] = b;
                    }
                }
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("positive sigma");
        for v in img.data.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    if cfg.color_shift > 0.0 {
        for c in 0..3 {
            let gain = 1.0 + rng.random_range(-cfg.color_shift..=cfg.color_shift);
            img.plane_mut(c).iter_mut().for_each(|v| *v = (*v as f64 * gain).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(img)
}

/// Random similarity within +-5% width shift, +-10 degrees, scale 0.9..1.1.
pub fn random_similarity(seed: u64, width: usize) -> Similarity {
    let mut rng = seed::rng(seed, &[0xa09]);
    let max_shift = 0.05 * width as f64;
    Similarity {
        angle: rng.random_range(-10.0f64..=10.0).to_radians(),
        scale: rng.random_range(0.9..=1.1),
        shift: [rng.random_range(-max_shift..=max_shift), rng.random_range(-max_shift..=max_shift)],
    }
}

/// Applies one random similarity to every image of the frame and to its
/// keypoints.
pub fn augment(frame: &ImageFrame, seed: u64) -> ImageFrame {
    augment_with(frame, &random_similarity(seed, frame.gt_image.width))
}

pub fn augment_with(frame: &ImageFrame, t: &Similarity) -> ImageFrame {
    if t.is_identity() {
        return frame.clone();
    }
    let (h, w) = (frame.gt_image.height, frame.gt_image.width);
    let mut mask = t.warp(&frame.gt_mask, &[0.0]);
    mask.data.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
    let mut keypoints = frame.keypoints.clone();
    for k in 0..NUM_KEYPOINTS {
        if !keypoints.visible[k] {
            continue;
        }
        let p = [to_pixel(keypoints.points[k][0], w), to_pixel(keypoints.points[k][1], h)];
        let [x, y] = t.forward(p, h, w);
        let (xi, yi) = (x.round(), y.round());
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            keypoints.visible[k] = false;
        } else {
            keypoints.points[k] = [to_normalized(x, w), to_normalized(y, h)];
        }
    }
    keypoints.normalize_sentinels();
    ImageFrame {
        gt_image: t.warp(&frame.gt_image, &BACKGROUND),
        gt_mask: mask,
        rendered_input: t.warp(&frame.rendered_input, &BACKGROUND),
        keypoints,
        ..frame.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_inverse_round_trips() {
        let t = Similarity { angle: 0.1, scale: 1.05, shift: [1.5, -2.0] };
        let p = [10.0, 40.0];
        let q = t.inverse(t.forward(p, 128, 64), 128, 64);
        assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let mut gt = Image::filled(16, 8, &[0.1, 0.2, 0.9]);
        gt.set(1, 3, 3, 0.7);
        let mask = Image::filled(16, 8, &[1.0]);
        assert_eq!(degrade(&gt, &mask, &DegradeConfig::none(), 9).unwrap(), gt);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(9, 7, &[0.25]);
        for v in blur(&img, 1.3).data {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn validation() {
        let mut c = DegradeConfig::default();
        c.hole_count = 7;
        assert!(c.validate().is_err());
        c = DegradeConfig::default();
        c.noise_sigma = -1.0;
        assert!(c.validate().is_err());
    }
}
