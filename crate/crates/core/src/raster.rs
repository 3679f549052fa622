//! Planar float images and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Channel-planar (`C x H x W`) image with `f32` samples, nominally in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    /// Every pixel set to `color` (one value per channel).
    pub fn filled(height: usize, width: usize, color: &[f32]) -> Self {
        let mut img = Self::new(color.len(), height, width);
        for (c, &v) in color.iter().enumerate() {
            img.plane_mut(c).fill(v);
        }
        img
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::InvalidArgument(format!(
                "{} samples for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_geometry(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Bilinear sample at continuous pixel position, clamped to the border.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> f32 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = ((xc - x0 as f64) as f32, (yc - y0 as f64) as f32);
        let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
        let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        stack(&[self])
    }

    /// Sample `n` of a batch tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let s = t.shape();
        if n >= s.n() {
            return Err(Error::shape("image_from_tensor", format!("sample {n} of {s}")));
        }
        let len = s.c() * s.hw();
        let data = t.data()[n * len..(n + 1) * len].iter().map(|v| v.to_f32_lossy()).collect();
        Self::from_vec(s.c(), s.h(), s.w(), data)
    }

    /// 8-bit PNG; 1 channel is written as grayscale, 3 as RGB.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_fn(w, h, |x, y| Luma([q(self.get(0, y as usize, x as usize))]))
                .save(path),
            3 => ImageBuffer::<Rgb<u8>, _>::from_fn(w, h, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([q(self.get(0, y, x)), q(self.get(1, y, x)), q(self.get(2, y, x))])
            })
            .save(path),
            c => return Err(Error::InvalidArgument(format!("cannot write a {c}-channel PNG"))),
        };
        res.map_err(|source| Error::Image { path: path.into(), source })
    }

    /// Loads a PNG converted to `channels` (1 or 3) channels.
    pub fn load_png(path: &Path, channels: usize) -> Result<Self> {
        let dynamic = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
        let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
        let mut img = Self::new(channels, h, w);
        match channels {
            1 => {
                let g = dynamic.to_luma8();
                for (i, p) in g.pixels().enumerate() {
                    img.data[i] = p.0[0] as f32 / 255.0;
                }
            }
            3 => {
                let rgb = dynamic.to_rgb8();
                for (i, p) in rgb.pixels().enumerate() {
                    for c in 0..3 {
                        img.data[c * h * w + i] = p.0[c] as f32 / 255.0;
                    }
                }
            }
            c => return Err(Error::InvalidArgument(format!("cannot read a PNG as {c} channels"))),
        }
        Ok(img)
    }
}

/// Stacks same-sized images into an `(N, C, H, W)` tensor.
pub fn stack<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("stack of zero images".into()))?;
    if images.iter().any(|i| !i.same_geometry(first)) {
        return Err(Error::shape("stack", "images differ in size"));
    }
    let data = images.iter().flat_map(|i| i.data.iter().map(|&v| T::of(v as f64))).collect();
    Tensor::from_vec(Shape::new(images.len(), first.channels, first.height, first.width), data)
}

/// Concatenates images side by side; all must have the same height and
/// channel count.
pub fn hconcat(images: &[&Image]) -> Result<Image> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("hconcat of zero images".into()))?;
    if images.iter().any(|i| i.height != first.height || i.channels != first.channels) {
        return Err(Error::shape("hconcat", "images differ in height or channels"));
    }
    let width = images.iter().map(|i| i.width).sum();
    let mut out = Image::new(first.channels, first.height, width);
    let mut x0 = 0;
    for img in images {
        for c in 0..img.channels {
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set(c, y, x0 + x, img.get(c, y, x));
                }
            }
        }
        x0 += img.width;
    }
    Ok(out)
}

/// Stacks images vertically; all must share width and channel count.
pub fn vconcat(images: &[&Image]) -> Result<Image> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("vconcat of zero images".into()))?;
    if images.iter().any(|i| i.width != first.width || i.channels != first.channels) {
        return Err(Error::shape("vconcat", "images differ in width or channels"));
    }
    let height = images.iter().map(|i| i.height).sum();
    let mut out = Image::new(first.channels, height, first.width);
    let mut y0 = 0;
    for img in images {
        for c in 0..img.channels {
            for y in 0..img.height {
                let row = &img.plane(c)[y * img.width..(y + 1) * img.width];
                let start = (c * height + y0 + y) * first.width;
                out.data[start..start + first.width].copy_from_slice(row);
            }
        }
        y0 += img.height;
    }
    Ok(out)
}

/// Replicates a 1-channel image into 3 channels.
pub fn gray_to_rgb(img: &Image) -> Image {
    let mut data = Vec::with_capacity(3 * img.data.len());
    for _ in 0..3 {
        data.extend_from_slice(&img.data);
    }
    Image { channels: 3, height: img.height, width: img.width, data }
}
