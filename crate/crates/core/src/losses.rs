//! Training objectives and the warp-loss curriculum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WarpField;
use crate::nn::{Conv2d, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::{mean_abs_diff, same_shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r_vgg: f64,
    pub lambda_r_img: f64,
    pub lambda_w_img: f64,
    /// Applied only while the warp curriculum is active.
    pub lambda_w_reg: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_r_vgg: 0.9, lambda_r_img: 0.1, lambda_w_img: 1.0, lambda_w_reg: 1.0, lambda_c: 0.5, lambda_d: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_r_vgg, self.lambda_r_img, self.lambda_w_img, self.lambda_w_reg, self.lambda_c, self.lambda_d];
        if all.iter().all(|&w| w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("loss weights must be non-negative: {all:?}")))
        }
    }
}

/// `mean|I_c - I_gt| + mean|M_c - M_gt|`.
pub fn coarse_loss<T: Scalar>(image: &Tensor<T>, mask: &Tensor<T>, gt_image: &Tensor<T>, gt_mask: &Tensor<T>) -> Result<Tensor<T>> {
    mean_abs_diff(image, gt_image)?.add(&mean_abs_diff(mask, gt_mask)?)
}

/// Fixed random convolutional feature pyramid used in place of a pretrained
/// classifier for the perceptual loss.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor<T: Scalar> {
    stages: Vec<Conv2d<T>>,
    seed: u64,
}

pub const PERCEPTUAL_CHANNELS: [usize; 5] = [16, 32, 64, 128, 256];
pub const PERCEPTUAL_SEED: u64 = 0x5eed_1ce;
/// Input scales of the multi-scale loss, as repeated 2x poolings.
pub const PERCEPTUAL_SCALES: usize = 3;

impl<T: Scalar> PerceptualExtractor<T> {
    pub fn new(seed: u64) -> Result<Self> {
        let mut b = ParamBuilder::new("perceptual", seed);
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(PERCEPTUAL_CHANNELS.len());
        for (i, &c) in PERCEPTUAL_CHANNELS.iter().enumerate() {
            stages.push(Conv2d::with_stride(&mut b, &format!("{i}"), c_in, c, 3, 2)?);
            c_in = c;
        }
        for p in b.finish().iter() {
            p.tensor.set_requires_grad(false);
        }
        Ok(Self { stages, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Post-ReLU output of every stage.
    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut y = x.clone();
        for s in &self.stages {
            y = s.forward(&y)?.relu()?;
            out.push(y.clone());
        }
        Ok(out)
    }
}

/// `(L_r^vgg, L_r^img)`. The feature term sums stage-wise L1 distances over
/// the full, half and quarter resolution inputs.
pub fn reconstruction_loss<T: Scalar>(
    enhanced: &Tensor<T>,
    gt: &Tensor<T>,
    extractor: &PerceptualExtractor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    same_shape("reconstruction_loss", enhanced, gt)?;
    let img = mean_abs_diff(enhanced, gt)?;
    let (mut a, mut b) = (enhanced.clone(), gt.clone());
    let mut vgg: Option<Tensor<T>> = None;
    for scale in 0..PERCEPTUAL_SCALES {
        if scale > 0 {
            a = a.avg_pool2()?;
            b = b.avg_pool2()?;
        }
        for (fa, fb) in extractor.features(&a)?.iter().zip(extractor.features(&b)?.iter()) {
            let term = mean_abs_diff(fa, fb)?;
            vgg = Some(match vgg {
                Some(v) => v.add(&term)?,
                None => term,
            });
        }
    }
    Ok((vgg.expect("at least one stage"), img))
}

/// Active warp-loss weights for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpWeights {
    /// `lambda_c^img`, weight of the coarse-field-only warp.
    pub coarse: f64,
    /// `lambda_r^img`, weight of the full-field warp.
    pub refined: f64,
    /// `lambda_reg`, weight of the refine-field magnitude penalty.
    pub reg: f64,
}

/// Curriculum that shifts the image warping loss from the coarse field to
/// the full field and then drops the regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpSchedule {
    pub ramp_start: usize,
    pub curriculum_end: usize,
}

impl Default for WarpSchedule {
    fn default() -> Self {
        Self { ramp_start: 5, curriculum_end: 15 }
    }
}

impl WarpSchedule {
    pub fn weights(&self, epoch: usize) -> WarpWeights {
        if epoch >= self.curriculum_end {
            return Self::late();
        }
        let refined = if epoch < self.ramp_start { 0.0 } else { 0.5 + (epoch - self.ramp_start) as f64 / 20.0 };
        let refined = refined.min(1.0);
        WarpWeights { coarse: 1.0 - refined, refined, reg: 1.0 }
    }

    /// Weights after the curriculum: full-field warp only.
    pub fn late() -> WarpWeights {
        WarpWeights { coarse: 0.0, refined: 1.0, reg: 0.0 }
    }
}

/// Warps a full-resolution image with a quarter-resolution field.
pub fn warp_image<T: Scalar>(image: &Tensor<T>, field: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    image.grid_sample(&field.resize(s.h(), s.w())?)
}

/// `(L_w^img, L_w^reg)` where the image term mixes the coarse-only and full
/// warps of the reference by the curriculum weights and the regularizer is
/// `mean|W_r|`. Zero-weight terms are not evaluated.
pub fn warp_loss<T: Scalar>(
    reference: &Tensor<T>,
    gt: &Tensor<T>,
    field: &WarpField<T>,
    weights: WarpWeights,
) -> Result<(Tensor<T>, Tensor<T>)> {
    same_shape("warp_loss", reference, gt)?;
    let mut img: Option<Tensor<T>> = None;
    for (w, f) in [(weights.coarse, &field.coarse), (weights.refined, &field.total)] {
        if w == 0.0 {
            continue;
        }
        let term = mean_abs_diff(&warp_image(reference, f)?, gt)?.scale(T::of(w))?;
        img = Some(match img {
            Some(v) => v.add(&term)?,
            None => term,
        });
    }
    let img = img.unwrap_or_else(|| Tensor::scalar(T::zero()));
    Ok((img, field.refine.abs()?.mean()?))
}

/// The four detail-stage loss terms before weighting.
#[derive(Clone, Debug)]
pub struct DetailParts<T: Scalar> {
    pub vgg: Tensor<T>,
    pub img: Tensor<T>,
    pub warp_img: Tensor<T>,
    pub warp_reg: Tensor<T>,
}

/// `L_d`. The regularizer counts only while `warp.reg` is nonzero.
pub fn total_detail_loss<T: Scalar>(parts: &DetailParts<T>, w: &LossWeights, warp: WarpWeights) -> Result<Tensor<T>> {
    let mut total = parts
        .vgg
        .scale(T::of(w.lambda_r_vgg))?
        .add(&parts.img.scale(T::of(w.lambda_r_img))?)?
        .add(&parts.warp_img.scale(T::of(w.lambda_w_img))?)?;
    let reg = w.lambda_w_reg * warp.reg;
    if reg != 0.0 {
        total = total.add(&parts.warp_reg.scale(T::of(reg))?)?;
    }
    Ok(total)
}

/// `L_f = lambda_c * L_c + lambda_d * L_d`.
pub fn finetune_loss<T: Scalar>(coarse: &Tensor<T>, detail: &Tensor<T>, w: &LossWeights) -> Result<Tensor<T>> {
    coarse.scale(T::of(w.lambda_c))?.add(&detail.scale(T::of(w.lambda_d))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn schedule_values() {
        let sch = WarpSchedule::default();
        assert_eq!(sch.weights(0), WarpWeights { coarse: 1.0, refined: 0.0, reg: 1.0 });
        assert_eq!(sch.weights(5).refined, 0.5);
        assert_eq!(sch.weights(10), WarpWeights { coarse: 0.25, refined: 0.75, reg: 1.0 });
        assert_eq!(sch.weights(15), WarpWeights { coarse: 0.0, refined: 1.0, reg: 0.0 });
        assert_eq!(sch.weights(40), WarpSchedule::late());
    }

    #[test]
    fn weighted_sums() {
        let w = LossWeights::default();
        let parts = DetailParts { vgg: s(1.0), img: s(1.0), warp_img: s(1.0), warp_reg: s(1.0) };
        let sch = WarpSchedule::default();
        assert!((total_detail_loss(&parts, &w, sch.weights(3)).unwrap().item() - 3.0).abs() < 1e-12);
        assert!((total_detail_loss(&parts, &w, sch.weights(15)).unwrap().item() - 2.0).abs() < 1e-12);
        assert_eq!(finetune_loss(&s(2.0), &s(1.0), &w).unwrap().item(), 2.0);
        assert_eq!(finetune_loss(&s(0.0), &s(0.0), &w).unwrap().item(), 0.0);
    }

    #[test]
    fn coarse_loss_offset() {
        let sh = Shape::new(1, 3, 4, 4);
        let gt = Tensor::<f64>::full(sh, 0.5);
        let m = Tensor::<f64>::full(sh.with_c(1), 1.0);
        let l = coarse_loss(&Tensor::full(sh, 0.6), &m, &gt, &m).unwrap().item();
        assert!((l - 0.1).abs() < 1e-12);
        assert_eq!(coarse_loss(&gt, &m, &gt, &m).unwrap().item(), 0.0);
    }

    #[test]
    fn reconstruction_of_identical_images_is_zero() {
        let ext = PerceptualExtractor::<f32>::new(PERCEPTUAL_SEED).unwrap();
        let x = Tensor::<f32>::full(Shape::new(1, 3, 32, 16), 0.3);
        let (vgg, img) = reconstruction_loss(&x, &x, &ext).unwrap();
        assert_eq!((vgg.item(), img.item()), (0.0, 0.0));
        let y = Tensor::<f32>::full(Shape::new(1, 3, 32, 16), 0.55);
        assert!((reconstruction_loss(&y, &x, &ext).unwrap().1.item() - 0.25).abs() < 1e-6);
    }
}
