use super::{BlendRatio, FeaturePyramid, ModelConfig, NUM_KEYPOINTS};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, DownBlock, ParamBuilder, UpBlock};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, same_shape, Tensor};

/// Reference encoder `E_r`, run at full working resolution.
#[derive(Clone, Debug)]
pub struct RefEncoder<T: Scalar> {
    stem: Conv2d<T>,
    down: [DownBlock<T>; 3],
}

impl<T: Scalar> RefEncoder<T> {
    pub fn new(cfg: &ModelConfig, b: &mut ParamBuilder<T>) -> Result<Self> {
        let [c0, c1, c2, c3] = cfg.pyramid_channels();
        Ok(Self {
            stem: Conv2d::new(b, "0", 3, c0, 7)?,
            down: [DownBlock::new(b, "1", c0, c1)?, DownBlock::new(b, "2", c1, c2)?, DownBlock::new(b, "3", c2, c3)?],
        })
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        if image.shape().c() != 3 {
            return Err(Error::shape("encode_reference", format!("expected 3 channels, got {}", image.shape())));
        }
        let l0 = self.stem.forward(image)?.instance_norm()?.relu()?;
        let l1 = self.down[0].forward(&l0)?;
        let l2 = self.down[1].forward(&l1)?;
        let l3 = self.down[2].forward(&l2)?;
        FeaturePyramid::new(vec![l0, l1, l2, l3])
    }
}

/// Quarter-resolution motion: the keypoint-driven coarse part plus the
/// learned residual.
#[derive(Clone, Debug)]
pub struct WarpField<T: Scalar> {
    pub coarse: Tensor<T>,
    pub refine: Tensor<T>,
    pub total: Tensor<T>,
}

impl<T: Scalar> WarpField<T> {
    pub fn new(coarse: Tensor<T>, refine: Tensor<T>) -> Result<Self> {
        let total = coarse.add(&refine)?;
        Ok(Self { coarse, refine, total })
    }
}

/// Residual flow predictor fed with the reference image, its coarse warp and
/// both pose heatmaps, all at quarter resolution. The output layer starts at
/// zero so an untrained net leaves the coarse field untouched.
#[derive(Clone, Debug)]
pub struct RefineNet<T: Scalar> {
    down: [DownBlock<T>; 3],
    up: [UpBlock<T>; 2],
    head: Conv2d<T>,
}

/// Input channels: reference, warped reference, two heatmap stacks.
const REFINE_INPUT: usize = 3 + 3 + 2 * NUM_KEYPOINTS;

impl<T: Scalar> RefineNet<T> {
    pub fn new(cfg: &ModelConfig, b: &mut ParamBuilder<T>) -> Result<Self> {
        let r = cfg.refine_channels;
        Ok(Self {
            down: [
                DownBlock::new(b, "down.0", REFINE_INPUT, r)?,
                DownBlock::new(b, "down.1", r, 2 * r)?,
                DownBlock::new(b, "down.2", 2 * r, 4 * r)?,
            ],
            up: [UpBlock::new(b, "up.0", 4 * r, 2 * r)?, UpBlock::new(b, "up.1", 4 * r, r)?],
            head: Conv2d::zeroed(b, "head", 2 * r + REFINE_INPUT, 2, 3)?,
        })
    }

    pub fn forward(
        &self,
        reference_q: &Tensor<T>,
        warped_q: &Tensor<T>,
        heat_input: &Tensor<T>,
        heat_reference: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let s = reference_q.shape();
        for t in [warped_q, heat_input, heat_reference] {
            if t.shape().n() != s.n() || t.shape().h() != s.h() || t.shape().w() != s.w() {
                return Err(Error::shape("refine_field", format!("{} vs {s}", t.shape())));
            }
        }
        let x = concat_channels(&[reference_q, warped_q, heat_input, heat_reference])?;
        let d0 = self.down[0].forward(&x)?;
        let d1 = self.down[1].forward(&d0)?;
        let d2 = self.down[2].forward(&d1)?;
        let u0 = self.up[0].forward(&d2)?.relu()?;
        let u1 = self.up[1].forward(&concat_channels(&[&u0, &d1])?)?.relu()?;
        let y = concat_channels(&[&u1, &d0])?.resize(s.h(), s.w())?;
        self.head.forward(&concat_channels(&[&y, &x])?)
    }
}

/// Spatially adaptive normalization: `IN(x) * (1 + gamma(c)) + beta(c)` with
/// the modulation maps predicted from the conditioning features `c`.
#[derive(Clone, Debug)]
pub struct Spade<T: Scalar> {
    shared: Conv2d<T>,
    gamma: Conv2d<T>,
    beta: Conv2d<T>,
}

impl<T: Scalar> Spade<T> {
    pub fn new(b: &mut ParamBuilder<T>, name: &str, channels: usize, cond_channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            shared: Conv2d::new(b, &format!("{name}.shared"), cond_channels, hidden, 3)?,
            gamma: Conv2d::new(b, &format!("{name}.gamma"), hidden, channels, 3)?,
            beta: Conv2d::new(b, &format!("{name}.beta"), hidden, channels, 3)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.shared.forward(cond)?.relu()?;
        let gamma = self.gamma.forward(&a)?;
        let beta = self.beta.forward(&a)?;
        x.instance_norm()?.mul(&gamma.affine(T::one(), T::one())?)?.add(&beta)
    }
}

/// Detail decoder `D_d`. The deepest blended level drives the trunk; the
/// three shallower levels condition one SPADE layer each.
#[derive(Clone, Debug)]
pub struct DetailDecoder<T: Scalar> {
    up: [UpBlock<T>; 3],
    spade: [Spade<T>; 3],
    head: Conv2d<T>,
}

impl<T: Scalar> DetailDecoder<T> {
    pub fn new(cfg: &ModelConfig, b: &mut ParamBuilder<T>) -> Result<Self> {
        let [c0, c1, c2, c3] = cfg.pyramid_channels();
        let h = cfg.spade_hidden;
        Ok(Self {
            up: [UpBlock::new(b, "up.0", c3, c2)?, UpBlock::new(b, "up.1", c2, c1)?, UpBlock::new(b, "up.2", c1, c0)?],
            spade: [
                Spade::new(b, "spade.0", c2, c2, h)?,
                Spade::new(b, "spade.1", c1, c1, h)?,
                Spade::new(b, "spade.2", c0, c0, h)?,
            ],
            // Zero start: the composite begins as the coarse image.
            head: Conv2d::zeroed(b, "head", c0, 3, 3)?,
        })
    }

    pub fn forward(&self, blended: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        let mut y = blended.level(3).clone();
        for i in 0..3 {
            let up = self.up[i].forward(&y)?;
            y = self.spade[i].forward(&up, blended.level(2 - i))?.relu()?;
        }
        self.head.forward(&y)
    }
}

/// Warps every pyramid level with the quarter-resolution field, resized to
/// the level's size. Field values are normalized coordinates, so resizing
/// leaves them unchanged.
pub fn warp_pyramid<T: Scalar>(features: &FeaturePyramid<T>, field: &Tensor<T>) -> Result<FeaturePyramid<T>> {
    let levels = features
        .levels()
        .iter()
        .map(|f| {
            let s = f.shape();
            let flow = if field.shape().h() == s.h() && field.shape().w() == s.w() {
                field.clone()
            } else {
                field.resize(s.h(), s.w())?
            };
            f.grid_sample(&flow)
        })
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(levels)
}

/// `F_b = alpha * F_g + (1 - alpha) * F_w` per level, with guidance levels
/// resized to the warped sizes first. Terms with zero weight are skipped so
/// the endpoints return the other pyramid exactly.
pub fn blend_features<T: Scalar>(
    guidance: &FeaturePyramid<T>,
    warped: &FeaturePyramid<T>,
    alpha: BlendRatio,
) -> Result<FeaturePyramid<T>> {
    let a = alpha.get();
    let levels = guidance
        .levels()
        .iter()
        .zip(warped.levels())
        .map(|(g, w)| {
            let (gs, ws) = (g.shape(), w.shape());
            if gs.c() != ws.c() || gs.n() != ws.n() {
                return Err(Error::shape("blend_features", format!("{gs} vs {ws}")));
            }
            if a == 0.0 {
                return Ok(w.clone());
            }
            let g = if gs.h() == ws.h() && gs.w() == ws.w() { g.clone() } else { g.resize(ws.h(), ws.w())? };
            if a == 1.0 {
                return Ok(g);
            }
            g.scale(T::of(a))?.add(&w.scale(T::of(1.0 - a))?)
        })
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(levels)
}

/// `I_e = clamp(I_c + I_d, 0, 1)`.
pub fn compose_output<T: Scalar>(coarse: &Tensor<T>, detail: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("compose_output", coarse, detail)?;
    coarse.add(detail)?.clamp(T::zero(), T::one())
}
