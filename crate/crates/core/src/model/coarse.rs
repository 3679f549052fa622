use super::{FeaturePyramid, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, DownBlock, ParamBuilder, UpBlock};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, Tensor};

/// Small U-Net run at half resolution. Repairs the rendered input and
/// predicts the foreground mask; its encoder activations are the guidance
/// features of the detail branch.
#[derive(Clone, Debug)]
pub struct CoarseModel<T: Scalar> {
    stem: Conv2d<T>,
    down: [DownBlock<T>; 3],
    up: [UpBlock<T>; 3],
    fuse: [Conv2d<T>; 3],
    head: Conv2d<T>,
    height: usize,
    width: usize,
}

#[derive(Clone, Debug)]
pub struct CoarseOutput<T: Scalar> {
    /// `I_c`, 3 channels in (0, 1).
    pub image: Tensor<T>,
    /// `M_c`, 1 channel in (0, 1).
    pub mask: Tensor<T>,
    /// `F_g`.
    pub guidance: FeaturePyramid<T>,
}

impl<T: Scalar> CoarseModel<T> {
    pub fn new(cfg: &ModelConfig, b: &mut ParamBuilder<T>) -> Result<Self> {
        cfg.validate()?;
        let [c0, c1, c2, c3] = cfg.pyramid_channels();
        Ok(Self {
            stem: Conv2d::new(b, "enc.0", 3, c0, 3)?,
            down: [
                DownBlock::new(b, "enc.1", c0, c1)?,
                DownBlock::new(b, "enc.2", c1, c2)?,
                DownBlock::new(b, "enc.3", c2, c3)?,
            ],
            up: [
                UpBlock::new(b, "dec.up.0", c3, c2)?,
                UpBlock::new(b, "dec.up.1", c2, c1)?,
                UpBlock::new(b, "dec.up.2", c1, c0)?,
            ],
            fuse: [
                Conv2d::new(b, "dec.fuse.0", 2 * c2, c2, 3)?,
                Conv2d::new(b, "dec.fuse.1", 2 * c1, c1, 3)?,
                Conv2d::new(b, "dec.fuse.2", 2 * c0, c0, 3)?,
            ],
            head: Conv2d::new(b, "dec.head", c0, 4, 3)?,
            height: cfg.height,
            width: cfg.width,
        })
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<CoarseOutput<T>> {
        let s = input.shape();
        if s.c() != 3 || s.h() != self.height || s.w() != self.width {
            return Err(Error::shape(
                "coarse_forward",
                format!("expected Nx3x{}x{}, got {s}", self.height, self.width),
            ));
        }
        if input.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::InvalidArgument("coarse input values must lie in [0, 1]".into()));
        }
        let x = input.avg_pool2()?;
        let e0 = self.stem.forward(&x)?.instance_norm()?.relu()?;
        let e1 = self.down[0].forward(&e0)?;
        let e2 = self.down[1].forward(&e1)?;
        let e3 = self.down[2].forward(&e2)?;
        let mut y = e3.clone();
        for (i, skip) in [&e2, &e1, &e0].into_iter().enumerate() {
            let up = self.up[i].forward(&y)?;
            y = self.fuse[i].forward(&concat_channels(&[&up, skip])?)?.instance_norm()?.relu()?;
        }
        let out = self.head.forward(&y)?.sigmoid()?.resize(s.h(), s.w())?;
        Ok(CoarseOutput {
            image: out.slice_channels(0, 3)?,
            mask: out.slice_channels(3, 1)?,
            guidance: FeaturePyramid::new(vec![e0, e1, e2, e3])?,
        })
    }
}

/// `1` where `mask > threshold`, else `0`.
pub fn binarize_mask<T: Scalar>(mask: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let t = T::of(threshold);
    let data = mask.data().iter().map(|&v| if v > t { T::one() } else { T::zero() }).collect();
    Tensor::from_vec(mask.shape(), data).expect("same shape")
}
