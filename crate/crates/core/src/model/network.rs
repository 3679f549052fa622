use super::{
    blend_features, coarse_field, compose_output, keypoints_to_heatmaps, warp_pyramid, BlendRatio, CoarseModel,
    CoarseOutput, DetailDecoder, FeaturePyramid, KeypointSet, ModelConfig, RefEncoder, RefineNet, WarpField,
};
use crate::error::{Error, Result};
use crate::nn::{ParamBuilder, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Parameter-name prefixes of the four sub-networks.
pub const COARSE_PREFIX: &str = "coarse.";
pub const REF_ENCODER_PREFIX: &str = "ref_encoder.";
pub const REFINE_PREFIX: &str = "refine.";
pub const DECODER_PREFIX: &str = "decoder.";

/// One batch of network inputs. Every field has the same batch size.
#[derive(Clone, Debug)]
pub struct FrameBatch<T: Scalar> {
    /// `I_i`, `(N, 3, H, W)` in `[0, 1]`.
    pub input: Tensor<T>,
    /// `I_r`, `(N, 3, H, W)` in `[0, 1]`.
    pub reference: Tensor<T>,
    pub input_keypoints: Vec<KeypointSet>,
    pub reference_keypoints: Vec<KeypointSet>,
}

impl<T: Scalar> FrameBatch<T> {
    fn check(&self, cfg: &ModelConfig) -> Result<usize> {
        let n = self.input.shape().n();
        let want = Shape::new(n, 3, cfg.height, cfg.width);
        if self.input.shape() != want || self.reference.shape() != want {
            return Err(Error::shape(
                "frame_batch",
                format!("input {} reference {} expected {want}", self.input.shape(), self.reference.shape()),
            ));
        }
        if self.input_keypoints.len() != n || self.reference_keypoints.len() != n {
            return Err(Error::shape("frame_batch", "keypoint count differs from batch size"));
        }
        Ok(n)
    }
}

/// Everything the losses and the evaluation need from one forward pass.
#[derive(Clone, Debug)]
pub struct Prediction<T: Scalar> {
    pub coarse: Option<CoarseOutput<T>>,
    pub field: Option<WarpField<T>>,
    /// `I_d`, unbounded residual.
    pub detail: Option<Tensor<T>>,
    /// `I_e`.
    pub enhanced: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct RerenderModel<T: Scalar> {
    pub config: ModelConfig,
    pub coarse: CoarseModel<T>,
    pub ref_encoder: RefEncoder<T>,
    pub refine: RefineNet<T>,
    pub decoder: DetailDecoder<T>,
    pub params: ParamSet<T>,
}

impl<T: Scalar> RerenderModel<T> {
    /// Builds every sub-network regardless of the variant, so all variants
    /// share one parameter layout.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut cb = ParamBuilder::new("coarse", config.seed.wrapping_mul(4));
        let mut eb = ParamBuilder::new("ref_encoder", config.seed.wrapping_mul(4) + 1);
        let mut rb = ParamBuilder::new("refine", config.seed.wrapping_mul(4) + 2);
        let mut db = ParamBuilder::new("decoder", config.seed.wrapping_mul(4) + 3);
        let coarse = CoarseModel::new(&config, &mut cb)?;
        let ref_encoder = RefEncoder::new(&config, &mut eb)?;
        let refine = RefineNet::new(&config, &mut rb)?;
        let decoder = DetailDecoder::new(&config, &mut db)?;
        let mut params = cb.finish();
        for b in [eb, rb, db] {
            params.extend(b.finish())?;
        }
        Ok(Self { config, coarse, ref_encoder, refine, decoder, params })
    }

    pub fn alpha(&self) -> BlendRatio {
        BlendRatio::new(self.config.alpha).expect("validated config")
    }

    /// Quarter-resolution `(W_c, W_r)` for a batch.
    pub fn warp_field(&self, batch: &FrameBatch<T>) -> Result<WarpField<T>> {
        let (qh, qw) = self.config.quarter();
        let sigma = self.config.sigma_pixels();
        let heat_i = keypoints_to_heatmaps::<T>(&batch.input_keypoints, qh, qw, sigma)?;
        let heat_r = keypoints_to_heatmaps::<T>(&batch.reference_keypoints, qh, qw, sigma)?;
        // The output grid lives in the input pose, so the weights come from
        // the input heatmaps.
        let wc = coarse_field(&batch.input_keypoints, &batch.reference_keypoints, &heat_i, self.config.background_weight)?;
        let ref_q = batch.reference.avg_pool2()?.avg_pool2()?;
        let warped_q = ref_q.grid_sample(&wc)?;
        let wr = self.refine.forward(&ref_q, &warped_q, &heat_i.tensor, &heat_r.tensor)?;
        WarpField::new(wc, wr)
    }

    pub fn encode_reference(&self, reference: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        self.ref_encoder.forward(reference)
    }

    pub fn forward(&self, batch: &FrameBatch<T>) -> Result<Prediction<T>> {
        self.forward_with(batch, None, self.alpha())
    }

    /// Forward pass with an optional precomputed reference pyramid and an
    /// explicit blend ratio.
    pub fn forward_with(
        &self,
        batch: &FrameBatch<T>,
        reference_features: Option<&FeaturePyramid<T>>,
        alpha: BlendRatio,
    ) -> Result<Prediction<T>> {
        let n = batch.check(&self.config)?;
        let variant = self.config.variant;
        let coarse = if variant.uses_coarse() { Some(self.coarse.forward(&batch.input)?) } else { None };
        if !variant.uses_detail() {
            let c = coarse.expect("coarse branch runs");
            return Ok(Prediction { enhanced: c.image.clone(), coarse: Some(c), field: None, detail: None });
        }
        let owned;
        let fr = match reference_features {
            Some(f) => f,
            None => {
                owned = self.encode_reference(&batch.reference)?;
                &owned
            }
        };
        let field = self.warp_field(batch)?;
        let warped = warp_pyramid(fr, &field.total)?;
        let (detail, enhanced) = self.decode(coarse.as_ref(), warped, alpha, n)?;
        Ok(Prediction { coarse, field: Some(field), detail: Some(detail), enhanced })
    }

    /// Blends warped reference features with the guidance (if any), decodes
    /// `I_d` and composes `I_e`.
    pub fn decode(
        &self,
        coarse: Option<&CoarseOutput<T>>,
        warped: FeaturePyramid<T>,
        alpha: BlendRatio,
        batch: usize,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (blended, base) = match coarse {
            Some(c) => (blend_features(&c.guidance, &warped, alpha)?, c.image.clone()),
            None => {
                let shape = Shape::new(batch, 3, self.config.height, self.config.width);
                (warped, Tensor::full(shape, T::of(self.config.background_level)))
            }
        };
        let detail = self.decoder.forward(&blended)?;
        let enhanced = compose_output(&base, &detail)?;
        Ok((detail, enhanced))
    }

    /// Copy with every weight rounded to half precision and widened back.
    pub fn to_half_precision(&self) -> Result<Self> {
        let copy = Self::new(self.config.clone())?;
        copy.params.copy_from(&self.params)?;
        for p in copy.params.iter() {
            for v in p.tensor.data_mut().iter_mut() {
                *v = T::of(half::f16::from_f64(v.to_f64_lossy()).to_f64());
            }
        }
        Ok(copy)
    }
}
