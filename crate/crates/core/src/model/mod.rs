//! The two-branch re-rendering network.

mod coarse;
mod detail;
pub mod keypoints;
mod network;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use coarse::{binarize_mask, CoarseModel, CoarseOutput};
pub use detail::{blend_features, compose_output, warp_pyramid, DetailDecoder, RefEncoder, RefineNet, Spade, WarpField};
pub use keypoints::{coarse_field, keypoints_to_heatmaps, Heatmap, KeypointSet, NUM_KEYPOINTS};
pub use network::{FrameBatch, Prediction, RerenderModel, COARSE_PREFIX, DECODER_PREFIX, REFINE_PREFIX, REF_ENCODER_PREFIX};

/// Number of levels of every feature pyramid.
pub const PYRAMID_LEVELS: usize = 4;

/// Which branches take part in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Coarse + detail branch, blended by alpha.
    Full,
    /// Coarse branch alone; the output is `I_c`.
    CoarseOnly,
    /// Detail branch alone; warped reference features are the only decoder
    /// input and the residual is added to a flat background.
    DetailOnly,
}

impl Variant {
    pub fn uses_coarse(self) -> bool {
        self != Variant::DetailOnly
    }

    pub fn uses_detail(self) -> bool {
        self != Variant::CoarseOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Channels of the shallowest pyramid level; deeper levels double it.
    pub base_channels: usize,
    pub refine_channels: usize,
    pub spade_hidden: usize,
    /// Weight of guidance features in the blend.
    pub alpha: f64,
    /// Heatmap sigma as a fraction of the quarter-resolution height.
    pub heatmap_sigma: f64,
    pub background_weight: f64,
    /// Fill value used in place of `I_c` by [`Variant::DetailOnly`].
    pub background_level: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 64,
            base_channels: 32,
            refine_channels: 32,
            spade_hidden: 32,
            alpha: 0.1,
            heatmap_sigma: 0.05,
            background_weight: 0.1,
            background_level: 0.5,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return bad(format!("working resolution {}x{} must be a positive multiple of 32", self.height, self.width));
        }
        if self.base_channels == 0 || self.refine_channels == 0 || self.spade_hidden == 0 {
            return bad("channel widths must be positive".into());
        }
        BlendRatio::new(self.alpha)?;
        if !(self.heatmap_sigma > 0.0) || !(self.background_weight > 0.0) {
            return bad("heatmap sigma and background weight must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return bad(format!("background level {} outside [0, 1]", self.background_level));
        }
        Ok(())
    }

    pub fn pyramid_channels(&self) -> [usize; PYRAMID_LEVELS] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn quarter(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    /// Heatmap sigma in quarter-resolution pixels.
    pub fn sigma_pixels(&self) -> f64 {
        self.heatmap_sigma * (self.height / 4) as f64
    }
}

/// Blend weight of guidance features, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendRatio(f64);

impl BlendRatio {
    pub fn new(alpha: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(Self(alpha))
        } else {
            Err(Error::InvalidArgument(format!("blend ratio {alpha} outside [0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Four feature maps from shallow to deep, each half the size of the
/// previous one with twice the channels.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Scalar> {
    levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(levels: Vec<Tensor<T>>) -> Result<Self> {
        if levels.len() != PYRAMID_LEVELS {
            return Err(Error::shape("feature_pyramid", format!("{} levels", levels.len())));
        }
        let s0 = levels[0].shape();
        for (i, pair) in levels.windows(2).enumerate() {
            let (a, b) = (pair[0].shape(), pair[1].shape());
            if b.n() != a.n() || b.c() != 2 * a.c() || 2 * b.h() != a.h() || 2 * b.w() != a.w() {
                return Err(Error::shape("feature_pyramid", format!("level {i} {a} -> level {} {b}", i + 1)));
            }
        }
        if s0.c() == 0 {
            return Err(Error::shape("feature_pyramid", "zero channels"));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor<T>] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Tensor<T> {
        &self.levels[i]
    }

    pub fn channels(&self) -> [usize; PYRAMID_LEVELS] {
        std::array::from_fn(|i| self.levels[i].shape().c())
    }

    /// The same values cut off from any differentiation graph.
    pub fn detach(&self) -> Self {
        Self { levels: self.levels.iter().map(Tensor::detach).collect() }
    }
}
