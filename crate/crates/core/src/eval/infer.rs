//! Frame-by-frame inference with per-reference feature caching.

use std::collections::HashMap;

use log::info;

use crate::error::{Error, Result};
use crate::model::{BlendRatio, FeaturePyramid, FrameBatch, Prediction, RerenderModel};
use crate::raster::Image;
use crate::synth::ImageFrame;
use crate::tensor::no_grad;
use crate::train::ReferenceSet;

/// Output images of one frame.
#[derive(Clone, Debug)]
pub struct Inference {
    pub coarse: Option<Image>,
    pub mask: Option<Image>,
    /// Unbounded residual `I_d`.
    pub detail: Option<Image>,
    pub enhanced: Image,
    /// Reference chosen for the frame.
    pub reference: usize,
}

impl Inference {
    /// `I_d` mapped to `[0, 1]` by `(I_d + 1) / 2` for viewing.
    pub fn detail_normalized(&self) -> Option<Image> {
        self.detail.as_ref().map(|d| {
            let mut v = d.clone();
            v.data.iter_mut().for_each(|x| *x = ((*x + 1.0) / 2.0).clamp(0.0, 1.0));
            v
        })
    }
}

pub fn prediction_images(pred: &Prediction<f32>, n: usize) -> Result<(Option<Image>, Option<Image>, Option<Image>, Image)> {
    let c = pred.coarse.as_ref().map(|c| Image::from_tensor(&c.image, n)).transpose()?;
    let m = pred.coarse.as_ref().map(|c| Image::from_tensor(&c.mask, n)).transpose()?;
    let d = pred.detail.as_ref().map(|d| Image::from_tensor(d, n)).transpose()?;
    Ok((c, m, d, Image::from_tensor(&pred.enhanced, n)?))
}

/// Runs the model on individual frames of known subjects. Reference
/// pyramids are encoded once per (subject, reference) and reused.
pub struct Pipeline {
    pub model: RerenderModel<f32>,
    pub alpha: BlendRatio,
    refs: HashMap<String, ReferenceSet>,
    cache: HashMap<(String, usize), FeaturePyramid<f32>>,
    pub cache_hits: usize,
    pub cache_misses: usize,
}

impl Pipeline {
    pub fn new(model: RerenderModel<f32>) -> Self {
        let alpha = model.alpha();
        Self { model, alpha, refs: HashMap::new(), cache: HashMap::new(), cache_hits: 0, cache_misses: 0 }
    }

    pub fn add_references(&mut self, set: ReferenceSet) {
        self.cache.retain(|(s, _), _| *s != set.subject);
        self.refs.insert(set.subject.clone(), set);
    }

    pub fn infer(&mut self, frame: &ImageFrame) -> Result<Inference> {
        let refs = self
            .refs
            .get(&frame.subject_id)
            .ok_or_else(|| Error::Dataset(format!("no reference set for subject `{}`", frame.subject_id)))?;
        let r = refs.choose(frame)?;
        let reference = &refs.images[r];
        let batch = FrameBatch {
            input: frame.rendered_input.to_tensor()?,
            reference: reference.image.to_tensor()?,
            input_keypoints: vec![frame.keypoints.clone()],
            reference_keypoints: vec![reference.keypoints.clone()],
        };
        let key = (frame.subject_id.clone(), r);
        let pred = no_grad(|| -> Result<_> {
            if !self.model.config.variant.uses_detail() {
                return self.model.forward_with(&batch, None, self.alpha);
            }
            if self.cache.contains_key(&key) {
                self.cache_hits += 1;
                info!("reference cache hit: subject {} reference {r}", key.0);
            } else {
                self.cache_misses += 1;
                let f = self.model.encode_reference(&batch.reference)?;
                self.cache.insert(key.clone(), f);
            }
            self.model.forward_with(&batch, self.cache.get(&key), self.alpha)
        })?;
        let (coarse, mask, detail, enhanced) = prediction_images(&pred, 0)?;
        Ok(Inference { coarse, mask, detail, enhanced, reference: r })
    }
}
