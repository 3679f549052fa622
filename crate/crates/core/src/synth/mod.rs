//! Procedural paired data: a degraded "rendered input", ground truth, mask
//! and keypoints for every view of every frame, plus clean reference images
//! at canonical poses.

mod dataset;
mod degrade;
mod figure;

use rand::Rng;

pub use dataset::{
    generate_dataset, Dataset, DatasetConfig, FrameEntry, Manifest, RefEntry, Split, SubjectEntry, GENERATOR_VERSION,
};
pub use degrade::{augment, augment_with, blur, degrade, random_similarity, DegradeConfig, Similarity};
pub use figure::{canonical_poses, render_figure, Garment, Pattern, PoseParams, SubjectSpec, BACKGROUND};

use crate::error::Result;
use crate::model::KeypointSet;
use crate::raster::Image;
use crate::seed;

/// One view of one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    pub gt_image: Image,
    pub gt_mask: Image,
    pub rendered_input: Image,
    pub keypoints: KeypointSet,
    pub view_id: usize,
    pub frame_id: usize,
    pub subject_id: String,
}

/// A clean reference image of a subject.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceImage {
    pub image: Image,
    pub mask: Image,
    pub keypoints: KeypointSet,
    pub view_id: usize,
    pub pose: String,
    pub subject_id: String,
}

/// Poses of a smooth random motion: random key poses every `KEY_SPACING`
/// frames joined by smoothstep blends.
pub fn motion_sequence(seed: u64, frames: usize) -> Vec<PoseParams> {
    const KEY_SPACING: usize = 6;
    let mut rng = seed::rng(seed, &[0x5e9]);
    let keys: Vec<PoseParams> = (0..frames / KEY_SPACING + 2).map(|_| PoseParams::random(&mut rng)).collect();
    // Consume one draw so sequences of different lengths stay distinct.
    let _: u8 = rng.random();
    (0..frames)
        .map(|f| {
            let (k, r) = (f / KEY_SPACING, (f % KEY_SPACING) as f64 / KEY_SPACING as f64);
            let t = r * r * (3.0 - 2.0 * r);
            keys[k].lerp(&keys[k + 1], t)
        })
        .collect()
}

/// Renders and degrades one frame in memory.
#[allow(clippy::too_many_arguments)]
pub fn make_frame(
    subject_id: &str,
    spec: &SubjectSpec,
    pose: &PoseParams,
    frame_id: usize,
    view: usize,
    n_views: usize,
    height: usize,
    width: usize,
    degrade_cfg: &DegradeConfig,
    degrade_seed: u64,
) -> Result<ImageFrame> {
    let (gt, mask, keypoints) = render_figure(spec, pose, view, n_views, height, width)?;
    let rendered_input = degrade(&gt, &mask, degrade_cfg, degrade_seed)?;
    Ok(ImageFrame {
        gt_image: gt,
        gt_mask: mask,
        rendered_input,
        keypoints,
        view_id: view,
        frame_id,
        subject_id: subject_id.to_string(),
    })
}
