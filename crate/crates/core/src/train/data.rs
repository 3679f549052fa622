//! In-memory training samples with their selected references.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::FrameBatch;
use crate::raster::{stack, Image};
use crate::scalar::Scalar;
use crate::seed;
use crate::selection::{select_reference, Descriptors, ReferenceEntry};
use crate::synth::{augment, Dataset, ImageFrame, ReferenceImage, SubjectEntry};
use crate::tensor::Tensor;

/// The reference images of one subject with their selection descriptors.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    pub subject: String,
    pub images: Vec<ReferenceImage>,
    pub entries: Vec<ReferenceEntry>,
}

impl ReferenceSet {
    pub fn load(ds: &Dataset, subject: &SubjectEntry, n_refs: usize) -> Result<Self> {
        let images = ds.load_references(subject, n_refs)?;
        let entries = images.iter().map(|r| ReferenceEntry::new(&r.image, r.keypoints.clone())).collect::<Result<_>>()?;
        Ok(Self { subject: subject.id.clone(), images, entries })
    }

    /// Best reference for a frame, judged on its rendered input.
    pub fn choose(&self, frame: &ImageFrame) -> Result<usize> {
        let desc = Descriptors::compute(&frame.rendered_input)?;
        Ok(select_reference(&frame.keypoints, &desc, &self.entries)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub frame: ImageFrame,
    /// Index into [`SampleSet::refs`].
    pub ref_set: usize,
    /// Index into that set's images.
    pub reference: usize,
}

/// One assembled batch: network inputs plus supervision.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub frames: FrameBatch<T>,
    pub gt: Tensor<T>,
    pub mask: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub refs: Vec<ReferenceSet>,
}

impl SampleSet {
    /// Loads the chosen frames (`None` = all) of each subject, every view,
    /// and selects a reference for each.
    pub fn load(ds: &Dataset, picks: &[(&SubjectEntry, Option<&[usize]>)], n_refs: usize) -> Result<Self> {
        let mut set = SampleSet::default();
        for (subject, frames) in picks {
            let refs = ReferenceSet::load(ds, subject, n_refs)?;
            let ref_set = set.refs.len();
            let entries: Vec<_> =
                subject.sequence.iter().filter(|e| frames.is_none_or(|f| f.contains(&e.frame))).collect();
            let loaded: Vec<Sample> = entries
                .par_iter()
                .map(|e| {
                    let frame = ds.load_frame(subject, e)?;
                    let reference = refs.choose(&frame)?;
                    Ok(Sample { frame, ref_set, reference })
                })
                .collect::<Result<_>>()?;
            set.samples.extend(loaded);
            set.refs.push(refs);
        }
        if set.samples.is_empty() {
            return Err(Error::Dataset("no frames selected".into()));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn reference(&self, s: &Sample) -> &ReferenceImage {
        &self.refs[s.ref_set].images[s.reference]
    }

    /// Stacks the given samples, each optionally augmented with its own seed.
    pub fn batch<T: Scalar>(&self, idx: &[usize], augment_seeds: Option<&[u64]>) -> Result<Batch<T>> {
        let frames: Vec<ImageFrame> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let f = &self.samples[i].frame;
                match augment_seeds {
                    Some(s) => augment(f, s[k]),
                    None => f.clone(),
                }
            })
            .collect();
        let refs: Vec<&ReferenceImage> = idx.iter().map(|&i| self.reference(&self.samples[i])).collect();
        let pick = |f: fn(&ImageFrame) -> &Image| stack::<T>(&frames.iter().map(f).collect::<Vec<_>>());
        Ok(Batch {
            frames: FrameBatch {
                input: pick(|f| &f.rendered_input)?,
                reference: stack(&refs.iter().map(|r| &r.image).collect::<Vec<_>>())?,
                input_keypoints: frames.iter().map(|f| f.keypoints.clone()).collect(),
                reference_keypoints: refs.iter().map(|r| r.keypoints.clone()).collect(),
            },
            gt: pick(|f| &f.gt_image)?,
            mask: pick(|f| &f.gt_mask)?,
        })
    }
}

/// Sample order of one epoch: a seeded shuffle, truncated to `cap`.
pub fn epoch_order(n: usize, epoch: usize, seed: u64, cap: Option<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[0xe90c, epoch as u64]));
    order.truncate(cap.unwrap_or(n).min(n));
    order
}

/// Splits a sequence into `k` randomly chosen adaptation frames and the
/// remaining evaluation frames, both sorted.
pub fn finetune_split(frames: usize, k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 || frames < k {
        return Err(Error::Dataset(format!("need at least {k} frames for fine-tuning, subject has {frames}")));
    }
    let mut all: Vec<usize> = (0..frames).collect();
    all.shuffle(&mut seed::rng(seed, &[0xf17e]));
    let (mut a, mut b) = (all[..k].to_vec(), all[k..].to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}
