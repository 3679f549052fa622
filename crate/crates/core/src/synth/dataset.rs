//! On-disk dataset layout and manifest.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<subject>/seq/<frame>_<view>.png        rendered input
//! <root>/<subject>/seq/<frame>_<view>_gt.png     ground truth
//! <root>/<subject>/seq/<frame>_<view>_mask.png   foreground mask
//! <root>/<subject>/seq/<frame>_<view>.json       keypoints + metadata
//! <root>/<subject>/ref/<pose>_<view>.png (+ _mask.png, .json)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{canonical_poses, make_frame, motion_sequence, render_figure, DegradeConfig, ImageFrame, PoseParams, ReferenceImage, SubjectSpec};
use crate::error::{Error, Result};
use crate::model::KeypointSet;
use crate::raster::Image;
use crate::seed;

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Training subjects.
    pub subjects: usize,
    /// Additional subjects kept out of training.
    pub heldout: usize,
    pub frames: usize,
    pub views: usize,
    /// Canonical reference poses per subject, each rendered from every view.
    pub ref_poses: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub degrade: DegradeConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            subjects: 4,
            heldout: 2,
            frames: 30,
            views: 8,
            ref_poses: 1,
            height: 128,
            width: 64,
            seed: 0,
            degrade: DegradeConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame: usize,
    pub view: usize,
    pub input: String,
    pub gt: String,
    pub mask: String,
    pub meta: String,
    /// Relative path to hex SHA-256.
    pub sha256: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefEntry {
    pub pose: String,
    pub view: usize,
    pub image: String,
    pub mask: String,
    pub meta: String,
    pub sha256: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub frames: usize,
    pub views: usize,
    pub sequence: Vec<FrameEntry>,
    pub references: Vec<RefEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: u32,
    pub config: DatasetConfig,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    subject: String,
    frame: Option<usize>,
    pose_name: Option<String>,
    view: usize,
    keypoints: Vec<(f64, f64, bool)>,
    pose: PoseParams,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn checksums(root: &Path, files: &[&String]) -> Result<BTreeMap<String, String>> {
    files.iter().map(|f| Ok(((*f).clone(), sha256_hex(&root.join(f))?))).collect()
}

pub fn subject_id(i: usize) -> String {
    format!("subj{i}")
}

/// Degradation seed of one `(subject, frame, view)`.
pub fn frame_seed(global: u64, subject: usize, frame: usize, view: usize) -> u64 {
    seed::derive(global, &[2, subject as u64, frame as u64, view as u64])
}

pub fn subject_seed(global: u64, subject: usize) -> u64 {
    seed::derive(global, &[1, subject as u64])
}

/// Writes the whole dataset under `out` and returns its manifest. The
/// result depends only on `cfg`.
pub fn generate_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    cfg.degrade.validate()?;
    if cfg.subjects + cfg.heldout == 0 || cfg.frames == 0 || cfg.views == 0 {
        return Err(Error::InvalidArgument("dataset needs subjects, frames and views".into()));
    }
    let poses = canonical_poses();
    if cfg.ref_poses == 0 || cfg.ref_poses > poses.len() {
        return Err(Error::InvalidArgument(format!("ref_poses must be in 1..={}", poses.len())));
    }
    let mut subjects = Vec::new();
    for s in 0..cfg.subjects + cfg.heldout {
        let id = subject_id(s);
        let sseed = subject_seed(cfg.seed, s);
        let spec = SubjectSpec::from_seed(sseed);
        for dir in ["seq", "ref"] {
            let d = out.join(&id).join(dir);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let motion = motion_sequence(sseed, cfg.frames);
        let jobs: Vec<(usize, usize)> = (0..cfg.frames).flat_map(|f| (0..cfg.views).map(move |v| (f, v))).collect();
        let sequence = jobs
            .par_iter()
            .map(|&(f, v)| {
                let frame = make_frame(&id, &spec, &motion[f], f, v, cfg.views, cfg.height, cfg.width, &cfg.degrade, frame_seed(cfg.seed, s, f, v))?;
                let stem = format!("{id}/seq/{f:04}_{v}");
                let entry = FrameEntry {
                    frame: f,
                    view: v,
                    input: format!("{stem}.png"),
                    gt: format!("{stem}_gt.png"),
                    mask: format!("{stem}_mask.png"),
                    meta: format!("{stem}.json"),
                    sha256: BTreeMap::new(),
                };
                frame.rendered_input.save_png(&out.join(&entry.input))?;
                frame.gt_image.save_png(&out.join(&entry.gt))?;
                frame.gt_mask.save_png(&out.join(&entry.mask))?;
                let side = Sidecar {
                    subject: id.clone(),
                    frame: Some(f),
                    pose_name: None,
                    view: v,
                    keypoints: frame.keypoints.to_triples(),
                    pose: motion[f].clone(),
                };
                write_json(&out.join(&entry.meta), &side)?;
                let sha256 = checksums(out, &[&entry.input, &entry.gt, &entry.mask, &entry.meta])?;
                Ok(FrameEntry { sha256, ..entry })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut references = Vec::new();
        for (name, pose) in poses.iter().take(cfg.ref_poses) {
            for v in 0..cfg.views {
                let (img, mask, kp) = render_figure(&spec, pose, v, cfg.views, cfg.height, cfg.width)?;
                let stem = format!("{id}/ref/{name}_{v}");
                let entry = RefEntry {
                    pose: name.to_string(),
                    view: v,
                    image: format!("{stem}.png"),
                    mask: format!("{stem}_mask.png"),
                    meta: format!("{stem}.json"),
                    sha256: BTreeMap::new(),
                };
                img.save_png(&out.join(&entry.image))?;
                mask.save_png(&out.join(&entry.mask))?;
                let side = Sidecar {
                    subject: id.clone(),
                    frame: None,
                    pose_name: Some(name.to_string()),
                    view: v,
                    keypoints: kp.to_triples(),
                    pose: pose.clone(),
                };
                write_json(&out.join(&entry.meta), &side)?;
                let sha256 = checksums(out, &[&entry.image, &entry.mask, &entry.meta])?;
                references.push(RefEntry { sha256, ..entry });
            }
        }
        subjects.push(SubjectEntry {
            id,
            seed: sseed,
            split: if s < cfg.subjects { Split::Train } else { Split::Heldout },
            frames: cfg.frames,
            views: cfg.views,
            sequence,
            references,
        });
    }
    let manifest = Manifest { generator_version: GENERATOR_VERSION, config: cfg.clone(), subjects };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// A dataset opened from its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        if !path.exists() {
            return Err(Error::Dataset(format!("no manifest at {}", path.display())));
        }
        let manifest: Manifest = read_json(&path)?;
        if manifest.generator_version != GENERATOR_VERSION {
            return Err(Error::Dataset(format!(
                "generator version {} (expected {GENERATOR_VERSION})",
                manifest.generator_version
            )));
        }
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn subject(&self, id: &str) -> Result<&SubjectEntry> {
        self.manifest
            .subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Dataset(format!("unknown subject `{id}`")))
    }

    pub fn subjects(&self, split: Split) -> impl Iterator<Item = &SubjectEntry> {
        self.manifest.subjects.iter().filter(move |s| s.split == split)
    }

    /// Re-hashes every listed file.
    pub fn verify(&self) -> Result<()> {
        for s in &self.manifest.subjects {
            let sums = s.sequence.iter().map(|f| &f.sha256).chain(s.references.iter().map(|r| &r.sha256));
            for map in sums {
                for (file, want) in map {
                    let got = sha256_hex(&self.root.join(file))?;
                    if &got != want {
                        return Err(Error::Dataset(format!("checksum mismatch for {file}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn keypoints(&self, meta: &str) -> Result<(KeypointSet, Sidecar)> {
        let side: Sidecar = read_json(&self.root.join(meta))?;
        let kp = KeypointSet::from_triples(&side.keypoints).map_err(|e| Error::Dataset(format!("{meta}: {e}")))?;
        Ok((kp, side))
    }

    pub fn load_frame(&self, subject: &SubjectEntry, entry: &FrameEntry) -> Result<ImageFrame> {
        let (keypoints, _) = self.keypoints(&entry.meta)?;
        Ok(ImageFrame {
            gt_image: Image::load_png(&self.root.join(&entry.gt), 3)?,
            gt_mask: Image::load_png(&self.root.join(&entry.mask), 1)?,
            rendered_input: Image::load_png(&self.root.join(&entry.input), 3)?,
            keypoints,
            view_id: entry.view,
            frame_id: entry.frame,
            subject_id: subject.id.clone(),
        })
    }

    pub fn load_reference(&self, subject: &SubjectEntry, entry: &RefEntry) -> Result<ReferenceImage> {
        let (keypoints, _) = self.keypoints(&entry.meta)?;
        Ok(ReferenceImage {
            image: Image::load_png(&self.root.join(&entry.image), 3)?,
            mask: Image::load_png(&self.root.join(&entry.mask), 1)?,
            keypoints,
            view_id: entry.view,
            pose: entry.pose.clone(),
            subject_id: subject.id.clone(),
        })
    }

    /// The first `n` references of a subject in manifest order (poses
    /// outer, views inner).
    pub fn load_references(&self, subject: &SubjectEntry, n: usize) -> Result<Vec<ReferenceImage>> {
        if subject.references.is_empty() {
            return Err(Error::Dataset(format!("subject `{}` has no reference set", subject.id)));
        }
        subject.references.iter().take(n.max(1)).map(|r| self.load_reference(subject, r)).collect()
    }

    /// Finds the sequence entry whose rendered input is `path` (relative to
    /// the root or absolute).
    pub fn find_frame(&self, path: &Path) -> Option<(&SubjectEntry, &FrameEntry)> {
        let canon = |p: &Path| fs::canonicalize(p).ok();
        let target = canon(path).or_else(|| canon(&self.root.join(path)))?;
        self.manifest.subjects.iter().find_map(|s| {
            s.sequence
                .iter()
                .find(|f| canon(&self.root.join(&f.input)).as_deref() == Some(target.as_path()))
                .map(|f| (s, f))
        })
    }
}
