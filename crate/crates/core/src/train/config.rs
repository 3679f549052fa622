use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, WarpSchedule};
use crate::model::ModelConfig;
use crate::synth::DatasetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Coarse,
    Detail,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Detail => "detail",
            Stage::Finetune => "finetune",
        }
    }
}

/// Number of reference images per subject in the published setup
/// (4 poses x 8 views).
pub const FULL_SCALE_REFS: usize = 32;
pub const DEFAULT_FINETUNE_EPOCHS: usize = 20;
pub const DEFAULT_FINETUNE_FRAMES: usize = 5;
pub const DEFAULT_CLIP_NORM: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on the total number of steps.
    pub max_steps: Option<usize>,
    /// Optional cap on the items drawn per epoch.
    pub epoch_items: Option<usize>,
    pub seed: u64,
    pub alpha: f64,
    /// References considered per subject during selection.
    pub n_refs: usize,
    pub data: PathBuf,
    /// Where the final checkpoint is written.
    pub checkpoint: PathBuf,
    /// Stage input: coarse checkpoint for `detail`, full checkpoint for
    /// `finetune`.
    pub init: Option<PathBuf>,
    /// Continue a run of the same stage from its checkpoint, up to the
    /// step count of this config.
    pub resume: Option<PathBuf>,
    /// Defaults to the checkpoint path with a `.metrics.csv` suffix.
    pub metrics: Option<PathBuf>,
    /// Save an intermediate checkpoint every this many steps.
    pub save_every: Option<usize>,
    pub augment: bool,
    pub clip_norm: f64,
    /// Training subjects; empty means every subject of the training split.
    pub subjects: Vec<String>,
    /// Novel subject adapted to by `finetune`.
    pub finetune_subject: Option<String>,
    pub finetune_frames: usize,
    pub loss: LossWeights,
    pub schedule: WarpSchedule,
    /// Architecture of a freshly initialized model.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Coarse,
            lr: 5e-5,
            weight_decay: 3e-6,
            batch_size: 4,
            epochs: 20,
            max_steps: None,
            epoch_items: None,
            seed: 0,
            alpha: 0.1,
            n_refs: DatasetConfig::default().ref_poses * DatasetConfig::default().views,
            data: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.ckpt"),
            init: None,
            resume: None,
            metrics: None,
            save_every: None,
            augment: true,
            clip_norm: DEFAULT_CLIP_NORM,
            subjects: Vec::new(),
            finetune_subject: None,
            finetune_frames: DEFAULT_FINETUNE_FRAMES,
            loss: LossWeights::default(),
            schedule: WarpSchedule::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self { stage, ..Self::default() }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics.clone().unwrap_or_else(|| {
            let mut p = self.checkpoint.clone().into_os_string();
            p.push(".metrics.csv");
            PathBuf::from(p)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.n_refs == 0 {
            return bad("batch size, epochs and n_refs must be positive".into());
        }
        if self.max_steps == Some(0) || self.epoch_items == Some(0) || self.save_every == Some(0) {
            return bad("step and item caps must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm {} must be positive", self.clip_norm));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        self.loss.validate()?;
        self.model.validate()?;
        match self.stage {
            Stage::Coarse if !self.model.variant.uses_coarse() => {
                bad("the detail-only variant has no coarse stage".into())
            }
            Stage::Detail if !self.model.variant.uses_detail() => {
                bad("the coarse-only variant has no detail stage".into())
            }
            Stage::Detail if self.init.is_none() && self.resume.is_none() && self.model.variant.uses_coarse() => {
                bad("the detail stage needs a coarse checkpoint (init)".into())
            }
            Stage::Finetune if self.init.is_none() && self.resume.is_none() => {
                bad("fine-tuning needs a trained checkpoint (init)".into())
            }
            Stage::Finetune if self.finetune_subject.is_none() => bad("fine-tuning needs finetune_subject".into()),
            Stage::Finetune if self.finetune_frames == 0 => bad("finetune_frames must be positive".into()),
            _ => Ok(()),
        }
    }
}
