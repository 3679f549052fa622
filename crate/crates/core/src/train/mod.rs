//! The three training stages, with checkpointing, resume and metrics logs.

mod checkpoint;
mod config;
pub mod data;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};

pub use checkpoint::{hash_params, Checkpoint, NamedBlob, OptimizerState, TrainState, FORMAT_VERSION, MAGIC};
pub use config::{Stage, TrainConfig, DEFAULT_CLIP_NORM, DEFAULT_FINETUNE_EPOCHS, DEFAULT_FINETUNE_FRAMES, FULL_SCALE_REFS};
pub use data::{epoch_order, finetune_split, Batch, ReferenceSet, Sample, SampleSet};

use crate::error::{Error, Result};
use crate::losses::{
    coarse_loss, finetune_loss, reconstruction_loss, total_detail_loss, warp_loss, DetailParts, LossWeights,
    PerceptualExtractor, WarpSchedule, WarpWeights, PERCEPTUAL_SEED,
};
use crate::model::{
    Prediction, RerenderModel, Variant, COARSE_PREFIX, DECODER_PREFIX, REFINE_PREFIX, REF_ENCODER_PREFIX,
};
use crate::nn::{clip_grad_norm, Adam, AdamConfig};
use crate::seed;
use crate::synth::{Dataset, Split};
use crate::tensor::Tensor;

/// Parameter prefixes updated by a stage.
pub fn trainable_prefixes(stage: Stage, variant: Variant) -> Vec<&'static str> {
    match (stage, variant) {
        (Stage::Coarse, _) => vec![COARSE_PREFIX],
        (Stage::Detail, _) => vec![REF_ENCODER_PREFIX, REFINE_PREFIX, DECODER_PREFIX],
        (Stage::Finetune, Variant::Full) => vec![COARSE_PREFIX, REFINE_PREFIX, DECODER_PREFIX],
        (Stage::Finetune, Variant::CoarseOnly) => vec![COARSE_PREFIX],
        (Stage::Finetune, Variant::DetailOnly) => vec![REFINE_PREFIX, DECODER_PREFIX],
    }
}

const ALL_PREFIXES: [&str; 4] = [COARSE_PREFIX, REF_ENCODER_PREFIX, REFINE_PREFIX, DECODER_PREFIX];

/// Scalar loss terms of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub parts: Vec<(&'static str, f64)>,
}

/// Warp weights active during one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumRecord {
    pub epoch: usize,
    pub weights: WarpWeights,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub state: TrainState,
    /// Steps run by this invocation.
    pub records: Vec<StepRecord>,
    pub curriculum: Vec<CurriculumRecord>,
    /// `(prefix, hash)` of frozen parameters, checked unchanged at the end.
    pub frozen: Vec<(&'static str, String)>,
    pub steps_per_epoch: usize,
    pub checkpoint: PathBuf,
}

/// Loss of one batch for the given stage. Returns the total and named
/// parts.
pub fn stage_objective(
    stage: Stage,
    pred: &Prediction<f32>,
    batch: &Batch<f32>,
    extractor: Option<&PerceptualExtractor<f32>>,
    weights: &LossWeights,
    warp: WarpWeights,
) -> Result<(Tensor<f32>, Vec<(&'static str, Tensor<f32>)>)> {
    let lc = match &pred.coarse {
        Some(c) => Some(coarse_loss(&c.image, &c.mask, &batch.gt, &batch.mask)?),
        None => None,
    };
    if stage == Stage::Coarse {
        let lc = lc.ok_or_else(|| Error::InvalidArgument("coarse stage without coarse output".into()))?;
        return Ok((lc.clone(), vec![("l_c", lc)]));
    }
    let extractor = extractor.ok_or_else(|| Error::InvalidArgument("perceptual extractor required".into()))?;
    let (vgg, img) = reconstruction_loss(&pred.enhanced, &batch.gt, extractor)?;
    let (warp_img, warp_reg) = match &pred.field {
        Some(f) => warp_loss(&batch.frames.reference, &batch.gt, f, warp)?,
        None => (Tensor::scalar(0.0), Tensor::scalar(0.0)),
    };
    let parts = DetailParts { vgg, img, warp_img, warp_reg };
    let ld = total_detail_loss(&parts, weights, warp)?;
    let mut named = vec![];
    let total = if stage == Stage::Finetune {
        let lc_t = lc.clone().unwrap_or_else(|| Tensor::scalar(0.0));
        named.push(("l_c", lc_t.clone()));
        finetune_loss(&lc_t, &ld, weights)?
    } else {
        ld
    };
    let DetailParts { vgg, img, warp_img, warp_reg } = parts;
    named.extend([("l_vgg", vgg), ("l_img", img), ("l_warp_img", warp_img), ("l_warp_reg", warp_reg)]);
    Ok((total, named))
}

fn part_names(stage: Stage) -> Vec<&'static str> {
    match stage {
        Stage::Coarse => vec!["l_c"],
        Stage::Detail => vec!["l_vgg", "l_img", "l_warp_img", "l_warp_reg"],
        Stage::Finetune => vec!["l_c", "l_vgg", "l_img", "l_warp_img", "l_warp_reg"],
    }
}

/// Appends step rows to the metrics CSV. On resume, rows at or past the
/// resume step are dropped first so the log has no gaps or repeats.
struct MetricsLog {
    path: PathBuf,
    file: fs::File,
}

impl MetricsLog {
    fn open(path: &Path, stage: Stage, start: usize) -> Result<Self> {
        let header = format!("step,stage,epoch,loss_total,{}", part_names(stage).join(","));
        let mut keep = vec![header.clone()];
        if start > 0 {
            if let Ok(old) = fs::read_to_string(path) {
                let mut lines = old.lines();
                if lines.next() == Some(header.as_str()) {
                    keep.extend(
                        lines
                            .filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < start))
                            .map(str::to_string),
                    );
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{}", keep.join("\n")).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    fn row(&mut self, stage: Stage, r: &StepRecord) -> Result<()> {
        let parts: Vec<String> = r.parts.iter().map(|(_, v)| v.to_string()).collect();
        writeln!(self.file, "{},{},{},{},{}", r.step, stage.name(), r.epoch, r.total, parts.join(","))
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn curriculum_path(cfg: &TrainConfig) -> PathBuf {
    let mut p = cfg.checkpoint.clone().into_os_string();
    p.push(".curriculum.csv");
    PathBuf::from(p)
}

fn write_curriculum(path: &Path, rows: &[CurriculumRecord]) -> Result<()> {
    let mut s = String::from("epoch,lambda_c_img,lambda_r_img,lambda_reg\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.weights.coarse, r.weights.refined, r.weights.reg));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a curriculum log written by the detail or fine-tune stage.
pub fn read_curriculum(path: &Path) -> Result<Vec<CurriculumRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| f.get(i).and_then(|s| s.parse::<f64>().ok());
            match (f.first().and_then(|s| s.parse().ok()), num(1), num(2), num(3)) {
                (Some(epoch), Some(coarse), Some(refined), Some(reg)) => {
                    Ok(CurriculumRecord { epoch, weights: WarpWeights { coarse, refined, reg } })
                }
                _ => Err(Error::InvalidArgument(format!("{}: bad curriculum row `{l}`", path.display()))),
            }
        })
        .collect()
}

/// The stage prerequisite a checkpoint passed as `init` must satisfy.
fn check_init(stage: Stage, variant: Variant, ck: &Checkpoint) -> Result<()> {
    let need = match (stage, variant) {
        (Stage::Coarse, _) => return Ok(()),
        (Stage::Detail, _) => Stage::Coarse,
        (Stage::Finetune, Variant::CoarseOnly) => Stage::Coarse,
        (Stage::Finetune, _) => Stage::Detail,
    };
    if ck.state.history.contains(&need) {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "{} stage needs a checkpoint that finished the {} stage (history {:?})",
            stage.name(),
            need.name(),
            ck.state.history
        )))
    }
}

struct Setup {
    model: RerenderModel<f32>,
    optimizer: Adam<f32>,
    state: TrainState,
}

fn setup(cfg: &TrainConfig) -> Result<Setup> {
    let adam = AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() };
    if let Some(path) = &cfg.resume {
        let ck = Checkpoint::load(path)?;
        if ck.state.stage != cfg.stage {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} run, not {}",
                path.display(),
                ck.state.stage.name(),
                cfg.stage.name()
            )));
        }
        if ck.state.seed != cfg.seed {
            return Err(Error::Checkpoint(format!("resume seed {} differs from checkpoint seed {}", cfg.seed, ck.state.seed)));
        }
        let model = ck.build_model()?;
        let mut optimizer = ck.build_optimizer().unwrap_or_else(|| Adam::new(adam));
        optimizer.config = adam;
        return Ok(Setup { model, optimizer, state: ck.state });
    }
    let (mut model_cfg, history, init) = match &cfg.init {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_init(cfg.stage, ck.model.variant, &ck)?;
            (ck.model.clone(), ck.state.history.clone(), Some(ck))
        }
        None => (crate::model::ModelConfig { seed: cfg.seed, ..cfg.model.clone() }, Vec::new(), None),
    };
    model_cfg.alpha = cfg.alpha;
    let model = RerenderModel::new(model_cfg)?;
    if let Some(ck) = init {
        ck.write_params(&model.params)?;
    }
    let state = TrainState { stage: cfg.stage, epoch: 0, step: 0, seed: cfg.seed, history };
    Ok(Setup { model, optimizer: Adam::new(adam), state })
}

fn load_samples(cfg: &TrainConfig, ds: &Dataset) -> Result<SampleSet> {
    if cfg.stage == Stage::Finetune {
        let id = cfg.finetune_subject.as_deref().expect("validated");
        let subject = ds.subject(id)?;
        let (frames, _) = finetune_split(subject.frames, cfg.finetune_frames, cfg.seed)?;
        info!("fine-tuning on {id} frames {frames:?}");
        return SampleSet::load(ds, &[(subject, Some(&frames))], cfg.n_refs);
    }
    let subjects: Vec<_> = if cfg.subjects.is_empty() {
        ds.subjects(Split::Train).collect()
    } else {
        cfg.subjects.iter().map(|s| ds.subject(s)).collect::<Result<_>>()?
    };
    let picks: Vec<_> = subjects.into_iter().map(|s| (s, None)).collect();
    SampleSet::load(ds, &picks, cfg.n_refs)
}

/// Runs `cfg.stage` to completion and writes the final checkpoint.
pub fn run_stage(cfg: &TrainConfig) -> Result<StageReport> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.data)?;
    let samples = load_samples(cfg, &ds)?;
    run_stage_on(cfg, &samples)
}

/// [`run_stage`] over already loaded samples.
pub fn run_stage_on(cfg: &TrainConfig, samples: &SampleSet) -> Result<StageReport> {
    cfg.validate()?;
    let Setup { model, mut optimizer, mut state } = setup(cfg)?;
    let variant = model.config.variant;
    let trainable = trainable_prefixes(cfg.stage, variant);
    for p in ALL_PREFIXES {
        model.params.set_trainable(p, trainable.contains(&p));
    }
    let frozen: Vec<(&'static str, String)> =
        ALL_PREFIXES.iter().filter(|p| !trainable.contains(p)).map(|&p| (p, hash_params(&model.params, p))).collect();
    let params = model.params.trainable();
    let extractor = match cfg.stage {
        Stage::Coarse => None,
        _ => Some(PerceptualExtractor::<f32>::new(PERCEPTUAL_SEED)?),
    };

    let per_epoch = cfg.epoch_items.unwrap_or(samples.len()).min(samples.len());
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.map_or(cfg.epochs * steps_per_epoch, |m| m.min(cfg.epochs * steps_per_epoch));
    info!(
        "{} stage: {} samples, {steps_per_epoch} steps/epoch, steps {}..{total_steps}, {} trainable tensors",
        cfg.stage.name(),
        samples.len(),
        state.step,
        params.len()
    );

    let mut log = MetricsLog::open(&cfg.metrics_path(), cfg.stage, state.step)?;
    let cur_path = curriculum_path(cfg);
    let mut curriculum = if state.step > 0 { read_curriculum(&cur_path).unwrap_or_default() } else { Vec::new() };
    curriculum.retain(|c| c.epoch < state.step.div_ceil(steps_per_epoch.max(1)));
    let mut records = Vec::new();
    let schedule: WarpSchedule = cfg.schedule;
    let mut order: Option<(usize, Vec<usize>)> = None;

    for step in state.step..total_steps {
        let epoch = step / steps_per_epoch;
        let warp = match cfg.stage {
            Stage::Detail => schedule.weights(epoch),
            _ => WarpSchedule::late(),
        };
        if step % steps_per_epoch == 0 && cfg.stage != Stage::Coarse {
            info!("epoch {epoch}: lambda_c_img={} lambda_r_img={} lambda_reg={}", warp.coarse, warp.refined, warp.reg);
            curriculum.push(CurriculumRecord { epoch, weights: warp });
            write_curriculum(&cur_path, &curriculum)?;
        }
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(samples.len(), epoch, cfg.seed, Some(per_epoch))));
        }
        let ord = &order.as_ref().expect("set above").1;
        let b = step % steps_per_epoch;
        let idx = &ord[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(ord.len())];
        let seeds: Vec<u64> = (0..idx.len()).map(|k| seed::derive(cfg.seed, &[0xa06, step as u64, k as u64])).collect();
        let batch = samples.batch::<f32>(idx, cfg.augment.then_some(&seeds[..]))?;

        let abort = |reason: String| Error::Training { step, reason };
        let pred = if cfg.stage == Stage::Coarse {
            let c = model.coarse.forward(&batch.frames.input).map_err(|e| abort(e.to_string()))?;
            Prediction { enhanced: c.image.clone(), coarse: Some(c), field: None, detail: None }
        } else {
            model.forward(&batch.frames).map_err(|e| abort(e.to_string()))?
        };
        let (loss, parts) = stage_objective(cfg.stage, &pred, &batch, extractor.as_ref(), &cfg.loss, warp)
            .map_err(|e| abort(e.to_string()))?;
        let total = loss.item() as f64;
        if !total.is_finite() {
            return Err(abort(format!("non-finite loss {total}")));
        }
        loss.backward().map_err(|e| abort(e.to_string()))?;
        let norm = clip_grad_norm(&params, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(abort(format!("non-finite gradient norm {norm}")));
        }
        optimizer.step(&params)?;
        model.params.zero_grad();

        let r = StepRecord {
            step,
            epoch,
            total,
            parts: parts.iter().map(|(n, t)| (*n, t.item() as f64)).collect(),
        };
        debug!("step {step} loss {total:.6} grad norm {norm:.4}");
        log.row(cfg.stage, &r)?;
        records.push(r);
        state.step = step + 1;
        state.epoch = state.step / steps_per_epoch;
        if cfg.save_every.is_some_and(|k| state.step % k == 0) && state.step < total_steps {
            Checkpoint::capture(&model, Some(&optimizer), state.clone(), PERCEPTUAL_SEED).save(&cfg.checkpoint)?;
        }
    }

    for (p, h) in &frozen {
        if hash_params(&model.params, p) != *h {
            return Err(Error::Training { step: state.step, reason: format!("frozen parameters under `{p}` changed") });
        }
    }
    if state.history.last() != Some(&cfg.stage) {
        state.history.push(cfg.stage);
    }
    for p in ALL_PREFIXES {
        model.params.set_trainable(p, true);
    }
    Checkpoint::capture(&model, Some(&optimizer), state.clone(), PERCEPTUAL_SEED).save(&cfg.checkpoint)?;
    info!("{} stage done after {} steps -> {}", cfg.stage.name(), state.step, cfg.checkpoint.display());
    Ok(StageReport { state, records, curriculum, frozen, steps_per_epoch, checkpoint: cfg.checkpoint.clone() })
}

pub fn train_coarse(cfg: &TrainConfig) -> Result<StageReport> {
    run_stage(&TrainConfig { stage: Stage::Coarse, ..cfg.clone() })
}

pub fn train_detail(cfg: &TrainConfig) -> Result<StageReport> {
    run_stage(&TrainConfig { stage: Stage::Detail, ..cfg.clone() })
}

pub fn finetune(cfg: &TrainConfig) -> Result<StageReport> {
    run_stage(&TrainConfig { stage: Stage::Finetune, ..cfg.clone() })
}
