use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use rerender_core::eval::{
    bench_inference, evaluate, heldout_samples, line_plot, run_ablation, sweep_alpha, AblationEntry, AblationOptions, Pipeline,
    Precision, DEFAULT_ALPHAS,
};
use rerender_core::gradcheck;
use rerender_core::losses::{LossWeights, WarpSchedule};
use rerender_core::model::{BlendRatio, ModelConfig, RerenderModel, Variant};
use rerender_core::synth::{generate_dataset, Dataset, DatasetConfig, DegradeConfig, Split};
use rerender_core::train::{run_stage, Checkpoint, ReferenceSet, SampleSet, Stage, TrainConfig};

const THREADS_ENV: &str = "RERENDER_PI_THREADS";

/// Bad settings; reported like a command-line usage error.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "rerender-pi", version, about = "Pose-guided re-rendering: data, training, inference and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
    },
    /// Train the coarse branch.
    TrainCoarse {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the detail branch on top of a coarse checkpoint.
    TrainDetail {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Adapt a trained model to a novel subject.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Re-render one frame or a whole sequence.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        /// Rendered input frame inside a dataset.
        #[arg(long)]
        frame: Option<PathBuf>,
        /// Subject whose sequence is processed frame by frame.
        #[arg(long)]
        sequence: Option<String>,
        /// Restrict a sequence to one camera view.
        #[arg(long)]
        view: Option<usize>,
    },
    /// Score a checkpoint on held-out frames.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Fine-tune full, coarse-only and detail-only models and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        full: Option<PathBuf>,
        #[arg(long)]
        coarse_only: Option<PathBuf>,
        #[arg(long)]
        detail_only: Option<PathBuf>,
        /// Evaluate the given checkpoints as they are.
        #[arg(long)]
        no_finetune: Option<bool>,
    },
    /// Evaluate a model over a range of blend ratios.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        /// Comma-separated blend ratios.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// Fine-tune `--init` once per ratio instead of re-running inference.
        #[arg(long)]
        refinetune: Option<bool>,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Time the inference stages on one frame.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        precision: Option<String>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seeds: Option<usize>,
    },
}

#[derive(Args, Serialize)]
struct Common {
    /// Flat JSON file of settings; flags override it.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct DataFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    subjects: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    heldout: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    views: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ref_poses: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    hole_count: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_sigma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    blur_sigma: Option<f64>,
}

#[derive(Args, Serialize)]
struct ModelFlags {
    /// full, coarse_only or detail_only.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    base_channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    refine_channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    spade_hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

#[derive(Args, Serialize)]
struct TrainFlags {
    /// Output checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    init: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    resume: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    subject: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epoch_items: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    save_every: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    augment: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_refs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    finetune_frames: Option<usize>,
}

#[derive(Args, Serialize)]
struct EvalFlags {
    /// Model checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ckpt: Option<PathBuf>,
    /// Held-out subject; all of them when omitted.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    subject: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_refs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    finetune_frames: Option<usize>,
}

/// Every tunable in one flat namespace. Config files and flags use the
/// same keys.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Settings {
    seed: u64,
    data: PathBuf,
    out: PathBuf,

    subjects: usize,
    heldout: usize,
    frames: usize,
    views: usize,
    ref_poses: usize,
    height: usize,
    width: usize,
    hole_count: usize,
    hole_radius_min: f64,
    hole_radius_max: f64,
    noise_sigma: f64,
    blur_sigma: f64,
    jitter: f64,
    color_shift: f64,

    variant: Variant,
    base_channels: usize,
    refine_channels: usize,
    spade_hidden: usize,
    alpha: Option<f64>,
    heatmap_sigma: f64,
    background_weight: f64,
    background_level: f64,

    ckpt: Option<PathBuf>,
    init: Option<PathBuf>,
    resume: Option<PathBuf>,
    subject: Option<String>,
    train_subjects: Vec<String>,
    lr: f64,
    weight_decay: f64,
    batch_size: usize,
    epochs: usize,
    steps: Option<usize>,
    epoch_items: Option<usize>,
    save_every: Option<usize>,
    augment: bool,
    clip_norm: f64,
    n_refs: usize,
    finetune_frames: usize,
    lambda_r_vgg: f64,
    lambda_r_img: f64,
    lambda_w_img: f64,
    lambda_w_reg: f64,
    lambda_c: f64,
    lambda_d: f64,
    ramp_start: usize,
    curriculum_end: usize,

    full: Option<PathBuf>,
    coarse_only: Option<PathBuf>,
    detail_only: Option<PathBuf>,
    no_finetune: bool,
    alphas: Vec<f64>,
    refinetune: bool,
    precision: Precision,
    warmup: usize,
    iters: usize,
    seeds: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let d = DatasetConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let w = LossWeights::default();
        let s = WarpSchedule::default();
        Self {
            seed: 0,
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            subjects: d.subjects,
            heldout: d.heldout,
            frames: d.frames,
            views: d.views,
            ref_poses: d.ref_poses,
            height: d.height,
            width: d.width,
            hole_count: d.degrade.hole_count,
            hole_radius_min: d.degrade.hole_radius.0,
            hole_radius_max: d.degrade.hole_radius.1,
            noise_sigma: d.degrade.noise_sigma,
            blur_sigma: d.degrade.blur_sigma,
            jitter: d.degrade.jitter,
            color_shift: d.degrade.color_shift,
            variant: m.variant,
            base_channels: m.base_channels,
            refine_channels: m.refine_channels,
            spade_hidden: m.spade_hidden,
            alpha: None,
            heatmap_sigma: m.heatmap_sigma,
            background_weight: m.background_weight,
            background_level: m.background_level,
            ckpt: None,
            init: None,
            resume: None,
            subject: None,
            train_subjects: Vec::new(),
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            steps: None,
            epoch_items: None,
            save_every: None,
            augment: t.augment,
            clip_norm: t.clip_norm,
            n_refs: t.n_refs,
            finetune_frames: t.finetune_frames,
            lambda_r_vgg: w.lambda_r_vgg,
            lambda_r_img: w.lambda_r_img,
            lambda_w_img: w.lambda_w_img,
            lambda_w_reg: w.lambda_w_reg,
            lambda_c: w.lambda_c,
            lambda_d: w.lambda_d,
            ramp_start: s.ramp_start,
            curriculum_end: s.curriculum_end,
            full: None,
            coarse_only: None,
            detail_only: None,
            no_finetune: false,
            alphas: DEFAULT_ALPHAS.to_vec(),
            refinetune: false,
            precision: Precision::F32,
            warmup: 5,
            iters: 50,
            seeds: gradcheck::DEFAULT_SEEDS,
        }
    }
}

impl Settings {
    fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            subjects: self.subjects,
            heldout: self.heldout,
            frames: self.frames,
            views: self.views,
            ref_poses: self.ref_poses,
            height: self.height,
            width: self.width,
            seed: self.seed,
            degrade: DegradeConfig {
                hole_count: self.hole_count,
                hole_radius: (self.hole_radius_min, self.hole_radius_max),
                noise_sigma: self.noise_sigma,
                blur_sigma: self.blur_sigma,
                jitter: self.jitter,
                color_shift: self.color_shift,
            },
        }
    }

    fn train(&self, stage: Stage) -> TrainConfig {
        let alpha = self.alpha.unwrap_or(ModelConfig::default().alpha);
        TrainConfig {
            stage,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: self.steps,
            epoch_items: self.epoch_items,
            seed: self.seed,
            alpha,
            n_refs: self.n_refs,
            data: self.data.clone(),
            checkpoint: self.ckpt.clone().unwrap_or_else(|| self.out.join(format!("{}.ckpt", stage.name()))),
            init: self.init.clone(),
            resume: self.resume.clone(),
            metrics: None,
            save_every: self.save_every,
            augment: self.augment,
            clip_norm: self.clip_norm,
            subjects: self.train_subjects.clone(),
            finetune_subject: self.subject.clone(),
            finetune_frames: self.finetune_frames,
            loss: LossWeights {
                lambda_r_vgg: self.lambda_r_vgg,
                lambda_r_img: self.lambda_r_img,
                lambda_w_img: self.lambda_w_img,
                lambda_w_reg: self.lambda_w_reg,
                lambda_c: self.lambda_c,
                lambda_d: self.lambda_d,
            },
            schedule: WarpSchedule { ramp_start: self.ramp_start, curriculum_end: self.curriculum_end },
            model: ModelConfig {
                height: self.height,
                width: self.width,
                base_channels: self.base_channels,
                refine_channels: self.refine_channels,
                spade_hidden: self.spade_hidden,
                alpha,
                heatmap_sigma: self.heatmap_sigma,
                background_weight: self.background_weight,
                background_level: self.background_level,
                variant: self.variant,
                seed: self.seed,
            },
        }
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.ckpt.as_deref().ok_or_else(|| anyhow!("--ckpt is required"))
    }

    /// Loads a model, applying an `alpha` override.
    fn model(&self) -> Result<RerenderModel<f32>> {
        let path = self.checkpoint()?;
        let mut ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(a) = self.alpha {
            ck.model.alpha = a;
        }
        Ok(ck.build_model()?)
    }
}

/// Builds the settings from defaults, the config file and flags, in that
/// order of increasing precedence.
fn resolve(common: &Common, groups: &[Value]) -> Result<Settings> {
    let mut map = match serde_json::to_value(Settings::default())? {
        Value::Object(m) => m,
        _ => unreachable!(),
    };
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Map<String, Value> =
            serde_json::from_str(&text).with_context(|| format!("{} must be a flat JSON object", path.display()))?;
        map.extend(file);
    }
    for g in std::iter::once(&serde_json::to_value(common)?).chain(groups) {
        if let Value::Object(m) = g {
            map.extend(m.clone());
        }
    }
    serde_json::from_value(Value::Object(map)).context("invalid settings")
}

fn write_resolved(s: &Settings) -> Result<()> {
    fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;
    let path = s.out.join("config.resolved.json");
    fs::write(&path, serde_json::to_string_pretty(s)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn open_dataset(s: &Settings) -> Result<Dataset> {
    Dataset::open(&s.data).with_context(|| format!("opening dataset {}", s.data.display()))
}

/// Held-out subjects to evaluate: the named one or the whole split.
fn eval_subjects(ds: &Dataset, s: &Settings) -> Result<Vec<String>> {
    match &s.subject {
        Some(id) => Ok(vec![ds.subject(id)?.id.clone()]),
        None => {
            let ids: Vec<String> = ds.subjects(Split::Heldout).map(|e| e.id.clone()).collect();
            if ids.is_empty() {
                bail!("dataset has no held-out subjects; pass --subject");
            }
            Ok(ids)
        }
    }
}

fn train(s: &Settings, stage: Stage) -> Result<()> {
    let mut cfg = s.train(stage);
    // A fresh model is built at the dataset's resolution.
    let ds = open_dataset(s)?;
    cfg.model.height = ds.manifest.config.height;
    cfg.model.width = ds.manifest.config.width;
    let report = run_stage(&cfg)?;
    let last = report.records.last().map_or(f64::NAN, |r| r.total);
    println!(
        "{} stage: {} steps ({} per epoch), final loss {last:.5}, checkpoint {}",
        stage.name(),
        report.records.len(),
        report.steps_per_epoch,
        report.checkpoint.display()
    );
    Ok(())
}

fn infer(s: &Settings, frame: Option<&Path>, sequence: Option<&str>, view: Option<usize>) -> Result<()> {
    let mut data = s.data.clone();
    if let Some(f) = frame {
        if !data.join("manifest.json").exists() {
            if let Some(root) = f.ancestors().skip(1).find(|a| a.join("manifest.json").exists()) {
                data = root.to_path_buf();
            }
        }
    }
    let ds = Dataset::open(&data).with_context(|| format!("opening dataset {}", data.display()))?;
    let entries: Vec<_> = match (frame, sequence) {
        (Some(f), None) => {
            let (subj, entry) = ds.find_frame(f).ok_or_else(|| anyhow!("{} is not a frame of {}", f.display(), data.display()))?;
            vec![(subj, entry)]
        }
        (None, Some(id)) => {
            let subj = ds.subject(id)?;
            subj.sequence.iter().filter(|e| view.is_none_or(|v| e.view == v)).map(|e| (subj, e)).collect()
        }
        _ => bail!("pass exactly one of --frame or --sequence"),
    };
    let mut pipeline = Pipeline::new(s.model()?);
    fs::create_dir_all(&s.out)?;
    let mut loaded: Vec<String> = Vec::new();
    for (subj, entry) in entries {
        if !loaded.contains(&subj.id) {
            pipeline.add_references(ReferenceSet::load(&ds, subj, s.n_refs)?);
            loaded.push(subj.id.clone());
        }
        let f = ds.load_frame(subj, entry)?;
        let inf = pipeline.infer(&f)?;
        let stem = format!("{}_{:04}_{}", subj.id, entry.frame, entry.view);
        let outputs = [("coarse", inf.coarse.clone()), ("detail", inf.detail_normalized()), ("enhanced", Some(inf.enhanced.clone())), ("mask", inf.mask.clone())];
        for (name, img) in outputs {
            if let Some(img) = img {
                img.save_png(&s.out.join(format!("{stem}_{name}.png")))?;
            }
        }
        info!("{stem}: reference {}", inf.reference);
    }
    println!("reference cache: {} hits, {} misses", pipeline.cache_hits, pipeline.cache_misses);
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    subject: String,
    frames: usize,
    input_psnr: f64,
    coarse_psnr: Option<f64>,
    enhanced_psnr: f64,
    input_ssim: f64,
    enhanced_ssim: f64,
}

fn eval(s: &Settings) -> Result<()> {
    let ds = open_dataset(s)?;
    let model = s.model()?;
    let mut rows = Vec::new();
    for id in eval_subjects(&ds, s)? {
        let samples = heldout_samples(&ds, ds.subject(&id)?, s.finetune_frames, s.seed, s.n_refs)?;
        let ev = evaluate(&model, &samples, model.alpha(), &id)?;
        let row = EvalRow {
            subject: id,
            frames: samples.len(),
            input_psnr: ev.input.mean.psnr,
            coarse_psnr: ev.coarse.as_ref().map(|c| c.mean.psnr),
            enhanced_psnr: ev.enhanced.mean.psnr,
            input_ssim: ev.input.mean.ssim,
            enhanced_ssim: ev.enhanced.mean.ssim,
        };
        println!(
            "{}: {} frames, PSNR input {:.2} enhanced {:.2} dB, SSIM input {:.4} enhanced {:.4}",
            row.subject, row.frames, row.input_psnr, row.enhanced_psnr, row.input_ssim, row.enhanced_ssim
        );
        rows.push(row);
    }
    write_json(&s.out.join("eval.json"), &rows)
}

fn ablate(s: &Settings) -> Result<()> {
    let ds = open_dataset(s)?;
    let models = [("full", &s.full), ("coarse_only", &s.coarse_only), ("detail_only", &s.detail_only)];
    if models.iter().all(|m| m.1.is_none()) {
        bail!("pass at least one of --full, --coarse-only, --detail-only");
    }
    let mut entries = Vec::new();
    for id in eval_subjects(&ds, s)? {
        for (name, path) in models {
            let Some(path) = path else { continue };
            let checkpoint = if s.no_finetune {
                path.clone()
            } else {
                let mut cfg = s.train(Stage::Finetune);
                cfg.init = Some(path.clone());
                cfg.finetune_subject = Some(id.clone());
                cfg.model.variant = Checkpoint::load(path)?.model.variant;
                cfg.checkpoint = s.out.join(format!("finetune_{id}_{name}.ckpt"));
                run_stage(&cfg)?;
                cfg.checkpoint
            };
            entries.push(AblationEntry { subject: id.clone(), checkpoint });
        }
    }
    let opts = AblationOptions { finetune_frames: s.finetune_frames, seed: s.seed, n_refs: s.n_refs };
    let table = run_ablation(&ds, &entries, &opts, &s.out)?;
    for config in ["full", "w/o detail", "w/o coarse"] {
        if let Some(p) = table.mean_psnr(config) {
            println!("{config:>11}: {p:.2} dB");
        }
    }
    Ok(())
}

/// One fine-tune per ratio, each scored at its own ratio.
fn refinetune_sweep(s: &Settings, ds: &Dataset, id: &str, samples: &SampleSet, dir: &Path) -> Result<Vec<f64>> {
    let init = s.init.as_ref().ok_or_else(|| anyhow!("--refinetune needs --init"))?;
    fs::create_dir_all(dir)?;
    ds.subject(id)?;
    let mut csv = String::from("alpha,mse,psnr\n");
    let mut psnr = Vec::new();
    for &a in &s.alphas {
        let mut cfg = s.train(Stage::Finetune);
        cfg.init = Some(init.clone());
        cfg.alpha = a;
        cfg.finetune_subject = Some(id.to_string());
        cfg.model.variant = Checkpoint::load(init)?.model.variant;
        cfg.checkpoint = dir.join(format!("finetune_alpha_{a}.ckpt"));
        run_stage(&cfg)?;
        let model: RerenderModel<f32> = Checkpoint::load(&cfg.checkpoint)?.build_model()?;
        let m = evaluate(&model, samples, BlendRatio::new(a)?, id)?.enhanced.mean;
        csv.push_str(&format!("{a},{},{}\n", m.mse, m.psnr));
        psnr.push(m.psnr);
    }
    fs::write(dir.join("alpha_sweep.csv"), csv)?;
    let pts: Vec<(f64, f64)> = s.alphas.iter().copied().zip(psnr.iter().copied()).collect();
    line_plot(&pts, 320, 200).save_png(&dir.join("alpha_sweep.png"))?;
    Ok(psnr)
}

fn sweep(s: &Settings) -> Result<()> {
    let ds = open_dataset(s)?;
    let model = if s.refinetune { None } else { Some(s.model()?) };
    let ids = eval_subjects(&ds, s)?;
    let mut mean = vec![0.0; s.alphas.len()];
    for id in &ids {
        let samples = heldout_samples(&ds, ds.subject(id)?, s.finetune_frames, s.seed, s.n_refs)?;
        let dir = if ids.len() == 1 { s.out.clone() } else { s.out.join(id) };
        let psnr = match &model {
            Some(m) => sweep_alpha(m, &samples, &s.alphas, Some(&dir))?.iter().map(|r| r.psnr).collect(),
            None => refinetune_sweep(s, &ds, id, &samples, &dir)?,
        };
        for (m, p) in mean.iter_mut().zip(&psnr) {
            *m += p / ids.len() as f64;
        }
    }
    let mut csv = String::from("alpha,psnr\n");
    for (a, p) in s.alphas.iter().zip(&mean) {
        println!("alpha {a:<5} {p:.3} dB");
        csv.push_str(&format!("{a},{p}\n"));
    }
    if ids.len() > 1 {
        fs::write(s.out.join("alpha_sweep_mean.csv"), csv)?;
    }
    Ok(())
}

fn bench(s: &Settings) -> Result<()> {
    let ds = open_dataset(s)?;
    let ck = Checkpoint::load(s.checkpoint()?)?;
    let subject = match &s.subject {
        Some(id) => ds.subject(id)?,
        None => ds.manifest.subjects.first().ok_or_else(|| anyhow!("empty dataset"))?,
    };
    let entry = subject.sequence.first().ok_or_else(|| anyhow!("subject {} has no frames", subject.id))?;
    let frame = ds.load_frame(subject, entry)?;
    let refs = ReferenceSet::load(&ds, subject, s.n_refs)?;
    let reference = &refs.images[refs.choose(&frame)?];
    let report = bench_inference(&ck, &frame, reference, s.precision, s.warmup, s.iters)?;
    for (name, ms) in &report.stages {
        println!("{name:>20}: {ms:8.2} ms");
    }
    println!("{:>20}: {:8.2} ms (online {:.2} ms, wall {:.2} ms)", "total", report.total_ms, report.online_ms, report.wall_ms);
    write_json(&s.out.join("bench.json"), &report)
}

fn grad_check(s: &Settings) -> Result<()> {
    let cases = gradcheck::run_all(s.seeds)?;
    let mut failed = 0;
    for c in &cases {
        println!("{} {:<22} seed {} rel {:.2e} ({} elements)", if c.passed() { "ok  " } else { "FAIL" }, c.op, c.seed, c.rel_error, c.elements);
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", cases.len());
    }
    println!("all {} gradient checks passed", cases.len());
    Ok(())
}

fn value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("flag groups serialize")
}

fn run(cli: Cli) -> Result<()> {
    use Command::*;
    let (common, groups): (&Common, Vec<Value>) = match &cli.command {
        GenData { common, data } => (common, vec![value(data)]),
        TrainCoarse { common, model, train } | TrainDetail { common, model, train } => (common, vec![value(model), value(train)]),
        Finetune { common, train } => (common, vec![value(train)]),
        Infer { common, eval, .. } | Eval { common, eval } => (common, vec![value(eval)]),
        Ablate { common, train, full, coarse_only, detail_only, no_finetune } => (
            common,
            vec![
                value(train),
                serde_json::json!({ "full": full, "coarse_only": coarse_only, "detail_only": detail_only }),
                no_finetune.map_or(Value::Null, |b| serde_json::json!({ "no_finetune": b })),
            ],
        ),
        SweepAlpha { common, eval, alphas, refinetune, init } => (
            common,
            vec![value(eval), serde_json::json!({ "alphas": alphas, "refinetune": refinetune, "init": init })],
        ),
        Bench { common, eval, precision, warmup, iters } => {
            let mut extra = Map::new();
            if let Some(p) = precision {
                extra.insert("precision".into(), Value::String(p.clone()));
            }
            if let Some(w) = warmup {
                extra.insert("warmup".into(), (*w).into());
            }
            if let Some(i) = iters {
                extra.insert("iters".into(), (*i).into());
            }
            (common, vec![value(eval), Value::Object(extra)])
        }
        GradCheck { common, seeds } => (common, vec![seeds.map_or(Value::Null, |n| serde_json::json!({ "seeds": n }))]),
    };
    let mut groups = groups;
    // Unset checkpoint paths in the ablation group must not clear config values.
    for g in &mut groups {
        if let Value::Object(m) = g {
            m.retain(|_, v| !v.is_null());
        }
    }
    let s = resolve(common, &groups).map_err(|e| UsageError(format!("{e:#}")))?;
    write_resolved(&s)?;
    match &cli.command {
        GenData { .. } => {
            let m = generate_dataset(&s.dataset(), &s.out)?;
            let frames: usize = m.subjects.iter().map(|e| e.sequence.len()).sum();
            println!("wrote {} subjects, {frames} frames to {}", m.subjects.len(), s.out.display());
            Ok(())
        }
        TrainCoarse { .. } => train(&s, Stage::Coarse),
        TrainDetail { .. } => train(&s, Stage::Detail),
        Finetune { .. } => train(&s, Stage::Finetune),
        Infer { frame, sequence, view, .. } => infer(&s, frame.as_deref(), sequence.as_deref(), *view),
        Eval { .. } => eval(&s),
        Ablate { .. } => ablate(&s),
        SweepAlpha { .. } => sweep(&s),
        Bench { .. } => bench(&s),
        GradCheck { .. } => grad_check(&s),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 1 } else { 2 })
        }
    }
}
