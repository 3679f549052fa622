//! Metrics, evaluation over sample sets, the ablation and alpha-sweep
//! harnesses and the inference benchmark.

mod infer;
pub mod metrics;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use infer::{prediction_images, Inference, Pipeline};
pub use metrics::{
    capped, image_ssim, mse, psnr, psnr_from_mse, ssim, FrameMetrics, MetricReport, PSNR_CAP, SSIM_SIGMA, SSIM_WINDOW,
};

use crate::error::{Error, Result};
use crate::model::{warp_pyramid, BlendRatio, FrameBatch, Prediction, RerenderModel, Variant};
use crate::raster::{gray_to_rgb, hconcat, vconcat, Image};
use crate::synth::{Dataset, ImageFrame, ReferenceImage, SubjectEntry};
use crate::tensor::no_grad;
use crate::train::{finetune_split, Checkpoint, SampleSet};

/// Samples evaluated per forward pass.
const EVAL_BATCH: usize = 8;

pub const DEFAULT_ALPHAS: [f64; 6] = [0.0, 0.05, 0.1, 0.15, 0.5, 1.0];

/// Forward pass over a subset of samples without recording gradients.
pub fn predict(model: &RerenderModel<f32>, samples: &SampleSet, idx: &[usize], alpha: BlendRatio) -> Result<Prediction<f32>> {
    let batch = samples.batch::<f32>(idx, None)?;
    no_grad(|| model.forward_with(&batch.frames, None, alpha))
}

/// Metrics of the rendered input, `I_c` (if produced) and `I_e` against
/// ground truth for every sample.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub input: MetricReport,
    pub coarse: Option<MetricReport>,
    pub enhanced: MetricReport,
}

pub fn evaluate(model: &RerenderModel<f32>, samples: &SampleSet, alpha: BlendRatio, label: &str) -> Result<Evaluation> {
    let (mut inp, mut coarse, mut enh) = (vec![], vec![], vec![]);
    let all: Vec<usize> = (0..samples.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let pred = predict(model, samples, chunk, alpha)?;
        for (k, &i) in chunk.iter().enumerate() {
            let f = &samples.samples[i].frame;
            let (c, _, _, e) = prediction_images(&pred, k)?;
            inp.push(FrameMetrics::compute(&f.rendered_input, &f.gt_image)?);
            if let Some(c) = c {
                coarse.push(FrameMetrics::compute(&c, &f.gt_image)?);
            }
            enh.push(FrameMetrics::compute(&e, &f.gt_image)?);
        }
    }
    Ok(Evaluation {
        input: MetricReport::new(label, "input", inp)?,
        coarse: if coarse.is_empty() { None } else { Some(MetricReport::new(label, "coarse", coarse)?) },
        enhanced: MetricReport::new(label, "enhanced", enh)?,
    })
}

/// Frames of a novel subject not used for its fine-tune.
pub fn heldout_samples(ds: &Dataset, subject: &SubjectEntry, finetune_frames: usize, seed: u64, n_refs: usize) -> Result<SampleSet> {
    let (_, rest) = finetune_split(subject.frames, finetune_frames, seed)?;
    if rest.is_empty() {
        return Err(Error::Dataset(format!("subject `{}` has no frames left after the fine-tune split", subject.id)));
    }
    SampleSet::load(ds, &[(subject, Some(&rest))], n_refs)
}

fn variant_label(v: Variant) -> &'static str {
    match v {
        Variant::Full => "full",
        Variant::CoarseOnly => "w/o detail",
        Variant::DetailOnly => "w/o coarse",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub subject: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Mean PSNR of a configuration over all its subjects.
    pub fn mean_psnr(&self, config: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.config == config).map(|r| r.report.mean.psnr).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,subject,frames,psnr,ssim,mse\n");
        for r in &self.rows {
            let m = &r.report.mean;
            s.push_str(&format!("{},{},{},{},{},{}\n", r.config, r.subject, r.report.frame_count(), m.psnr, m.ssim, m.mse));
        }
        s
    }
}

/// One checkpoint to evaluate on one held-out subject.
#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub subject: String,
    pub checkpoint: PathBuf,
}

pub struct AblationOptions {
    pub finetune_frames: usize,
    pub seed: u64,
    pub n_refs: usize,
}

/// Evaluates every entry on the held-out frames of its subject and writes
/// `ablation.csv`, `ablation.json` and `ablation_grid.png` (input /
/// w/o detail / w/o coarse / full / ground truth, one row per subject).
pub fn run_ablation(ds: &Dataset, entries: &[AblationEntry], opts: &AblationOptions, out: &Path) -> Result<AblationTable> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints to compare".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::new();
    let mut grid: Vec<(String, Variant, Image, Image, Image)> = Vec::new();
    for e in entries {
        if !e.checkpoint.exists() {
            return Err(Error::Checkpoint(format!("missing checkpoint {}", e.checkpoint.display())));
        }
        let model: RerenderModel<f32> = Checkpoint::load(&e.checkpoint)?.build_model()?;
        let subject = ds.subject(&e.subject)?;
        let samples = heldout_samples(ds, subject, opts.finetune_frames, opts.seed, opts.n_refs)?;
        let ev = evaluate(&model, &samples, model.alpha(), &e.subject)?;
        let variant = model.config.variant;
        let pred = predict(&model, &samples, &[0], model.alpha())?;
        let f = &samples.samples[0].frame;
        grid.push((e.subject.clone(), variant, prediction_images(&pred, 0)?.3, f.rendered_input.clone(), f.gt_image.clone()));
        rows.push(AblationRow {
            config: variant_label(variant).to_string(),
            subject: e.subject.clone(),
            report: MetricReport { subject: e.subject.clone(), sequence: "heldout".into(), ..ev.enhanced },
        });
    }
    let table = AblationTable { rows };
    fs::write(out.join("ablation.csv"), table.to_csv()).map_err(|e| Error::io(out.join("ablation.csv"), e))?;
    let json = serde_json::to_string_pretty(&table).map_err(|e| Error::json(out.join("ablation.json"), e))?;
    fs::write(out.join("ablation.json"), json).map_err(|e| Error::io(out.join("ablation.json"), e))?;

    let mut subjects: Vec<&String> = Vec::new();
    for g in &grid {
        if !subjects.contains(&&g.0) {
            subjects.push(&g.0);
        }
    }
    let mut lines = Vec::new();
    for s in subjects {
        let of = |v: Variant| grid.iter().find(|g| &g.0 == s && g.1 == v);
        let Some(any) = grid.iter().find(|g| &g.0 == s) else { continue };
        let blank = Image::filled(any.2.height, any.2.width, &[0.0, 0.0, 0.0]);
        let cell = |v: Variant| of(v).map_or(blank.clone(), |g| g.2.clone());
        let cols = [any.3.clone(), cell(Variant::CoarseOnly), cell(Variant::DetailOnly), cell(Variant::Full), any.4.clone()];
        lines.push(hconcat(&cols.iter().collect::<Vec<_>>())?);
    }
    vconcat(&lines.iter().collect::<Vec<_>>())?.save_png(&out.join("ablation_grid.png"))?;
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub mse: f64,
    pub psnr: f64,
}

/// Inference-only sweep of the blend ratio; writes `alpha_sweep.csv` and
/// `alpha_sweep.png` when `out` is given.
pub fn sweep_alpha(model: &RerenderModel<f32>, samples: &SampleSet, alphas: &[f64], out: Option<&Path>) -> Result<Vec<AlphaRow>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("empty alpha list".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let ev = evaluate(model, samples, BlendRatio::new(a)?, "sweep")?;
        rows.push(AlphaRow { alpha: a, mse: ev.enhanced.mean.mse, psnr: ev.enhanced.mean.psnr });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut csv = String::from("alpha,mse,psnr\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{}\n", r.alpha, r.mse, r.psnr));
        }
        fs::write(dir.join("alpha_sweep.csv"), csv).map_err(|e| Error::io(dir.join("alpha_sweep.csv"), e))?;
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha, r.psnr)).collect();
        line_plot(&pts, 320, 200).save_png(&dir.join("alpha_sweep.png"))?;
    }
    Ok(rows)
}

/// Minimal line chart: axes, a polyline through the points and a marker at
/// each point. x and y are scaled to the data range.
pub fn line_plot(points: &[(f64, f64)], width: usize, height: usize) -> Image {
    let mut img = Image::filled(height, width, &[1.0, 1.0, 1.0]);
    let margin = 16usize;
    let (pw, ph) = ((width - 2 * margin) as f64, (height - 2 * margin) as f64);
    let range = |f: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) }
    };
    let ((x0, x1), (y0, y1)) = (range(|p| p.0), range(|p| p.1));
    let to_px = |p: &(f64, f64)| {
        (margin as f64 + (p.0 - x0) / (x1 - x0) * pw, (height - margin) as f64 - (p.1 - y0) / (y1 - y0) * ph)
    };
    let dot = |img: &mut Image, x: f64, y: f64, r: isize, color: [f32; 3]| {
        let (cx, cy) = (x.round() as isize, y.round() as isize);
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (cx + dx, cy + dy);
                if px >= 0 && py >= 0 && (px as usize) < width && (py as usize) < height {
                    for (c, v) in color.iter().enumerate() {
                        img.set(c, py as usize, px as usize, *v);
                    }
                }
            }
        }
    };
    for x in margin..width - margin {
        dot(&mut img, x as f64, (height - margin) as f64, 0, [0.0; 3]);
    }
    for y in margin..height - margin {
        dot(&mut img, margin as f64, y as f64, 0, [0.0; 3]);
    }
    for w in points.windows(2) {
        let (a, b) = (to_px(&w[0]), to_px(&w[1]));
        let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            dot(&mut img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), 0, [0.2, 0.3, 0.8]);
        }
    }
    for p in points {
        let (x, y) = to_px(p);
        dot(&mut img, x, y, 2, [0.8, 0.1, 0.1]);
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F16,
}

pub const BENCH_STAGES: [&str; 4] = ["coarse", "reference encoding", "warping", "detail decoding"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub precision: Precision,
    pub resolution: (usize, usize),
    pub iterations: usize,
    pub warmup: usize,
    /// `(stage, mean ms)` in pipeline order.
    pub stages: Vec<(String, f64)>,
    /// Sum of the stage means.
    pub total_ms: f64,
    /// Total without reference encoding, which runs once per reference.
    pub online_ms: f64,
    /// Mean end-to-end wall time per iteration.
    pub wall_ms: f64,
}

impl BenchReport {
    pub fn stage_ms(&self, name: &str) -> Option<f64> {
        self.stages.iter().find(|s| s.0 == name).map(|s| s.1)
    }
}

/// Times the four pipeline stages on one frame, single-threaded. The model
/// is rebuilt from `ckpt` on the benchmark thread.
pub fn bench_inference(
    ckpt: &Checkpoint,
    frame: &ImageFrame,
    reference: &ReferenceImage,
    precision: Precision,
    warmup: usize,
    iterations: usize,
) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("bench needs at least one iteration".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| bench_on_thread(ckpt, frame, reference, precision, warmup, iterations))
}

fn bench_on_thread(
    ckpt: &Checkpoint,
    frame: &ImageFrame,
    reference: &ReferenceImage,
    precision: Precision,
    warmup: usize,
    iterations: usize,
) -> Result<BenchReport> {
    let model: RerenderModel<f32> = ckpt.build_model()?;
    let model = match precision {
        Precision::F32 => model,
        Precision::F16 => model.to_half_precision()?,
    };
    let batch = FrameBatch {
        input: frame.rendered_input.to_tensor()?,
        reference: reference.image.to_tensor()?,
        input_keypoints: vec![frame.keypoints.clone()],
        reference_keypoints: vec![reference.keypoints.clone()],
    };
    let alpha = model.alpha();
    let mut sums = [0.0f64; 4];
    let mut wall = 0.0;
    {
        no_grad(|| -> Result<()> {
            for it in 0..warmup + iterations {
                let mut t = [0.0; 4];
                let start = Instant::now();
                let c = Instant::now();
                let coarse = if model.config.variant.uses_coarse() { Some(model.coarse.forward(&batch.input)?) } else { None };
                t[0] = c.elapsed().as_secs_f64();
                if model.config.variant.uses_detail() {
                    let c = Instant::now();
                    let fr = model.encode_reference(&batch.reference)?;
                    t[1] = c.elapsed().as_secs_f64();
                    let c = Instant::now();
                    let field = model.warp_field(&batch)?;
                    let warped = warp_pyramid(&fr, &field.total)?;
                    t[2] = c.elapsed().as_secs_f64();
                    let c = Instant::now();
                    model.decode(coarse.as_ref(), warped, alpha, 1)?;
                    t[3] = c.elapsed().as_secs_f64();
                }
                let w = start.elapsed().as_secs_f64();
                if it >= warmup {
                    for k in 0..4 {
                        sums[k] += t[k];
                    }
                    wall += w;
                }
            }
            Ok(())
        })?;
    }
    let n = iterations as f64;
    let stages: Vec<(String, f64)> = BENCH_STAGES.iter().zip(sums).map(|(s, v)| (s.to_string(), 1e3 * v / n)).collect();
    let total_ms: f64 = stages.iter().map(|s| s.1).sum();
    let online_ms = total_ms - stages[1].1;
    Ok(BenchReport {
        precision,
        resolution: (model.config.height, model.config.width),
        iterations,
        warmup,
        stages,
        total_ms,
        online_ms,
        wall_ms: 1e3 * wall / n,
    })
}

/// Largest absolute pixel difference of `I_e` between full and half
/// precision weights over the given samples.
pub fn precision_gap(model: &RerenderModel<f32>, samples: &SampleSet, idx: &[usize]) -> Result<f64> {
    let half = model.to_half_precision()?;
    let mut gap = 0.0f64;
    for chunk in idx.chunks(EVAL_BATCH) {
        let a = predict(model, samples, chunk, model.alpha())?.enhanced;
        let b = predict(&half, samples, chunk, model.alpha())?.enhanced;
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            gap = gap.max((x - y).abs() as f64);
        }
    }
    Ok(gap)
}

/// A sample and its outputs side by side: input, `I_c`, mask, `I_e`, ground
/// truth.
pub fn comparison_strip(frame: &ImageFrame, inf: &Inference) -> Result<Image> {
    let blank = Image::filled(frame.gt_image.height, frame.gt_image.width, &[0.0; 3]);
    let c = inf.coarse.clone().unwrap_or_else(|| blank.clone());
    let m = inf.mask.as_ref().map_or(blank.clone(), gray_to_rgb);
    hconcat(&[&frame.rendered_input, &c, &m, &inf.enhanced, &frame.gt_image])
}
