//! One line per acceptance criterion. Runs the desk-scale training
//! experiments, so expect several minutes on one core.

use std::error::Error as StdError;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use rerender_core::eval::{
    bench_inference, evaluate, heldout_samples, mse, precision_gap, psnr, run_ablation, ssim, sweep_alpha,
    AblationEntry, AblationOptions, Precision, BENCH_STAGES, DEFAULT_ALPHAS,
};
use rerender_core::gradcheck;
use rerender_core::losses::{LossWeights, WarpSchedule, WarpWeights};
use rerender_core::model::{
    blend_features, coarse_field, keypoints_to_heatmaps, warp_pyramid, BlendRatio, FeaturePyramid, FrameBatch,
    KeypointSet, ModelConfig, RerenderModel, Variant, NUM_KEYPOINTS,
};
use rerender_core::nn::AdamConfig;
use rerender_core::raster::Image;
use rerender_core::seed;
use rerender_core::selection::{select_reference, Descriptors, ReferenceEntry, LAMBDA_MISS, MATCH_THRESHOLD, MATCH_WEIGHT};
use rerender_core::synth::{generate_dataset, Dataset, DatasetConfig, Split};
use rerender_core::train::{
    read_curriculum, run_stage, run_stage_on, Checkpoint, SampleSet, Stage, StepRecord, TrainConfig,
    DEFAULT_FINETUNE_EPOCHS, FULL_SCALE_REFS,
};
use rerender_core::{Shape, Tensor32};

type Outcome = Result<(bool, String), Box<dyn StdError>>;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().expect("temp dir");
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.root.join(p)
    }
}

fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig { base_channels: 4, refine_channels: 4, spade_hidden: 4, variant, ..ModelConfig::default() }
}

fn random_image(c: usize, h: usize, w: usize, seed_tag: u64) -> Image {
    let mut rng = seed::rng(seed_tag, &[0x1a6e]);
    Image::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

// C1

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let cases = gradcheck::run_all(gradcheck::DEFAULT_SEEDS)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = cases.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    let failed: Vec<_> = cases.iter().filter(|c| !c.passed()).map(|c| format!("{}#{}", c.op, c.seed)).collect();
    let ops = gradcheck::cases().len();
    Ok((
        failed.is_empty() && secs < 120.0,
        format!(
            "{ops} ops x {} seeds, worst {} {:.2e}, {:.1}s{}",
            gradcheck::DEFAULT_SEEDS,
            worst.op,
            worst.rel_error,
            secs,
            if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
        ),
    ))
}

// C2

fn feature_pyramid(cfg: &ModelConfig, h: usize, w: usize, tag: u64) -> FeaturePyramid<f32> {
    let levels = cfg
        .pyramid_channels()
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let s = Shape::new(1, c, h >> i, w >> i);
            let img = random_image(c, h >> i, w >> i, tag * 16 + i as u64);
            Tensor32::from_vec(s, img.data).unwrap()
        })
        .collect();
    FeaturePyramid::new(levels).unwrap()
}

fn blend_exactness() -> Outcome {
    let cfg = ModelConfig::default();
    // Guidance comes from the half-resolution coarse branch.
    let g = feature_pyramid(&cfg, cfg.height / 2, cfg.width / 2, 1);
    let w = feature_pyramid(&cfg, cfg.height, cfg.width, 2);
    let b0 = blend_features(&g, &w, BlendRatio::new(0.0)?)?;
    let b1 = blend_features(&g, &w, BlendRatio::new(1.0)?)?;
    let mut exact = true;
    for i in 0..4 {
        let s = w.level(i).shape();
        exact &= b0.level(i).to_vec() == w.level(i).to_vec();
        exact &= b1.level(i).to_vec() == g.level(i).resize(s.h(), s.w())?.to_vec();
    }
    let mut worst = 0.0f64;
    for a in [0.05, 0.1, 0.15, 0.3, 0.5, 0.7, 0.9] {
        let b = blend_features(&g, &w, BlendRatio::new(a)?)?;
        for i in 0..4 {
            let (v0, v1, va) = (b0.level(i).to_vec(), b1.level(i).to_vec(), b.level(i).to_vec());
            for k in 0..va.len() {
                let want = a * v1[k] as f64 + (1.0 - a) * v0[k] as f64;
                worst = worst.max((va[k] as f64 - want).abs());
            }
        }
    }
    Ok((exact && worst < 1e-6, format!("endpoints bitwise {exact}, max linearity error {worst:.2e}")))
}

// C3

fn curriculum_exactness(data: &Path, ws: &Workspace) -> Outcome {
    let mut cfg = TrainConfig::for_stage(Stage::Detail);
    cfg.data = data.to_path_buf();
    cfg.model = tiny_model(Variant::DetailOnly);
    cfg.batch_size = 1;
    cfg.epoch_items = Some(1);
    cfg.epochs = 21;
    cfg.augment = false;
    cfg.checkpoint = ws.path("curriculum.ckpt");
    run_stage(&cfg)?;
    let mut log = cfg.checkpoint.clone().into_os_string();
    log.push(".curriculum.csv");
    let rows = read_curriculum(Path::new(&log))?;
    let want = [
        (0, (1.0, 0.0, 1.0)),
        (5, (0.5, 0.5, 1.0)),
        (10, (0.25, 0.75, 1.0)),
        (15, (0.0, 1.0, 0.0)),
        (20, (0.0, 1.0, 0.0)),
    ];
    let mut ok = rows.len() == 21;
    let mut seen = Vec::new();
    for (epoch, (c, r, g)) in want {
        let row = rows.iter().find(|x| x.epoch == epoch);
        let w = row.map(|x| x.weights);
        ok &= w == Some(WarpWeights { coarse: c, refined: r, reg: g });
        seen.push(format!("{epoch}:{:?}", w.map(|w| (w.coarse, w.refined, w.reg))));
    }
    Ok((ok, format!("logged {} epochs; {}", rows.len(), seen.join(" "))))
}

// C4

fn published_constants() -> Outcome {
    let w = LossWeights::default();
    let t = TrainConfig::default();
    let f = TrainConfig::for_stage(Stage::Finetune);
    let adam = AdamConfig::default();
    let model = RerenderModel::<f32>::new(ModelConfig::default())?;
    let checks = [
        ("loss weights", (w.lambda_r_vgg, w.lambda_r_img, w.lambda_w_img, w.lambda_w_reg) == (0.9, 0.1, 1.0, 1.0)),
        ("fine-tune weights", (w.lambda_c, w.lambda_d) == (0.5, 1.0)),
        ("lr", t.lr == 5e-5 && adam.lr == 5e-5),
        ("weight decay", t.weight_decay == 3e-6 && adam.weight_decay == 3e-6),
        ("fine-tune epochs", f.epochs == 20 && DEFAULT_FINETUNE_EPOCHS == 20),
        ("N_r", FULL_SCALE_REFS == 32 && t.n_refs == 8),
        ("alpha", t.alpha == 0.1 && model.alpha().get() == 0.1),
        ("schedule", WarpSchedule::default() == WarpSchedule { ramp_start: 5, curriculum_end: 15 }),
    ];
    let bad: Vec<_> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Ok((bad.is_empty(), if bad.is_empty() { format!("{} groups match", checks.len()) } else { format!("mismatch {bad:?}") }))
}

// C5

fn overfit_capability(data: &Path, ws: &Workspace) -> Outcome {
    let t = Instant::now();
    let ds = Dataset::open(data)?;
    let picks: Vec<_> = ds.manifest.subjects.iter().map(|s| (s, None)).collect();
    let mut samples = SampleSet::load(&ds, &picks, 8)?;
    // One view per frame: 8 frames with varied viewpoints.
    samples.samples.retain(|s| s.frame.view_id == s.frame.frame_id % 8);

    let mut c = TrainConfig::for_stage(Stage::Coarse);
    c.model.base_channels = 32;
    c.lr = 3e-3;
    c.batch_size = 8;
    c.augment = false;
    c.epochs = 500;
    c.max_steps = Some(500);
    c.checkpoint = ws.path("overfit_coarse.ckpt");
    let rep = run_stage_on(&c, &samples)?;
    let coarse_secs = t.elapsed().as_secs_f64();
    let m: RerenderModel<f32> = Checkpoint::load(&c.checkpoint)?.build_model()?;
    let ev = evaluate(&m, &samples, m.alpha(), "overfit")?;
    let (p_in, p_c) = (ev.input.mean.psnr, ev.coarse.as_ref().unwrap().mean.psnr);

    let mut d = c.clone();
    d.stage = Stage::Detail;
    d.lr = 1e-3;
    d.batch_size = 4;
    d.max_steps = Some(60);
    d.init = Some(c.checkpoint.clone());
    d.checkpoint = ws.path("overfit_detail.ckpt");
    run_stage_on(&d, &samples)?;
    let m: RerenderModel<f32> = Checkpoint::load(&d.checkpoint)?.build_model()?;
    let ev = evaluate(&m, &samples, m.alpha(), "overfit")?;
    let (p_c2, p_e) = (ev.coarse.as_ref().unwrap().mean.psnr, ev.enhanced.mean.psnr);
    let ok = samples.len() == 8 && rep.records.len() == 500 && p_c >= p_in + 3.0 && coarse_secs < 600.0 && p_e > p_c2;
    Ok((
        ok,
        format!(
            "input {p_in:.2} -> coarse {p_c:.2} dB (+{:.2}) in 500 steps / {coarse_secs:.0}s; detail I_e {p_e:.2} vs I_c {p_c2:.2}",
            p_c - p_in
        ),
    ))
}

// C6, C7, C8, C12

struct Heldout {
    ablation: Outcome,
    finetune: Outcome,
    sweep: Outcome,
    precision: Outcome,
}

fn desk_experiment(ws: &Workspace) -> Result<Heldout, Box<dyn StdError>> {
    let t = Instant::now();
    let data = ws.path("ablation_data");
    generate_dataset(&DatasetConfig { subjects: 2, heldout: 2, frames: 10, ..DatasetConfig::default() }, &data)?;
    let ds = Dataset::open(&data)?;
    let width = 16;
    let mut base = TrainConfig::default();
    base.data = data.clone();
    base.model.base_channels = width;
    base.model.refine_channels = width;
    base.model.spade_hidden = width;
    base.epoch_items = Some(32);

    let stage = |stage: Stage, variant: Variant, lr: f64, init: Option<PathBuf>, name: &str| -> rerender_core::Result<PathBuf> {
        let mut c = TrainConfig { stage, lr, init, checkpoint: ws.path(name), ..base.clone() };
        c.model.variant = variant;
        if stage == Stage::Coarse {
            c.epochs = 1000;
            c.max_steps = Some(300);
        }
        run_stage(&c)?;
        Ok(c.checkpoint)
    };
    let full_c = stage(Stage::Coarse, Variant::Full, 2e-3, None, "full_coarse.ckpt")?;
    let full = stage(Stage::Detail, Variant::Full, 1e-3, Some(full_c), "full.ckpt")?;
    let conly = stage(Stage::Coarse, Variant::CoarseOnly, 2e-3, None, "coarse_only.ckpt")?;
    let donly = stage(Stage::Detail, Variant::DetailOnly, 1e-3, None, "detail_only.ckpt")?;
    let pretrain = [(&full, "full"), (&conly, "coarse_only"), (&donly, "detail_only")];

    let held: Vec<_> = ds.subjects(Split::Heldout).collect();
    let mut entries = Vec::new();
    let mut gains = Vec::new();
    let mut sweep_sum = vec![0.0; DEFAULT_ALPHAS.len()];
    let mut gap = 0.0f64;
    let mut sweep_files = true;
    for subject in &held {
        let eval_set = heldout_samples(&ds, subject, 5, 0, base.n_refs)?;
        for (ck, name) in pretrain {
            let mut c = TrainConfig {
                stage: Stage::Finetune,
                lr: 5e-4,
                init: Some(ck.clone()),
                finetune_subject: Some(subject.id.clone()),
                epoch_items: Some(16),
                checkpoint: ws.path(&format!("ft_{}_{name}.ckpt", subject.id)),
                ..base.clone()
            };
            c.model.variant = Checkpoint::load(ck)?.model.variant;
            run_stage(&c)?;
            entries.push(AblationEntry { subject: subject.id.clone(), checkpoint: c.checkpoint.clone() });
            if name != "full" {
                continue;
            }
            let before: RerenderModel<f32> = Checkpoint::load(ck)?.build_model()?;
            let after: RerenderModel<f32> = Checkpoint::load(&c.checkpoint)?.build_model()?;
            let p0 = evaluate(&before, &eval_set, before.alpha(), "before")?.enhanced.mean.psnr;
            let p1 = evaluate(&after, &eval_set, after.alpha(), "after")?.enhanced.mean.psnr;
            gains.push((subject.id.clone(), p0, p1));
            let out = ws.path(&format!("sweep_{}", subject.id));
            let rows = sweep_alpha(&after, &eval_set, &DEFAULT_ALPHAS, Some(&out))?;
            sweep_files &= out.join("alpha_sweep.csv").exists() && out.join("alpha_sweep.png").exists();
            for (k, r) in rows.iter().enumerate() {
                sweep_sum[k] += r.psnr / held.len() as f64;
            }
            let idx: Vec<usize> = (0..10.min(eval_set.len())).collect();
            gap = gap.max(precision_gap(&after, &eval_set, &idx)?);
        }
    }
    let out = ws.path("ablation");
    let table = run_ablation(&ds, &entries, &AblationOptions { finetune_frames: 5, seed: 0, n_refs: base.n_refs }, &out)?;
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let full_p = table.mean_psnr("full").unwrap_or(f64::NAN);
    let wo_detail = table.mean_psnr("w/o detail").unwrap_or(f64::NAN);
    let wo_coarse = table.mean_psnr("w/o coarse").unwrap_or(f64::NAN);
    let files = ["ablation.csv", "ablation.json", "ablation_grid.png"].iter().all(|f| out.join(f).exists());
    let ablation_ok =
        table.rows.len() == 6 && files && full_p - wo_detail >= 0.3 && full_p - wo_coarse >= 0.3 && minutes <= 120.0;
    let ablation = Ok((
        ablation_ok,
        format!(
            "full {full_p:.2} / w/o detail {wo_detail:.2} (+{:.2}) / w/o coarse {wo_coarse:.2} (+{:.2}) dB over {} rows, {minutes:.1} min",
            full_p - wo_detail,
            full_p - wo_coarse,
            table.rows.len()
        ),
    ));

    let finetune_ok = !gains.is_empty() && gains.iter().all(|(_, a, b)| b - a >= 0.5);
    let finetune = Ok((
        finetune_ok,
        gains.iter().map(|(s, a, b)| format!("{s}: {a:.2} -> {b:.2} dB (+{:.2})", b - a)).collect::<Vec<_>>().join(", "),
    ));

    let best = (0..sweep_sum.len()).max_by(|&a, &b| sweep_sum[a].total_cmp(&sweep_sum[b])).unwrap();
    let interior = best != 0 && best != DEFAULT_ALPHAS.len() - 1;
    let curve: Vec<String> = DEFAULT_ALPHAS.iter().zip(&sweep_sum).map(|(a, p)| format!("{a}:{p:.2}")).collect();
    let sweep = Ok((
        interior && sweep_files,
        format!("best alpha {} ; {} ; csv+png {sweep_files}", DEFAULT_ALPHAS[best], curve.join(" ")),
    ));

    let ck = Checkpoint::load(&entries[0].checkpoint)?;
    let subject = ds.subject(&entries[0].subject)?;
    let eval_set = heldout_samples(&ds, subject, 5, 0, base.n_refs)?;
    let s = &eval_set.samples[0];
    let report = bench_inference(&ck, &s.frame, eval_set.reference(s), Precision::F16, 5, 50)?;
    let names: Vec<&str> = report.stages.iter().map(|s| s.0.as_str()).collect();
    let sum: f64 = report.stages.iter().map(|s| s.1).sum();
    let consistent = names == BENCH_STAGES
        && (report.total_ms - sum).abs() < 1e-9
        && (report.online_ms - (sum - report.stages[1].1)).abs() < 1e-9
        && report.iterations >= 10;
    let precision = Ok((
        gap < 0.02 && consistent,
        format!(
            "f16 max pixel gap {gap:.2e} on 10 frames; stages {:?} total {:.2} ms (online {:.2})",
            report.stages.iter().map(|s| format!("{} {:.2}", s.0, s.1)).collect::<Vec<_>>(),
            report.total_ms,
            report.online_ms
        ),
    ));
    Ok(Heldout { ablation, finetune, sweep, precision })
}

// C9

fn warping_invariants() -> Outcome {
    let cfg = ModelConfig::default();
    let model = RerenderModel::<f32>::new(cfg.clone())?;
    let f = feature_pyramid(&cfg, cfg.height, cfg.width, 9);
    let (qh, qw) = cfg.quarter();
    let w = warp_pyramid(&f, &Tensor32::zeros(Shape::new(1, 2, qh, qw)))?;
    let identity = f.levels().iter().zip(w.levels()).all(|(a, b)| a.to_vec() == b.to_vec());

    let kp = toy_keypoints(3, 0.0);
    let heat = keypoints_to_heatmaps::<f32>(&[kp.clone()], qh, qw, cfg.sigma_pixels())?;
    let wc = coarse_field(&[kp.clone()], &[kp.clone()], &heat, cfg.background_weight)?;
    let zero_coarse = wc.to_vec().iter().all(|&v| v == 0.0);

    let img = random_image(3, cfg.height, cfg.width, 4);
    let batch = FrameBatch {
        input: img.to_tensor()?,
        reference: random_image(3, cfg.height, cfg.width, 5).to_tensor()?,
        input_keypoints: vec![kp],
        reference_keypoints: vec![toy_keypoints(4, 0.1)],
    };
    let field = model.warp_field(&batch)?;
    let zero_refine = field.refine.to_vec().iter().all(|&v| v == 0.0);
    Ok((
        identity && zero_coarse && zero_refine,
        format!("zero-field identity {identity}, W_c==0 for equal poses {zero_coarse}, W_r==0 at init {zero_refine}"),
    ))
}

fn toy_keypoints(tag: u64, shift: f64) -> KeypointSet {
    let mut rng = seed::rng(tag, &[0x6b70]);
    let mut points = [[0.0; 2]; NUM_KEYPOINTS];
    let mut visible = [false; NUM_KEYPOINTS];
    for k in 0..NUM_KEYPOINTS {
        points[k] = [rng.random_range(-0.7..0.7) + shift, rng.random_range(-0.7..0.7)];
        visible[k] = rng.random_bool(0.85);
    }
    KeypointSet::new(points, visible)
}

// C10

/// Straight from the scoring definition, without the library helpers.
fn brute_force_select(kp: &KeypointSet, img: &Image, cands: &[(KeypointSet, Image)]) -> usize {
    fn patches(img: &Image) -> Vec<Option<Vec<f64>>> {
        let (ch, cw) = (img.height / 16, img.width / 8);
        let mut out = Vec::new();
        for gy in 0..16 {
            for gx in 0..8 {
                let mut p = Vec::new();
                for y in 0..ch {
                    for x in 0..cw {
                        let v: f64 = (0..img.channels).map(|c| img.get(c, gy * ch + y, gx * cw + x) as f64).sum();
                        p.push(v / img.channels as f64);
                    }
                }
                let m = p.iter().sum::<f64>() / p.len() as f64;
                let centred: Vec<f64> = p.iter().map(|v| v - m).collect();
                let n = centred.iter().map(|v| v * v).sum::<f64>().sqrt();
                out.push((n > 1e-6).then(|| centred.iter().map(|v| v / n).collect()));
            }
        }
        out
    }
    fn argmax_row(sim: &[Vec<Option<f64>>], i: usize) -> Option<usize> {
        let mut best: Option<usize> = None;
        for j in 0..sim[i].len() {
            if let Some(s) = sim[i][j] {
                if best.is_none_or(|b| s > sim[i][b].unwrap()) {
                    best = Some(j);
                }
            }
        }
        best
    }
    let pa = patches(img);
    let mut best = (0, f64::NEG_INFINITY);
    for (idx, (ckp, cimg)) in cands.iter().enumerate() {
        let pb = patches(cimg);
        let dot = |a: &Option<Vec<f64>>, b: &Option<Vec<f64>>| match (a, b) {
            (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()),
            _ => None,
        };
        let ab: Vec<Vec<Option<f64>>> = pa.iter().map(|a| pb.iter().map(|b| dot(a, b)).collect()).collect();
        let ba: Vec<Vec<Option<f64>>> = pb.iter().map(|b| pa.iter().map(|a| dot(b, a)).collect()).collect();
        let matches = (0..pa.len())
            .filter(|&i| match argmax_row(&ab, i) {
                Some(j) => ab[i][j].unwrap() > MATCH_THRESHOLD && argmax_row(&ba, j) == Some(i),
                None => false,
            })
            .count();
        let joint: Vec<usize> = (0..NUM_KEYPOINTS).filter(|&k| kp.visible[k] && ckp.visible[k]).collect();
        let one_sided = (0..NUM_KEYPOINTS).filter(|&k| kp.visible[k] != ckp.visible[k]).count();
        let dist = if joint.is_empty() {
            f64::INFINITY
        } else {
            let n = joint.len() as f64;
            let c = |s: &KeypointSet, a: usize| joint.iter().map(|&k| s.points[k][a]).sum::<f64>() / n;
            let (ax, ay, bx, by) = (c(kp, 0), c(kp, 1), c(ckp, 0), c(ckp, 1));
            joint
                .iter()
                .map(|&k| {
                    let dx = (kp.points[k][0] - ax) - (ckp.points[k][0] - bx);
                    let dy = (kp.points[k][1] - ay) - (ckp.points[k][1] - by);
                    (dx * dx + dy * dy).sqrt()
                })
                .sum::<f64>()
                / n
        };
        let score = -(dist + LAMBDA_MISS * one_sided as f64) + MATCH_WEIGHT * matches as f64 / pa.len() as f64;
        if score > best.1 {
            best = (idx, score);
        }
    }
    best.0
}

fn perturbed(img: &Image, amount: f32, tag: u64) -> Image {
    let noise = random_image(img.channels, img.height, img.width, tag);
    let data = img.data.iter().zip(&noise.data).map(|(a, n)| (a + amount * (n - 0.5)).clamp(0.0, 1.0)).collect();
    Image::from_vec(img.channels, img.height, img.width, data).unwrap()
}

fn jittered(kp: &KeypointSet, amount: f64, hide: f64, tag: u64) -> KeypointSet {
    let mut rng = seed::rng(tag, &[0x7177]);
    let mut points = kp.points;
    let mut visible = kp.visible;
    for k in 0..NUM_KEYPOINTS {
        points[k][0] += rng.random_range(-amount..=amount);
        points[k][1] += rng.random_range(-amount..=amount);
        if rng.random_bool(hide) {
            visible[k] = !visible[k];
        }
    }
    KeypointSet::new(points, visible)
}

fn selection_oracle() -> Outcome {
    let mut agree = 0;
    let trials = 100;
    for t in 0..trials as u64 {
        let mut rng = seed::rng(t, &[0x5e1]);
        let img = random_image(3, 64, 32, 1000 + t);
        let kp = toy_keypoints(2000 + t, 0.0);
        let mut cands: Vec<(KeypointSet, Image)> = (0..8u64)
            .map(|j| {
                let tag = t * 8 + j;
                let cimg = if rng.random_bool(0.3) {
                    random_image(3, 64, 32, 5000 + tag)
                } else {
                    perturbed(&img, rng.random_range(0.0..1.0), 6000 + tag)
                };
                (jittered(&kp, rng.random_range(0.0..0.3), rng.random_range(0.0..0.2), 7000 + tag), cimg)
            })
            .collect();
        if rng.random_bool(0.2) {
            // Exact duplicate to exercise tie-breaking.
            let (a, b) = (rng.random_range(0..8), rng.random_range(0..8));
            cands[b] = cands[a].clone();
        }
        let entries: Vec<ReferenceEntry> =
            cands.iter().map(|(k, i)| ReferenceEntry::new(i, k.clone())).collect::<Result<_, _>>()?;
        let (got, _) = select_reference(&kp, &Descriptors::compute(&img)?, &entries)?;
        if got == brute_force_select(&kp, &img, &cands) {
            agree += 1;
        }
    }
    Ok((agree == trials, format!("{agree}/{trials} randomized 8-candidate instances agree")))
}

// C11

fn direct_ssim(a: &[f64], b: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let gray = |x: &[f64]| -> Vec<f64> {
        (0..h * w).map(|i| (0..c).map(|k| x[k * h * w + i]).sum::<f64>() / c as f64).collect()
    };
    let (ga, gb) = (gray(a), gray(b));
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let wt = g[dy] * g[dx] / (gs * gs);
                    let (pa, pb) = (ga[(y0 + dy) * w + x0 + dx], gb[(y0 + dy) * w + x0 + dx]);
                    ma += wt * pa;
                    mb += wt * pb;
                    saa += wt * pa * pa;
                    sbb += wt * pb * pb;
                    sab += wt * pa * pb;
                }
            }
            let (c1, c2) = (0.0001, 0.0009);
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn metric_oracles() -> Outcome {
    let mut identity = true;
    let mut worst_ssim = 0.0f64;
    for t in 0..10u64 {
        let (c, h, w) = (3, 24 + t as usize, 20 + 2 * t as usize);
        let a: Vec<f64> = random_image(c, h, w, 100 + t).data.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = a.iter().zip(random_image(c, h, w, 200 + t).data).map(|(x, n)| x * 0.7 + n as f64 * 0.3).collect();
        identity &= psnr(&a, &b)? == 10.0 * (1.0 / mse(&a, &b)?).log10();
        worst_ssim = worst_ssim.max((ssim(&a, &b, c, h, w)? - direct_ssim(&a, &b, c, h, w)).abs());
    }
    let offset = psnr(&vec![0.0f64; 300], &vec![0.1f64; 300])?;
    Ok((
        identity && worst_ssim < 1e-6 && offset == 20.0,
        format!("PSNR identity exact {identity}, SSIM vs windowed oracle {worst_ssim:.2e}, offset 0.1 -> {offset} dB"),
    ))
}

// C13

fn traces_equal(a: &[StepRecord], b: &[StepRecord]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.step == y.step
                && x.total.to_bits() == y.total.to_bits()
                && x.parts.iter().zip(&y.parts).all(|(p, q)| p.0 == q.0 && p.1.to_bits() == q.1.to_bits())
        })
}

fn determinism(data: &Path, ws: &Workspace) -> Outcome {
    let base = TrainConfig {
        data: data.to_path_buf(),
        model: tiny_model(Variant::Full),
        batch_size: 2,
        lr: 1e-3,
        seed: 5,
        epoch_items: Some(8),
        ..TrainConfig::default()
    };
    let pipeline = |tag: &str| -> Result<(Vec<StepRecord>, Vec<StepRecord>, Vec<u8>), Box<dyn StdError>> {
        let c = TrainConfig {
            stage: Stage::Coarse,
            max_steps: Some(50),
            checkpoint: ws.path(&format!("det_{tag}_c.ckpt")),
            ..base.clone()
        };
        let rc = run_stage(&c)?;
        let d = TrainConfig {
            stage: Stage::Detail,
            max_steps: Some(50),
            init: Some(c.checkpoint.clone()),
            checkpoint: ws.path(&format!("det_{tag}_d.ckpt")),
            ..base.clone()
        };
        let rd = run_stage(&d)?;
        Ok((rc.records, rd.records, std::fs::read(&d.checkpoint)?))
    };
    let (c1, d1, bytes1) = pipeline("a")?;
    let (c2, d2, bytes2) = pipeline("b")?;
    let reproducible = c1.len() == 50 && d1.len() == 50 && traces_equal(&c1, &c2) && traces_equal(&d1, &d2) && bytes1 == bytes2;

    let ck = Checkpoint::from_bytes(&bytes1)?;
    let round_trip = ck.to_bytes()? == bytes1;
    let model: RerenderModel<f32> = ck.build_model()?;
    let again = Checkpoint::capture(&model, ck.build_optimizer::<f32>().as_ref(), ck.state.clone(), ck.perceptual_seed);
    let round_trip = round_trip && again.to_bytes()? == bytes1;

    // Resume: 10 + 10 steps against 20 uninterrupted detail steps.
    let init = Some(ws.path("det_a_c.ckpt"));
    let straight = TrainConfig {
        stage: Stage::Detail,
        max_steps: Some(20),
        init: init.clone(),
        checkpoint: ws.path("resume_full.ckpt"),
        ..base.clone()
    };
    let full = run_stage(&straight)?;
    let first = TrainConfig { max_steps: Some(10), checkpoint: ws.path("resume_part.ckpt"), ..straight.clone() };
    let part = run_stage(&first)?;
    let second = TrainConfig { resume: Some(first.checkpoint.clone()), init: None, max_steps: Some(20), ..first.clone() };
    let rest = run_stage(&second)?;
    let mut joined = part.records.clone();
    joined.extend(rest.records.clone());
    let same_final = std::fs::read(&straight.checkpoint).ok() == std::fs::read(&second.checkpoint).ok();
    let csv = std::fs::read_to_string(second.metrics_path()).unwrap_or_default();
    let steps: Vec<usize> = csv.lines().skip(1).filter_map(|l| l.split(',').next()?.parse().ok()).collect();
    let gap_free = steps == (0..20).collect::<Vec<_>>();
    let resumed = traces_equal(&full.records, &joined) && same_final && gap_free;
    Ok((
        reproducible && round_trip && resumed,
        format!("50+50-step traces bitwise {reproducible}, checkpoint round-trip {round_trip}, resume 10+10 == 20 {resumed}"),
    ))
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(_) => (false, "panicked".into()),
    };
    println!("{} C{id:<2} {name}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    ok
}

fn main() {
    let ws = Workspace::new();
    let overfit_data = ws.path("overfit_data");
    let gen = generate_dataset(&DatasetConfig { subjects: 1, heldout: 0, frames: 8, ..DatasetConfig::default() }, &overfit_data);
    if let Err(e) = gen {
        println!("FAIL setup: dataset generation failed: {e}");
        std::process::exit(1);
    }
    let mut results = Vec::new();
    results.push(run(1, "gradient correctness", gradient_correctness));
    results.push(run(2, "blend exactness", blend_exactness));
    results.push(run(3, "curriculum exactness", || curriculum_exactness(&overfit_data, &ws)));
    results.push(run(4, "published constants", published_constants));
    results.push(run(5, "overfit capability", || overfit_capability(&overfit_data, &ws)));

    let t = Instant::now();
    let held = catch_unwind(AssertUnwindSafe(|| desk_experiment(&ws)));
    let secs = t.elapsed().as_secs_f64();
    let mut held = match held {
        Ok(Ok(h)) => Some(h),
        Ok(Err(e)) => {
            println!("note: held-out experiment failed after {secs:.0}s: {e}");
            None
        }
        Err(_) => None,
    };
    let mut take = |pick: fn(&mut Heldout) -> Outcome| -> Outcome {
        match held.as_mut() {
            Some(h) => pick(h),
            None => Err("held-out experiment did not complete".into()),
        }
    };
    let r6 = take(|h| std::mem::replace(&mut h.ablation, Ok((false, String::new()))));
    let r7 = take(|h| std::mem::replace(&mut h.finetune, Ok((false, String::new()))));
    let r8 = take(|h| std::mem::replace(&mut h.sweep, Ok((false, String::new()))));
    let r12 = take(|h| std::mem::replace(&mut h.precision, Ok((false, String::new()))));
    println!("      held-out experiment (C6-C8, C12) took {:.1} min", secs / 60.0);
    results.push(run(6, "ablation ordering", || r6));
    results.push(run(7, "fine-tune gain", || r7));
    results.push(run(8, "alpha sweep", || r8));
    results.push(run(9, "warping invariants", warping_invariants));
    results.push(run(10, "selection oracle", selection_oracle));
    results.push(run(11, "metric oracles", metric_oracles));
    results.push(run(12, "precision casting", || r12));
    results.push(run(13, "determinism and persistence", || determinism(&overfit_data, &ws)));

    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
