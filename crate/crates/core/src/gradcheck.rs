//! Finite-difference verification of every differentiable op and loss in
//! 64-bit mode.
//!
//! Each case builds random inputs, reduces the op output to a scalar with a
//! fixed random weighting and compares the analytic gradient against central
//! differences. The error of a case is
//! `max_j |analytic_j - numeric_j| / max(max_j |analytic_j|, max_j |numeric_j|)`
//! over all checked input elements. Inputs of piecewise-linear ops are drawn
//! away from their kinks so the central difference never straddles one.
//! Composite ops whose internal kinks cannot be placed by construction (the
//! ReLUs inside the perceptual extractor) are redrawn when the second
//! difference shows a kink within one step of an input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    coarse_loss, finetune_loss, reconstruction_loss, total_detail_loss, warp_loss, DetailParts, LossWeights,
    PerceptualExtractor, WarpSchedule, PERCEPTUAL_SEED,
};
use crate::model::WarpField;
use crate::seed;
use crate::tensor::{concat_channels, mean_abs_diff, no_grad, Shape, Tensor};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
pub const DEFAULT_SEEDS: usize = 5;
/// Input draws per case before a kinked draw is reported as is.
pub const MAX_DRAWS: usize = 10;

/// Outcome of one op over one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub op: &'static str,
    pub seed: u64,
    pub rel_error: f64,
    pub elements: usize,
    /// Input draws rejected for straddling a kink.
    pub redraws: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

type Op = fn(&[Tensor<f64>]) -> Result<Tensor<f64>>;
type Build = fn(&mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Check {
    pub rel_error: f64,
    pub elements: usize,
    /// No central difference straddled a kink.
    pub smooth: bool,
}

/// Compares analytic and numeric gradients of `sum(f(inputs) * r)` with
/// respect to every input that requires a gradient.
pub fn check(inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>, rng: &mut ChaCha8Rng) -> Result<Check> {
    let out = f(inputs)?;
    let r: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = Tensor::from_vec(out.shape(), r)?;
    let objective = |x: &[Tensor<f64>]| -> Result<f64> { Ok(f(x)?.mul(&r)?.sum()?.item()) };
    out.mul(&r)?.sum()?.backward()?;
    let center = no_grad(|| objective(inputs))?;
    let (mut max_diff, mut max_mag, mut max_bend, mut count) = (0.0f64, 0.0f64, 0.0f64, 0);
    for t in inputs.iter().filter(|t| t.requires_grad()) {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        for j in 0..t.numel() {
            let v = t.data()[j];
            t.data_mut()[j] = v + STEP;
            let hi = no_grad(|| objective(inputs))?;
            t.data_mut()[j] = v - STEP;
            let lo = no_grad(|| objective(inputs))?;
            t.data_mut()[j] = v;
            let numeric = (hi - lo) / (2.0 * STEP);
            // Half the slope change across the step; a kink shows up here at
            // the size of the error it causes.
            max_bend = max_bend.max((hi + lo - 2.0 * center).abs() / (2.0 * STEP));
            max_diff = max_diff.max((analytic[j] - numeric).abs());
            max_mag = max_mag.max(analytic[j].abs()).max(numeric.abs());
            count += 1;
        }
    }
    let rel = if max_mag == 0.0 { 0.0 } else { max_diff / max_mag };
    Ok(Check { rel_error: rel, elements: count, smooth: max_bend <= 0.5 * TOLERANCE * max_mag })
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Vec<f64> {
    (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect()
}

fn var(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Result<Tensor<f64>> {
    Tensor::variable(shape, uniform(rng, shape, lo, hi))
}

fn constant(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Result<Tensor<f64>> {
    Tensor::from_vec(shape, uniform(rng, shape, lo, hi))
}

/// Values in `±[0.1, 1]`, clear of the kink at zero.
fn signed(rng: &mut ChaCha8Rng, shape: Shape) -> Result<Tensor<f64>> {
    let v = (0..shape.numel())
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::variable(shape, v)
}

/// `b = a ± [0.05, 0.3]` so `|a - b|` stays away from zero.
fn apart(rng: &mut ChaCha8Rng, a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let v = a
        .data()
        .iter()
        .map(|&x| {
            let d = rng.random_range(0.05..0.3);
            if rng.random_bool(0.5) {
                x + d
            } else {
                x - d
            }
        })
        .collect();
    Tensor::from_vec(a.shape(), v)
}

/// Normalized flow whose pixel displacement has a fractional part in
/// `[lo, hi]` on both axes.
fn flow_values(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Vec<f64> {
    let plane = shape.hw();
    (0..shape.numel())
        .map(|i| {
            let size = if (i / plane) % 2 == 0 { shape.w() } else { shape.h() } as f64;
            let px = rng.random_range(-2i32..=1) as f64 + rng.random_range(lo..hi);
            px * 2.0 / size
        })
        .collect()
}

fn b_conv(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    Ok(vec![
        var(rng, Shape::new(1, 2, 5, 5), -1.0, 1.0)?,
        var(rng, Shape::new(3, 2, 3, 3), -1.0, 1.0)?,
        var(rng, Shape::new(1, 3, 1, 1), -1.0, 1.0)?,
    ])
}

fn b_image(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    Ok(vec![var(rng, Shape::new(2, 2, 4, 6), -1.0, 1.0)?])
}

fn b_signed(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    Ok(vec![signed(rng, Shape::new(1, 2, 3, 4))?])
}

fn b_pair(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let s = Shape::new(1, 2, 3, 4);
    Ok(vec![var(rng, s, -1.0, 1.0)?, var(rng, s, -1.0, 1.0)?])
}

fn b_grid(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let input = var(rng, Shape::new(1, 2, 6, 6), 0.0, 1.0)?;
    let fs = Shape::new(1, 2, 6, 6);
    Ok(vec![input, Tensor::variable(fs, flow_values(rng, fs, 0.1, 0.9))?])
}

fn b_clamp(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let s = Shape::new(1, 2, 3, 4);
    let v = (0..s.numel())
        .map(|_| loop {
            let x: f64 = rng.random_range(0.0..1.0);
            if (x - 0.2).abs() > 0.02 && (x - 0.8).abs() > 0.02 {
                break x;
            }
        })
        .collect();
    Ok(vec![Tensor::variable(s, v)?])
}

fn b_l1(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let a = var(rng, Shape::new(1, 3, 4, 4), 0.0, 1.0)?;
    let b = apart(rng, &a)?;
    Ok(vec![a, b])
}

fn b_coarse_loss(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let img = var(rng, Shape::new(2, 3, 4, 4), 0.0, 1.0)?;
    let mask = var(rng, Shape::new(2, 1, 4, 4), 0.0, 1.0)?;
    let (gi, gm) = (apart(rng, &img)?, apart(rng, &mask)?);
    Ok(vec![img, mask, gi, gm])
}

fn b_recon(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let e = var(rng, Shape::new(1, 3, 8, 8), 0.0, 1.0)?;
    let g = apart(rng, &e)?;
    Ok(vec![e, g])
}

/// Reference, ground truth, coarse field and refine field at one size so
/// the field reaches the sampler unresampled.
fn b_warp(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let s = Shape::new(1, 3, 8, 8);
    let reference = constant(rng, s, 0.0, 1.0)?;
    let gt = constant(rng, s, 0.0, 1.0)?;
    let fs = s.with_c(2);
    let coarse = flow_values(rng, fs, 0.3, 0.7);
    let refine: Vec<f64> = (0..fs.numel())
        .map(|i| {
            let size = if (i / fs.hw()) % 2 == 0 { fs.w() } else { fs.h() } as f64;
            let px = rng.random_range(0.05..0.15) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            px * 2.0 / size
        })
        .collect();
    Ok(vec![reference, gt, Tensor::variable(fs, coarse)?, Tensor::variable(fs, refine)?])
}

fn b_scalars(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    (0..4).map(|_| var(rng, Shape::SCALAR, 0.0, 2.0)).collect()
}

fn o_conv_same(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].conv2d(&x[1], &x[2], 1, 1)
}

fn o_conv_strided(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].conv2d(&x[1], &x[2], 2, 0)
}

fn o_pool(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].avg_pool2()
}

fn o_resize_up(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].resize(7, 11)
}

fn o_resize_down(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].resize(3, 2)
}

fn o_grid(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].grid_sample(&x[1])
}

fn o_instance_norm(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].instance_norm()
}

fn o_relu(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].relu()
}

fn o_sigmoid(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].scale(3.0)?.sigmoid()
}

fn o_abs(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].abs()
}

fn o_clamp(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].clamp(0.2, 0.8)
}

fn o_concat_slice(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let c = concat_channels(&[&x[0], &x[1]])?;
    c.slice_channels(1, 2)?.mul(&c.slice_channels(2, 2)?)
}

fn o_arith(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].add(&x[1])?.mul(&x[0].sub(&x[1])?)?.affine(0.7, -0.2)
}

fn o_mean(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].mul(&x[0])?.mean()
}

fn o_l1(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    mean_abs_diff(&x[0], &x[1])
}

fn o_chain(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    x[0].conv2d(&x[1], &x[2], 1, 1)?.instance_norm()?.relu()?.sum()
}

fn o_coarse_loss(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    coarse_loss(&x[0], &x[1], &x[2], &x[3])
}

thread_local! {
    static EXTRACTOR: PerceptualExtractor<f64> = PerceptualExtractor::new(PERCEPTUAL_SEED).expect("fixed extractor");
}

fn o_perceptual(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    EXTRACTOR.with(|e| Ok(reconstruction_loss(&x[0], &x[1], e)?.0))
}

fn o_recon_img(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    EXTRACTOR.with(|e| Ok(reconstruction_loss(&x[0], &x[1], e)?.1))
}

fn warp_terms(x: &[Tensor<f64>], epoch: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let field = WarpField::new(x[2].clone(), x[3].clone())?;
    warp_loss(&x[0], &x[1], &field, WarpSchedule::default().weights(epoch))
}

fn o_warp_img(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    Ok(warp_terms(x, 7)?.0)
}

fn o_warp_reg(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    Ok(warp_terms(x, 7)?.1)
}

fn o_detail_total(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let parts = DetailParts { vgg: x[0].clone(), img: x[1].clone(), warp_img: x[2].clone(), warp_reg: x[3].clone() };
    total_detail_loss(&parts, &LossWeights::default(), WarpSchedule::default().weights(3))
}

fn o_finetune(x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    finetune_loss(&x[0], &x[1], &LossWeights::default())
}

/// Every checked op with its input builder.
pub fn cases() -> Vec<(&'static str, Build, Op)> {
    vec![
        ("conv2d", b_conv as Build, o_conv_same as Op),
        ("conv2d_strided", b_conv, o_conv_strided),
        ("avg_pool2", b_image, o_pool),
        ("bilinear_resize_up", b_image, o_resize_up),
        ("bilinear_resize_down", b_image, o_resize_down),
        ("grid_sample", b_grid, o_grid),
        ("instance_norm", b_image, o_instance_norm),
        ("relu", b_signed, o_relu),
        ("sigmoid", b_pair, o_sigmoid),
        ("abs", b_signed, o_abs),
        ("clamp", b_clamp, o_clamp),
        ("concat_slice", b_pair, o_concat_slice),
        ("add_sub_mul_affine", b_pair, o_arith),
        ("mean", b_pair, o_mean),
        ("mean_abs_diff", b_l1, o_l1),
        ("conv_in_relu_sum", b_conv, o_chain),
        ("coarse_loss", b_coarse_loss, o_coarse_loss),
        ("perceptual_loss", b_recon, o_perceptual),
        ("reconstruction_l1", b_recon, o_recon_img),
        ("warp_image_loss", b_warp, o_warp_img),
        ("warp_reg_loss", b_warp, o_warp_reg),
        ("detail_loss", b_scalars, o_detail_total),
        ("finetune_loss", b_scalars, o_finetune),
    ]
}

/// Runs every case for seeds `0..seeds`.
pub fn run_all(seeds: usize) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for (i, (op, build, f)) in cases().into_iter().enumerate() {
        for s in 0..seeds as u64 {
            let mut rng = seed::rng(s, &[0x96ad, i as u64]);
            let mut redraws = 0;
            let c = loop {
                let c = check(&build(&mut rng)?, f, &mut rng)?;
                if c.smooth || redraws + 1 == MAX_DRAWS {
                    break c;
                }
                redraws += 1;
            };
            out.push(GradCase { op, seed: s, rel_error: c.rel_error, elements: c.elements, redraws });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_for_one_seed() {
        for c in run_all(1).unwrap() {
            assert!(c.passed(), "{} seed {}: {:e}", c.op, c.seed, c.rel_error);
            assert!(c.elements > 0, "{} checked nothing", c.op);
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut rng = seed::rng(1, &[]);
        let x = var(&mut rng, Shape::new(1, 1, 2, 2), 0.5, 1.0).unwrap();
        // scale(2) reported as scale(3) via an extra detached path.
        let f = |t: &[Tensor<f64>]| t[0].scale(2.0)?.add(&t[0].detach().scale(1.0)?);
        let ok = check(&[x.clone()], |t| t[0].scale(3.0), &mut rng).unwrap();
        x.zero_grad();
        let bad = check(&[x], f, &mut rng).unwrap();
        assert!(ok.rel_error < TOLERANCE && ok.smooth);
        assert!(bad.rel_error > 0.1 && bad.smooth);
    }

    #[test]
    fn straddled_kink_is_flagged() {
        let x = Tensor::variable(Shape::new(1, 1, 1, 2), vec![0.3, 0.5 * STEP]).unwrap();
        let c = check(&[x], |t| t[0].relu(), &mut seed::rng(2, &[])).unwrap();
        assert!(!c.smooth);
    }
}
