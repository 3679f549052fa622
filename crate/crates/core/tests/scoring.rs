use proptest::prelude::*;
use rand::Rng;

use rerender_core::eval::{capped, image_ssim, mse, psnr, ssim, PSNR_CAP};
use rerender_core::losses::{
    coarse_loss, finetune_loss, reconstruction_loss, LossWeights, PerceptualExtractor, PERCEPTUAL_SEED,
};
use rerender_core::model::{KeypointSet, NUM_KEYPOINTS};
use rerender_core::raster::Image;
use rerender_core::selection::{
    count_descriptor_matches, count_matches, keypoint_distance, select_reference, Descriptors, ReferenceEntry, GRID_COLS,
    GRID_ROWS, LAMBDA_MISS,
};
use rerender_core::seed;
use rerender_core::{Shape, Tensor64};

fn noise(h: usize, w: usize, tag: u64) -> Image {
    let mut rng = seed::rng(tag, &[0x401]);
    Image::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn pose(tag: u64) -> KeypointSet {
    let mut rng = seed::rng(tag, &[0x9053]);
    let mut p = [[0.0; 2]; NUM_KEYPOINTS];
    for q in p.iter_mut() {
        *q = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
    }
    KeypointSet::new(p, [true; NUM_KEYPOINTS])
}

#[test]
fn hidden_keypoint_costs_lambda_miss() {
    let a = pose(1);
    let mut b = a.clone();
    b.visible[7] = false;
    assert!((keypoint_distance(&a, &b, LAMBDA_MISS) - 0.2).abs() < 1e-12);
}

#[test]
fn independent_noise_rarely_matches() {
    let cells = GRID_ROWS * GRID_COLS;
    for s in 0..5 {
        let m = count_matches(&noise(128, 64, s), &noise(128, 64, 100 + s)).unwrap();
        assert!(m * 10 < cells, "seed {s}: {m} of {cells}");
    }
}

#[test]
fn self_match_counts_all_textured_cells() {
    let img = noise(64, 32, 3);
    let d = Descriptors::compute(&img).unwrap();
    assert_eq!(count_descriptor_matches(&d, &d), d.non_degenerate());
    let flat = Image::filled(64, 32, &[0.4, 0.4, 0.4]);
    assert_eq!(Descriptors::compute(&flat).unwrap().non_degenerate(), 0);
}

#[test]
fn identical_pose_beats_a_far_one_and_ties_go_first() {
    let img = noise(64, 32, 4);
    let kp = pose(2);
    let desc = Descriptors::compute(&img).unwrap();
    let far = ReferenceEntry::new(&img, pose(99)).unwrap();
    let same = ReferenceEntry::new(&img, kp.clone()).unwrap();
    assert_eq!(select_reference(&kp, &desc, &[far, same.clone()]).unwrap().0, 1);
    assert_eq!(select_reference(&kp, &desc, &[same.clone(), same]).unwrap().0, 0);
}

#[test]
fn perceptual_loss_shrinks_toward_the_target() {
    let ex = PerceptualExtractor::<f64>::new(PERCEPTUAL_SEED).unwrap();
    let start = noise(32, 32, 5);
    let gt = noise(32, 32, 6);
    let mut last = f64::INFINITY;
    for k in 0..5 {
        let t = k as f64 / 4.0;
        let v: Vec<f64> = start.data.iter().zip(&gt.data).map(|(a, b)| (1.0 - t) * *a as f64 + t * *b as f64).collect();
        let e = Tensor64::from_vec(Shape::new(1, 3, 32, 32), v).unwrap();
        let g: Tensor64 = gt.to_tensor().unwrap();
        let (vgg, img) = reconstruction_loss(&e, &g, &ex).unwrap();
        assert!(vgg.item() < last, "{t}: {} !< {last}", vgg.item());
        last = vgg.item();
        if k == 4 {
            assert!(vgg.item() < 1e-7 && img.item() < 1e-7);
        }
    }
}

#[test]
fn coarse_loss_matches_elementwise_oracle() {
    let mut rng = seed::rng(7, &[]);
    let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.0..1.0)).collect() };
    let (ic, mc, ig, mg) = (v(3 * 16), v(16), v(3 * 16), v(16));
    let t = |d: &Vec<f64>, c| Tensor64::from_vec(Shape::new(1, c, 4, 4), d.clone()).unwrap();
    let got = coarse_loss(&t(&ic, 3), &t(&mc, 1), &t(&ig, 3), &t(&mg, 1)).unwrap().item();
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    assert!((got - (l1(&ic, &ig) + l1(&mc, &mg))).abs() < 1e-7);
}

#[test]
fn finetune_loss_weights() {
    let w = LossWeights::default();
    let l = finetune_loss(&Tensor64::scalar(2.0), &Tensor64::scalar(1.0), &w).unwrap().item();
    assert_eq!(l, 0.5 * 2.0 + 1.0);
    assert_eq!(finetune_loss(&Tensor64::scalar(0.0), &Tensor64::scalar(0.0), &w).unwrap().item(), 0.0);
}

#[test]
fn mse_and_psnr_against_direct_computation() {
    let (a, b) = (noise(16, 8, 8), noise(16, 8, 9));
    let direct = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
    assert!((mse(&a.data, &b.data).unwrap() - direct).abs() < 1e-10);
    assert_eq!(capped(psnr(&a.data, &a.data).unwrap()), PSNR_CAP);
    assert!(mse(&a.data, &b.data[1..]).is_err());
}

#[test]
fn ssim_of_an_image_and_its_negative() {
    let a = noise(32, 32, 10);
    let mut neg = a.clone();
    neg.data.iter_mut().for_each(|v| *v = 1.0 - *v);
    assert!((image_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!(image_ssim(&a, &neg).unwrap() < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn keypoint_distance_ignores_translation(tag in 0u64..1000, dx in -0.5f64..0.5, dy in -0.5f64..0.5) {
        let a = pose(tag);
        let mut b = a.clone();
        for p in b.points.iter_mut() {
            p[0] += dx;
            p[1] += dy;
        }
        prop_assert!(keypoint_distance(&a, &b, LAMBDA_MISS).abs() < 1e-12);
    }

    #[test]
    fn keypoint_distance_is_symmetric(t1 in 0u64..1000, t2 in 0u64..1000) {
        let (a, b) = (pose(t1), pose(t2));
        prop_assert!((keypoint_distance(&a, &b, LAMBDA_MISS) - keypoint_distance(&b, &a, LAMBDA_MISS)).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(t1 in 0u64..1000, t2 in 0u64..1000) {
        let (a, b) = (noise(16, 16, t1), noise(16, 16, t2));
        let ab = ssim(&a.data, &b.data, 3, 16, 16).unwrap();
        let ba = ssim(&b.data, &a.data, 3, 16, 16).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn selection_follows_the_best_candidate_under_permutation(tag in 0u64..200, rot in 0usize..6) {
        let img = noise(64, 32, tag);
        let kp = pose(tag);
        let desc = Descriptors::compute(&img).unwrap();
        // Distinct candidates so the argmax is unique.
        let cands: Vec<ReferenceEntry> = (0..6).map(|j| ReferenceEntry::new(&noise(64, 32, 5000 + tag * 6 + j), pose(9000 + tag * 6 + j)).unwrap()).collect();
        let (best, scores) = select_reference(&kp, &desc, &cands).unwrap();
        let mut rotated = cands.clone();
        rotated.rotate_left(rot);
        let (best_r, _) = select_reference(&kp, &desc, &rotated).unwrap();
        prop_assert_eq!((best_r + rot) % 6, best);
        prop_assert!(scores.iter().all(|s| s.value() <= scores[best].value()));
    }
}
