use proptest::prelude::*;
use rand::Rng;

use rerender_core::model::{
    blend_features, coarse_field, keypoints_to_heatmaps, warp_pyramid, BlendRatio, FeaturePyramid, FrameBatch,
    KeypointSet, ModelConfig, RerenderModel, Variant, NUM_KEYPOINTS,
};
use rerender_core::nn::ParamBuilder;
use rerender_core::seed;
use rerender_core::{Shape, Tensor32, Tensor64};

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        base_channels: 4,
        refine_channels: 4,
        spade_hidden: 4,
        variant,
        ..ModelConfig::default()
    }
}

fn random_tensor(shape: Shape, tag: u64) -> Tensor32 {
    let mut rng = seed::rng(7, &[tag]);
    Tensor32::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn random_keypoints(tag: u64) -> KeypointSet {
    let mut rng = seed::rng(11, &[tag]);
    let mut points = [[0.0; 2]; NUM_KEYPOINTS];
    let mut visible = [false; NUM_KEYPOINTS];
    for k in 0..NUM_KEYPOINTS {
        points[k] = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
        visible[k] = rng.random_bool(0.8);
    }
    KeypointSet::new(points, visible)
}

fn batch(cfg: &ModelConfig, n: usize, same_pose: bool) -> FrameBatch<f32> {
    let s = Shape::new(n, 3, cfg.height, cfg.width);
    let input_keypoints: Vec<_> = (0..n as u64).map(random_keypoints).collect();
    let reference_keypoints =
        if same_pose { input_keypoints.clone() } else { (0..n as u64).map(|i| random_keypoints(100 + i)).collect() };
    FrameBatch { input: random_tensor(s, 1), reference: random_tensor(s, 2), input_keypoints, reference_keypoints }
}

fn pyramid(n: usize, channels: [usize; 4], h: usize, w: usize, tag: u64) -> FeaturePyramid<f32> {
    let levels = (0..4)
        .map(|i| random_tensor(Shape::new(n, channels[i], h >> i, w >> i), tag * 10 + i as u64))
        .collect();
    FeaturePyramid::new(levels).unwrap()
}

#[test]
fn zero_field_warp_is_identity() {
    let f = pyramid(2, [3, 6, 12, 24], 32, 16, 1);
    let zero = Tensor32::zeros(Shape::new(2, 2, 8, 4));
    let w = warp_pyramid(&f, &zero).unwrap();
    for (a, b) in f.levels().iter().zip(w.levels()) {
        assert_eq!(a.to_vec(), b.to_vec());
    }
}

#[test]
fn identical_poses_give_zero_coarse_field() {
    let cfg = small(Variant::Full);
    let kp: Vec<_> = (0..3).map(random_keypoints).collect();
    let heat = keypoints_to_heatmaps::<f32>(&kp, 8, 8, cfg.sigma_pixels()).unwrap();
    let wc = coarse_field(&kp, &kp, &heat, cfg.background_weight).unwrap();
    assert!(wc.to_vec().iter().all(|&v| v == 0.0));

    let model = RerenderModel::<f32>::new(cfg.clone()).unwrap();
    let field = model.warp_field(&batch(&cfg, 2, true)).unwrap();
    assert!(field.coarse.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn refine_field_is_zero_at_initialization() {
    let cfg = small(Variant::Full);
    let model = RerenderModel::<f32>::new(cfg.clone()).unwrap();
    let b = batch(&cfg, 2, false);
    let field = model.warp_field(&b).unwrap();
    assert!(field.refine.to_vec().iter().all(|&v| v == 0.0));
    assert_eq!(field.total.to_vec(), field.coarse.to_vec());
    assert!(field.coarse.to_vec().iter().any(|&v| v != 0.0));
}

#[test]
fn untrained_composite_is_the_coarse_image() {
    let cfg = small(Variant::Full);
    let model = RerenderModel::<f32>::new(cfg.clone()).unwrap();
    let pred = model.forward(&batch(&cfg, 2, false)).unwrap();
    assert!(pred.detail.unwrap().to_vec().iter().all(|&v| v == 0.0));
    assert_eq!(pred.enhanced.to_vec(), pred.coarse.unwrap().image.to_vec());
}

#[test]
fn detail_only_starts_from_the_background_level() {
    let cfg = small(Variant::DetailOnly);
    let model = RerenderModel::<f32>::new(cfg.clone()).unwrap();
    let pred = model.forward(&batch(&cfg, 1, false)).unwrap();
    assert!(pred.coarse.is_none());
    assert!(pred.enhanced.to_vec().iter().all(|&v| v == cfg.background_level as f32));
}

#[test]
fn coarse_only_has_no_detail_path() {
    let cfg = small(Variant::CoarseOnly);
    let model = RerenderModel::<f32>::new(cfg.clone()).unwrap();
    let pred = model.forward(&batch(&cfg, 1, false)).unwrap();
    assert!(pred.field.is_none() && pred.detail.is_none());
    assert_eq!(pred.enhanced.to_vec(), pred.coarse.unwrap().image.to_vec());
}

#[test]
fn spade_with_zero_conditioning_is_instance_norm() {
    use rerender_core::model::Spade;
    let mut b = ParamBuilder::<f64>::new("t", 3);
    let spade = Spade::new(&mut b, "s", 3, 2, 4).unwrap();
    let x = Tensor64::from_vec(Shape::new(1, 3, 4, 4), (0..48).map(|i| ((i * 7) % 11) as f64).collect()).unwrap();
    let out = spade.forward(&x, &Tensor64::zeros(Shape::new(1, 2, 4, 4))).unwrap();
    assert_eq!(out.to_vec(), x.instance_norm().unwrap().to_vec());
}

#[test]
fn parameter_names_carry_branch_prefixes() {
    let model = RerenderModel::<f32>::new(small(Variant::Full)).unwrap();
    for p in model.params.iter() {
        assert!(
            ["coarse.", "ref_encoder.", "refine.", "decoder."].iter().any(|pre| p.name.starts_with(pre)),
            "{}",
            p.name
        );
    }
    assert!(model.params.get("coarse.enc.0.weight").is_some());
}

#[test]
fn same_seed_same_weights() {
    let a = RerenderModel::<f32>::new(small(Variant::Full)).unwrap();
    let b = RerenderModel::<f32>::new(small(Variant::Full)).unwrap();
    let c = RerenderModel::<f32>::new(ModelConfig { seed: 1, ..small(Variant::Full) }).unwrap();
    let w = |m: &RerenderModel<f32>| m.params.get("coarse.enc.0.weight").unwrap().tensor.to_vec();
    assert_eq!(w(&a), w(&b));
    assert_ne!(w(&a), w(&c));
}

#[test]
fn half_precision_weights_are_representable() {
    let m = RerenderModel::<f32>::new(small(Variant::Full)).unwrap();
    let h = m.to_half_precision().unwrap();
    for (p, q) in m.params.iter().zip(h.params.iter()) {
        for (&a, &b) in p.tensor.data().iter().zip(q.tensor.data().iter()) {
            assert_eq!(half::f16::from_f32(a).to_f32(), b);
        }
    }
}

#[test]
fn shape_errors_are_reported() {
    let cfg = small(Variant::Full);
    let model = RerenderModel::<f32>::new(cfg.clone()).unwrap();
    let mut b = batch(&cfg, 2, false);
    b.reference_keypoints.pop();
    assert!(model.forward(&b).is_err());
    let bad = ModelConfig { height: 48, ..small(Variant::Full) };
    assert!(RerenderModel::<f32>::new(bad).is_err());
}

fn blend_case() -> (FeaturePyramid<f32>, FeaturePyramid<f32>) {
    let g = pyramid(1, [2, 4, 8, 16], 16, 8, 3);
    let w = pyramid(1, [2, 4, 8, 16], 32, 16, 4);
    (g, w)
}

#[test]
fn blend_endpoints_are_exact() {
    let (g, w) = blend_case();
    let b0 = blend_features(&g, &w, BlendRatio::new(0.0).unwrap()).unwrap();
    let b1 = blend_features(&g, &w, BlendRatio::new(1.0).unwrap()).unwrap();
    for i in 0..4 {
        assert_eq!(b0.level(i).to_vec(), w.level(i).to_vec());
        let s = w.level(i).shape();
        assert_eq!(b1.level(i).to_vec(), g.level(i).resize(s.h(), s.w()).unwrap().to_vec());
    }
    assert!(BlendRatio::new(1.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn blend_is_linear_in_alpha(a in 0.0f64..1.0, t in 0.0f64..1.0) {
        let (g, w) = blend_case();
        let c = a * t;
        let bc = blend_features(&g, &w, BlendRatio::new(c).unwrap()).unwrap();
        let b0 = blend_features(&g, &w, BlendRatio::new(0.0).unwrap()).unwrap();
        let ba = blend_features(&g, &w, BlendRatio::new(a).unwrap()).unwrap();
        // F(t a) = (1 - t) F(0) + t F(a).
        for i in 0..4 {
            for ((x, y), z) in bc.level(i).to_vec().iter().zip(b0.level(i).to_vec()).zip(ba.level(i).to_vec()) {
                let want = (1.0 - t) * y as f64 + t * z as f64;
                prop_assert!((*x as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn coarse_field_vanishes_for_shared_poses(tag in 0u64..1000) {
        let kp = vec![random_keypoints(tag)];
        let heat = keypoints_to_heatmaps::<f64>(&kp, 8, 8, 1.6).unwrap();
        let wc = coarse_field(&kp, &kp, &heat, 0.1).unwrap();
        prop_assert!(wc.to_vec().iter().all(|&v| v == 0.0));
    }
}
