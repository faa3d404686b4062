use lomoe_core::denoiser::AttentionMap;
use lomoe_core::preserve::{guided_update_traced, l_b_grad, l_xa, GuidanceTarget};
use lomoe_core::schedule::{make_schedule, ScheduleKind};
use lomoe_core::toy::{toy_suite, ToyCase, ToySpec};
use lomoe_core::{
    build_mask_set, invert, reconstruct, AttentionHead, GuidanceConfig, LatentGrid, RegConfig, SeededRng, ToyWorld,
};
use proptest::prelude::*;

fn setup() -> (ToyWorld, ToyCase, AttentionHead) {
    let spec = ToySpec::bench();
    let world = spec.build().unwrap();
    let case = toy_suite(&spec, &world, 1, 5).unwrap().remove(0);
    let head = AttentionHead::for_world(&world, 1000, 42).unwrap();
    (world, case, head)
}

fn random_map(seed: u64, h: usize, w: usize, l: usize) -> AttentionMap {
    let mut rng = SeededRng::new(seed, 0);
    let mut values = Vec::with_capacity(h * w * l);
    for _ in 0..h * w {
        let row: Vec<f64> = (0..l).map(|_| rng.uniform(0.01, 1.0)).collect();
        let s: f64 = row.iter().sum();
        values.extend(row.iter().map(|v| v / s));
    }
    AttentionMap::from_values(h, w, l, values, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn background_gradient_vanishes_inside_masks(seed in any::<u64>(), bits in prop::collection::vec(any::<bool>(), 20)) {
        let mut rng = SeededRng::new(seed, 0);
        let y = LatentGrid::standard_normal(4, 5, 3, &mut rng);
        let x = LatentGrid::standard_normal(4, 5, 3, &mut rng);
        let m0 = LatentGrid::from_fn(4, 5, 1, |r, c, _| if bits[r * 5 + c] { 1.0 } else { 0.0 });
        let g = l_b_grad(&y, &x, &m0).unwrap();
        for p in 0..20 {
            if !bits[p] {
                prop_assert!(g.pixel(p).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn attention_loss_only_sees_differing_rows(seed in any::<u64>(), other in any::<u64>(), bits in prop::collection::vec(any::<bool>(), 20)) {
        let (h, w, l) = (4, 5, 3);
        let a = random_map(seed, h, w, l);
        let b = random_map(other, h, w, l);
        // rows outside `bits` are copied from `a`
        let mixed: Vec<f64> = (0..h * w).flat_map(|p| if bits[p] { b.row(p).to_vec() } else { a.row(p).to_vec() }).collect();
        let mixed = AttentionMap::from_values(h, w, l, mixed, 1.0).unwrap();
        let full = LatentGrid::filled(h, w, 1, 1.0);
        let region = LatentGrid::from_fn(h, w, 1, |r, c, _| if bits[r * w + c] { 1.0 } else { 0.0 });
        let x = l_xa(&a, &mixed, &full).unwrap();
        let y = l_xa(&a, &b, &region).unwrap();
        prop_assert!((x - y).abs() <= 1e-12);
        prop_assert_eq!(l_xa(&a, &a, &full).unwrap(), 0.0);
    }
}

#[test]
fn guidance_is_identity_without_weights_and_descends_otherwise() {
    let (world, case, head) = setup();
    let sched = make_schedule(1000, ScheduleKind::LinearBeta).unwrap();
    let trace = invert(&case.image, &case.source, 20, &RegConfig::default(), &world, &sched).unwrap();
    let cache = reconstruct(&trace, &world, &sched, &head, 1.25, 1.0, true).unwrap();
    let (h, w, _) = world.shape();
    let ms = build_mask_set(h, w, &case.masks).unwrap();
    for k in [20, 12, 3] {
        let e = cache.entry(k);
        let target = GuidanceTarget {
            t: e.t,
            x_prime: &e.latent,
            reference: e.attention.as_ref().unwrap(),
            masks: &ms,
            prompts: &case.targets,
            head: &head,
        };
        let mut y = e.latent.clone();
        y.axpy(0.3, &LatentGrid::standard_normal(h, w, y.channels(), &mut SeededRng::new(k as u64, 9))).unwrap();
        let off = GuidanceConfig { lambda_xa: 0.0, lambda_b: 0.0, ..GuidanceConfig::default() };
        let (same, hist) = guided_update_traced(&y, &target, &off).unwrap();
        assert_eq!(same, y);
        assert!(hist.is_empty());
        let on = GuidanceConfig { steps: 6, ..GuidanceConfig::default() };
        let (_, hist) = guided_update_traced(&y, &target, &on).unwrap();
        assert!(hist.len() > 1);
        assert!(hist.windows(2).all(|p| p[1] <= p[0]), "{hist:?}");
    }
}

#[test]
fn rectified_reconstruction_follows_inversion_path() {
    let (world, case, head) = setup();
    let sched = make_schedule(1000, ScheduleKind::LinearBeta).unwrap();
    let trace = invert(&case.image, &case.source, 25, &RegConfig::default(), &world, &sched).unwrap();
    let cache = reconstruct(&trace, &world, &sched, &head, 1.25, 1.0, true).unwrap();
    for k in 0..=trace.steps() {
        assert_eq!(cache.entry(k).latent, trace.latents[k], "step {k}");
    }
    assert_eq!(cache.x_prime_0(), &case.image);
}
