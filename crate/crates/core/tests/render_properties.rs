mod common;

use common::{camera_looking_at_origin, random_cloud};
use gsprune::masking::{prune_cloud, MaskKind, MaskState, MaskTarget};
use gsprune::render::{composite_pixel, project_gaussian, render_image, Gate, GateTarget, RenderSettings};
use gsprune::scene::logit;
use gsprune::GaussianCloud;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn scene(seed: u64, n: usize) -> (GaussianCloud, gsprune::Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = random_cloud(&mut rng, n, 1);
    let camera = camera_looking_at_origin(&mut rng, 24);
    (cloud, camera)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compositing_conserves_energy(seed in any::<u64>(), n in 1usize..24) {
        let settings = RenderSettings::default();
        let (cloud, camera) = scene(seed, n);
        let mut splats = Vec::new();
        for i in 0..cloud.len() {
            if let Some(p) = project_gaussian(&cloud, i, &camera, &settings, None).unwrap() {
                splats.push(p);
            }
        }
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
        for _ in 0..20 {
            let px = [rng.random_range(0.0..24.0), rng.random_range(0.0..24.0)];
            let r = composite_pixel(&splats, px, &settings);
            let total: f64 = r.contributions.iter().map(|c| c.weight).sum::<f64>() + r.transmittance;
            prop_assert!((total - 1.0).abs() < 1e-9);
            let mut last = 1.0;
            for c in &r.contributions {
                prop_assert!(c.transmittance <= last && c.transmittance >= 0.0);
                prop_assert!((0.0..=1.0).contains(&c.alpha));
                prop_assert_eq!(c.weight, c.alpha * c.transmittance);
                last = c.transmittance;
            }
            prop_assert!(r.transmittance <= last && r.transmittance >= 0.0);
        }
    }

    #[test]
    fn render_is_permutation_invariant(seed in any::<u64>(), n in 2usize..16) {
        let settings = RenderSettings::default();
        let (cloud, camera) = scene(seed, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(seed as usize % n);
        let mut permuted = GaussianCloud::new(cloud.sh_degree());
        for &i in &order {
            permuted.push(&cloud.get(i));
        }
        let (a, _) = render_image(&cloud, &camera, &settings, None).unwrap();
        let (b, _) = render_image(&permuted, &camera, &settings, None).unwrap();
        prop_assert!(max_abs_diff(&a.data, &b.data) < 1e-12);
    }

    #[test]
    fn gated_render_equals_premultiplied_cloud(seed in any::<u64>(), n in 1usize..12) {
        let settings = RenderSettings::default();
        let (cloud, camera) = scene(seed, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6A7E);
        let gates: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();

        let (gated, _) = render_image(&cloud, &camera, &settings, Some(&Gate::opacity(&gates))).unwrap();
        let mut pre = cloud.clone();
        for i in 0..n {
            pre.opacity_logits[i] = logit(gates[i] * cloud.opacity(i));
        }
        let (plain, _) = render_image(&pre, &camera, &settings, None).unwrap();
        prop_assert!(max_abs_diff(&gated.data, &plain.data) < 1e-9);

        let both = Gate { values: &gates, target: GateTarget::OpacityScale };
        let (gated, _) = render_image(&cloud, &camera, &settings, Some(&both)).unwrap();
        for i in 0..n {
            for a in 0..3 {
                pre.log_scales[3 * i + a] += gates[i].ln();
            }
        }
        let (plain, _) = render_image(&pre, &camera, &settings, None).unwrap();
        prop_assert!(max_abs_diff(&gated.data, &plain.data) < 1e-9);
    }

    #[test]
    fn pruning_equals_zero_gates(seed in any::<u64>(), n in 2usize..12) {
        let settings = RenderSettings::default();
        let (mut cloud, camera) = scene(seed, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2E0);
        // Gates of exactly 0 or 1; the deterministic gate of m = 0 is 0 and
        // that of m = 1 sits on the keep threshold.
        let m: Vec<f64> = (0..n).map(|i| if i > 0 && rng.random_bool(0.4) { 0.0 } else { 1.0 }).collect();
        let (gated, _) = render_image(&cloud, &camera, &settings, Some(&Gate::opacity(&m))).unwrap();
        cloud.mask_params = m;
        let mask = MaskState::new(MaskKind::Gumbel, MaskTarget::Opacity, 0.5, 0).unwrap();
        prune_cloud(&mut cloud, &mask, None).unwrap();
        let (pruned, _) = render_image(&cloud, &camera, &settings, None).unwrap();
        prop_assert_eq!(gated.data, pruned.data);
    }
}

#[test]
fn render_does_not_depend_on_thread_count() {
    let settings = RenderSettings::default();
    let (cloud, camera) = scene(11, 40);
    let render = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| render_image(&cloud, &camera, &settings, None).unwrap().0)
    };
    assert_eq!(render(1), render(3));
}
