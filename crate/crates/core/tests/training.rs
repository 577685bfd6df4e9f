use gsprune::data::{read_checkpoint, redundancy_benchmark, write_checkpoint, BenchmarkSpec, Dataset};
use gsprune::render::RenderSettings;
use gsprune::train::{write_history_csv, TrainConfig, Trainer};
use gsprune::GaussianCloud;

/// A reduced benchmark: 40 ground-truth Gaussians, 12 cameras at 24x24.
fn small_benchmark(seed: u64) -> (Dataset, GaussianCloud) {
    let mut spec = BenchmarkSpec::new(seed);
    spec.scene.n_gaussians = 40;
    spec.orbit.count = 12;
    spec.orbit.width = 24;
    spec.orbit.height = 24;
    spec.holdout_every = 6;
    redundancy_benchmark(&spec, &RenderSettings::default()).unwrap()
}

/// The desk preset compressed to 300 iterations.
fn short_config(seed: u64) -> TrainConfig {
    TrainConfig {
        total_iters: 300,
        mask_start: 195,
        mask_end: 200,
        densify_from: 20,
        densify_interval: 50,
        densify_until: 150,
        score_update_every: 2,
        eval_every: 100,
        seed,
        ..TrainConfig::desk()
    }
}

fn history_csv(t: &Trainer<'_>) -> Vec<u8> {
    let mut out = Vec::new();
    write_history_csv(&t.history, &mut out).unwrap();
    out
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let (ds, init) = small_benchmark(1);
    let run = || {
        let mut t = Trainer::new(&ds, init.clone(), short_config(5), RenderSettings::default()).unwrap();
        t.run().unwrap();
        (history_csv(&t), t.cloud)
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    assert_eq!(h1, h2);
    assert_eq!(c1, c2);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let (ds, init) = small_benchmark(2);
    let settings = RenderSettings::default();
    let mut full = Trainer::new(&ds, init.clone(), short_config(3), settings.clone()).unwrap();
    full.run().unwrap();

    // Stop once during densification and once inside the mask window.
    for stop in [120, 197] {
        let mut first = Trainer::new(&ds, init.clone(), short_config(3), settings.clone()).unwrap();
        first.run_until(stop).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&first.checkpoint(), &mut bytes).unwrap();
        let restored = read_checkpoint(bytes.as_slice()).unwrap();
        let mut second = Trainer::resume(&ds, restored).unwrap();
        second.run().unwrap();
        assert_eq!(history_csv(&second), history_csv(&full), "stopped at {stop}");
        assert_eq!(second.cloud, full.cloud, "stopped at {stop}");
    }
}

#[test]
fn gaussian_count_drops_once_at_the_prune() {
    let (ds, init) = small_benchmark(3);
    let mut t = Trainer::new(&ds, init, short_config(0), RenderSettings::default()).unwrap();
    t.run().unwrap();
    let c = t.config.clone();
    let event = t.prune_event.expect("the learned mask prunes once");
    assert_eq!(event.iteration, c.mask_end);
    assert!(t.history.iter().all(|r| r.loss.is_finite()));

    // Rows hold the state after `iter` completed iterations; densification
    // runs after iterations whose completed count is a multiple of the
    // interval, and the prune runs before iteration `mask_end`.
    let is_densify_step = |done: u64| done > c.densify_from && done < c.densify_until && done % c.densify_interval == 0;
    for pair in t.history.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.n_gaussians < a.n_gaussians {
            assert!(
                is_densify_step(b.iter) || a.iter == c.mask_end,
                "N dropped from {} to {} after iteration {}",
                a.n_gaussians,
                b.n_gaussians,
                a.iter
            );
        }
        if a.iter >= c.densify_until && a.iter != c.mask_end {
            assert!(b.n_gaussians == a.n_gaussians, "N changed after iteration {}", a.iter);
        }
    }
    let last = t.history.last().unwrap();
    assert_eq!(last.prune_ratio, event.pruned as f64 / event.n_before as f64);
    assert_eq!(last.prune_ratio, t.prune_ratio());
}

#[test]
fn without_sparsity_pressure_the_mean_mask_stays_high() {
    for seed in 0..5 {
        let (ds, init) = small_benchmark(10 + seed);
        let config = TrainConfig {
            lambda_m: 0.0,
            ..short_config(seed)
        };
        let end = config.mask_end;
        let mut t = Trainer::new(&ds, init, config, RenderSettings::default()).unwrap();
        t.run_until(end).unwrap();
        let m = &t.cloud.mask_params;
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        assert!(mean >= 0.9, "seed {seed}: mean mask {mean}");
    }
}
