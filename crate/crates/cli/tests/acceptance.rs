//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line to
//! stderr; the test fails if any criterion does.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::time::Instant;

use gsprune::data::{
    load_ply, read_ply, redundancy_benchmark, save_ply, write_ply, BenchmarkSpec, PLY_PROPERTY_COUNT,
};
use gsprune::importance::{compute_scores, score_oracle, ScoreMode};
use gsprune::masking::{gumbel_sigmoid, sample_gumbel, threshold_for_ratio, MaskKind, MaskTarget};
use gsprune::render::{composite_pixel, project_gaussian, RenderSettings};
use gsprune::train::TrainConfig;
use gsprune::Camera;
use gsprune_cli::experiment::{compare, default_ratios, CompareCell, Prefix, SweepResult};
use gsprune_cli::{cmd_synth, cmd_train, ConfigArgs, SynthArgs, TrainArgs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    id: u32,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn line(v: &Verdict) -> String {
    format!(
        "criterion {:>2} [{}] {}: {}",
        v.id,
        if v.passed { "PASS" } else { "FAIL" },
        v.title,
        v.detail
    )
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let checks = common::gradient_suite(20);
    let secs = start.elapsed().as_secs_f64();
    let mut detail = String::new();
    for c in &checks {
        write!(detail, "{} {:.2e} (< {:.0e}, {} entries); ", c.name, c.max_rel, c.tolerance, c.checked).unwrap();
    }
    write!(detail, "{secs:.1}s").unwrap();
    Verdict {
        id: 1,
        title: "analytic gradients vs central differences",
        passed: checks.iter().all(|c| c.passed()) && secs < 120.0,
        detail,
    }
}

fn conservation() -> Verdict {
    let settings = RenderSettings::default();
    let mut worst: f64 = 0.0;
    let mut rays = 0;
    for k in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0 + k);
        let n = rng.random_range(1..=32);
        let cloud = common::random_cloud(&mut rng, n, 0);
        let cam = common::camera_looking_at_origin(&mut rng, 32);
        let mut splats: Vec<_> = (0..n)
            .filter_map(|i| project_gaussian(&cloud, i, &cam, &settings, None).unwrap())
            .collect();
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        for _ in 0..100 {
            let px = [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)];
            let r = composite_pixel(&splats, px, &settings);
            let total: f64 = r.contributions.iter().map(|c| c.weight).sum::<f64>() + r.transmittance;
            worst = worst.max((total - 1.0).abs());
            rays += 1;
        }
    }
    Verdict {
        id: 2,
        title: "compositing conservation",
        passed: rays >= 10_000 && worst < 1e-9,
        detail: format!("max |sum(alpha T) + T_final - 1| = {worst:.2e} over {rays} rays"),
    }
}

fn gumbel_statistics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6C);
    let draws = 100_000;
    let mut passed = true;
    let mut detail = String::new();
    for x in [0.25, 1.0, 4.0] {
        let above = (0..draws)
            .filter(|_| {
                let (v, _) = gumbel_sigmoid(x, 0.5, sample_gumbel(&mut rng), sample_gumbel(&mut rng)).unwrap();
                v > 0.5
            })
            .count();
        let p = above as f64 / draws as f64;
        let expected = x / (1.0 + x);
        passed &= (p - expected).abs() <= 0.005;
        write!(detail, "x={x}: {p:.4} vs {expected:.4}; ").unwrap();
    }
    Verdict {
        id: 3,
        title: "Gumbel-Sigmoid statistics",
        passed,
        detail,
    }
}

fn score_equivalence() -> Verdict {
    let settings = RenderSettings::default();
    let mut worst: f64 = 0.0;
    for k in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5C0 + k);
        let n = rng.random_range(4..=64);
        let cloud = common::random_cloud(&mut rng, n, 1);
        let cams: Vec<Camera> = (0..3).map(|_| common::camera_looking_at_origin(&mut rng, 24)).collect();
        let cams: Vec<&Camera> = cams.iter().collect();
        for mode in [ScoreMode::RadSplatMax, ScoreMode::MiniSplatSum] {
            let fast = compute_scores(&cloud, &cams, mode, &settings, None).unwrap();
            let slow = score_oracle(&cloud, &cams, mode, &settings).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Verdict {
        id: 8,
        title: "fast scores vs oracle",
        passed: worst < 2e-3,
        detail: format!("max abs difference {worst:.2e} over 10 scenes, both modes"),
    }
}

/// `ceil(ratio * n)` in exact integer arithmetic on the binary value of
/// `ratio`.
fn exact_ceil_product(ratio: f64, n: usize) -> usize {
    if ratio == 0.0 {
        return 0;
    }
    let bits = ratio.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mantissa = (bits & ((1u64 << 52) - 1)) | (1u64 << 52);
    // ratio = mantissa * 2^(exp - 1075), and exp - 1075 < 0 for ratio < 1.
    let shift = (1075 - exp) as u32;
    let num = mantissa as u128 * n as u128;
    let den = 1u128 << shift;
    num.div_ceil(den) as usize
}

fn threshold_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7E);
    let mut failures = 0;
    for k in 0..50 {
        let n = rng.random_range(1..200);
        let levels = rng.random_range(1..8);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        // Odd cases use decimal grid ratios q/20, whose intended value is the
        // fraction itself rather than its nearest double.
        let (ratio, expected) = if k % 2 == 0 {
            let r = rng.random_range(0.0..1.0);
            (r, exact_ceil_product(r, n))
        } else {
            let q = rng.random_range(0..20);
            (q as f64 / 20.0, (q * n).div_ceil(20))
        };
        let keep = threshold_for_ratio(&scores, ratio).unwrap().keep(&scores);
        let pruned = keep.iter().filter(|&&b| !b).count();
        if pruned != expected {
            failures += 1;
        }
    }
    Verdict {
        id: 9,
        title: "hard-threshold exactness",
        passed: failures == 0,
        detail: format!("{failures} of 50 tied score vectors pruned a count other than ceil(ratio N)"),
    }
}

fn config_args(config: Option<std::path::PathBuf>) -> ConfigArgs {
    ConfigArgs {
        preset: "desk".into(),
        config,
        seed: Some(4),
        score: None,
        mask: None,
        mask_target: None,
        tau: None,
        lambda_m: None,
        iters: None,
    }
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_synth(&SynthArgs {
        n: 30,
        copies: 2,
        jitter: 0.5,
        views: 10,
        size: 24,
        holdout_every: 5,
        seed: 9,
        out: data.clone(),
    })
    .unwrap();
    let cfg = dir.path().join("short.cfg");
    fs::write(
        &cfg,
        "total_iters = 240\nmask_start = 150\nmask_end = 160\ndensify_from = 20\n\
         densify_interval = 40\ndensify_until = 120\nscore_update_every = 5\neval_every = 80\n",
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        cmd_train(&TrainArgs {
            data: data.clone(),
            init: None,
            resume: None,
            stop_after: None,
            timing: false,
            config: config_args(Some(cfg.clone())),
            out: out.clone(),
        })
        .unwrap();
        fs::read(out.join("history.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    Verdict {
        id: 10,
        title: "training determinism",
        passed: a == b && !a.is_empty(),
        detail: format!("two runs wrote {} and {} history bytes, identical: {}", a.len(), b.len(), a == b),
    }
}

fn ply_interop() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x91);
    let cloud = common::random_cloud(&mut rng, 25, 3);
    let mut bytes = Vec::new();
    write_ply(&cloud, &mut bytes).unwrap();
    let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap();
    let header = String::from_utf8_lossy(&bytes[..header_end]);
    let properties = header.lines().filter(|l| l.starts_with("property float ")).count();
    let back = read_ply(bytes.as_slice()).unwrap();
    let f32_equal = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (*x as f32) as f64 == *y);
    let fields_ok = back.sh_degree() == 3
        && f32_equal(&cloud.positions, &back.positions)
        && f32_equal(&cloud.log_scales, &back.log_scales)
        && f32_equal(&cloud.rotations, &back.rotations)
        && f32_equal(&cloud.opacity_logits, &back.opacity_logits)
        && f32_equal(&cloud.sh_coeffs, &back.sh_coeffs);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.ply");
    save_ply(&cloud, &path).unwrap();
    let file_ok = load_ply(&path).unwrap() == back;
    Verdict {
        id: 11,
        title: "PLY interop",
        passed: properties == 62 && PLY_PROPERTY_COUNT == 62 && fields_ok && file_ok,
        detail: format!("{properties} float properties; fields preserved to f32: {fields_ok}; file round trip: {file_ok}"),
    }
}

/// Everything measured on one benchmark seed.
struct SeedRun {
    seed: u64,
    control_psnr: f64,
    cells: Vec<CompareCell>,
    sweep: Option<SweepResult>,
    benchmark_secs: f64,
}

impl SeedRun {
    fn cell(&self, kind: MaskKind, target: MaskTarget) -> &CompareCell {
        self.cells.iter().find(|c| c.kind == kind && c.target == target).unwrap()
    }

    fn gumbel(&self) -> &CompareCell {
        self.cell(MaskKind::Gumbel, MaskTarget::Score)
    }
}

fn run_seed(seed: u64, with_sweep: bool) -> SeedRun {
    let settings = RenderSettings::default();
    let (dataset, init) = redundancy_benchmark(&BenchmarkSpec::new(seed), &settings).unwrap();
    let config = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    let start = Instant::now();
    let prefix = Prefix::train(&dataset, init, config, settings).unwrap();
    let control = prefix.control().unwrap();
    let cells = compare(&prefix).unwrap();
    // Prefix, control and the four compare cells; the learned run of the
    // benchmark is one of the cells.
    let benchmark_secs = start.elapsed().as_secs_f64();
    let sweep = with_sweep.then(|| {
        let rows = prefix.hard_threshold(&default_ratios()).unwrap();
        let learned = cells
            .iter()
            .find(|c| c.kind == MaskKind::Gumbel && c.target == MaskTarget::Score)
            .unwrap()
            .outcome
            .clone();
        SweepResult { rows, learned }
    });
    let run = SeedRun {
        seed,
        control_psnr: control.psnr,
        cells,
        sweep,
        benchmark_secs,
    };
    let mut err = std::io::stderr();
    writeln!(err, "seed {seed}: control {:.3} dB", run.control_psnr).unwrap();
    for c in &run.cells {
        writeln!(
            err,
            "  {}/{}: ratio {:.3} psnr {:.3} band {:.3} (sigmoid {:.3})",
            c.kind, c.target, c.outcome.ratio, c.outcome.psnr, c.gates.stochastic_band, c.gates.sigmoid_band
        )
        .unwrap();
    }
    run
}

fn bimodality(runs: &[SeedRun]) -> Verdict {
    let mut passed = true;
    let mut detail = String::new();
    for r in runs {
        let g = &r.gumbel().gates;
        passed &= g.stochastic_band < 0.10 && g.sigmoid_band > 0.30;
        write!(
            detail,
            "seed {}: stochastic {:.3}, plain sigmoid {:.3}; ",
            r.seed, g.stochastic_band, g.sigmoid_band
        )
        .unwrap();
    }
    Verdict {
        id: 4,
        title: "gate bimodality",
        passed,
        detail,
    }
}

fn benchmark(runs: &[SeedRun]) -> Verdict {
    let mut passed = true;
    let mut detail = String::new();
    let mut secs = 0.0;
    for r in runs {
        let o = &r.gumbel().outcome;
        let drop = r.control_psnr - o.psnr;
        passed &= o.ratio >= 0.30 && drop <= 0.5;
        secs += r.benchmark_secs;
        write!(
            detail,
            "seed {}: ratio {:.3}, {:.3} dB vs control {:.3} ({:+.3}); ",
            r.seed, o.ratio, o.psnr, r.control_psnr, -drop
        )
        .unwrap();
    }
    write!(detail, "{secs:.0}s").unwrap();
    Verdict {
        id: 5,
        title: "redundancy benchmark",
        passed: passed && secs < 1200.0,
        detail,
    }
}

fn sweep_shape(runs: &[SeedRun]) -> Verdict {
    let s = runs.iter().find_map(|r| r.sweep.as_ref()).unwrap();
    let at = |ratio: f64| s.rows.iter().find(|r| (r.ratio - ratio).abs() < 0.02).unwrap().psnr;
    let (p1, p9) = (at(0.1), at(0.9));
    let learned = &s.learned;
    let best = s.best_psnr_at_or_above(learned.ratio);
    let gap = best.map(|b| b - learned.psnr);
    let passed = p9 <= p1 - 1.0 && gap.is_some_and(|g| g <= 0.3);
    let curve: Vec<String> = s.rows.iter().map(|r| format!("{:.1}:{:.2}", r.ratio, r.psnr)).collect();
    Verdict {
        id: 6,
        title: "sweep curve shape",
        passed,
        detail: format!(
            "psnr(0.1) {p1:.3}, psnr(0.9) {p9:.3}; learned ratio {:.3} psnr {:.3}, best hard at or above {:?}; curve {}",
            learned.ratio,
            learned.psnr,
            best.map(|b| (b * 1000.0).round() / 1000.0),
            curve.join(" ")
        ),
    }
}

fn ste_trend(runs: &[SeedRun]) -> Verdict {
    let mut wins = 0;
    let mut detail = String::new();
    for r in runs {
        let g = &r.gumbel().outcome;
        let s = &r.cell(MaskKind::Ste, MaskTarget::Score).outcome;
        let win = s.ratio > g.ratio && s.psnr < g.psnr;
        wins += win as usize;
        write!(
            detail,
            "seed {}: STE ratio {:.3} psnr {:.3} vs Gumbel ratio {:.3} psnr {:.3}; ",
            r.seed, s.ratio, s.psnr, g.ratio, g.psnr
        )
        .unwrap();
    }
    Verdict {
        id: 7,
        title: "STE comparison trend",
        passed: 2 * wins > runs.len(),
        detail,
    }
}

#[test]
fn acceptance() {
    let mut verdicts = vec![gradients(), conservation(), gumbel_statistics()];
    let runs: Vec<SeedRun> = (0..3).map(|seed| run_seed(seed, seed == 0)).collect();
    verdicts.push(bimodality(&runs));
    verdicts.push(benchmark(&runs));
    verdicts.push(sweep_shape(&runs));
    verdicts.push(ste_trend(&runs));
    verdicts.push(score_equivalence());
    verdicts.push(threshold_exactness());
    verdicts.push(determinism());
    verdicts.push(ply_interop());
    verdicts.sort_by_key(|v| v.id);
    let report: Vec<String> = verdicts.iter().map(line).collect();
    // Written straight to stderr so the lines show even when the harness
    // captures output of passing tests.
    writeln!(std::io::stderr(), "{}", report.join("\n")).unwrap();
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}\n{}", report.join("\n"));
}
