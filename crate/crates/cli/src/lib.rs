//! Command implementations behind the `gsprune` binary.

pub mod experiment;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use gsprune::data::{
    duplicate_with_jitter, load_checkpoint, load_dataset, load_ply, make_synthetic_cloud, orbit_cameras,
    render_dataset, save_checkpoint, save_dataset, save_png, save_ply, write_raw_image, Dataset, OrbitSpec,
    SceneSpec,
};
use gsprune::importance::ScoreMode;
use gsprune::masking::{Gates, MaskTarget};
use gsprune::metrics::eval_model;
use gsprune::render::{render_image, Gate, RenderSettings};
use gsprune::train::{write_history_csv, TrainConfig, Trainer};
use gsprune::GaussianCloud;

use experiment::{compare, compare_csv, default_ratios, sweep, Prefix};

#[derive(Debug, Parser)]
#[command(name = "gsprune", version, about = "Gaussian splatting with trainable pruning masks, on the CPU")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "GSPRUNE_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and a redundant initial cloud.
    Synth(SynthArgs),
    /// Train a model, optionally with a learned pruning mask.
    Train(TrainArgs),
    /// Evaluate a model on a dataset's held-out views.
    Eval(EvalArgs),
    /// Render one dataset camera.
    Render(RenderArgs),
    /// Hard-threshold pruning sweep plus the learned point.
    Sweep(SweepArgs),
    /// Gumbel vs STE masks, on the score and directly on opacity and scale.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Ground-truth Gaussians.
    #[arg(long, default_value_t = 250, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Copies of each ground-truth Gaussian in the initial cloud.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub copies: u64,
    /// Copy offsets in units of each Gaussian's largest scale.
    #[arg(long, default_value_t = 0.5)]
    pub jitter: f64,
    /// Orbit cameras.
    #[arg(long, default_value_t = 24)]
    pub views: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Every this many cameras one goes to the test split.
    #[arg(long, default_value_t = 8)]
    pub holdout_every: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by every command that trains.
#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// Base schedule.
    #[arg(long, default_value = "desk", value_parser = ["desk", "full"])]
    pub preset: String,
    /// `key = value` file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Importance score.
    #[arg(long, value_parser = ["radsplat", "minisplat"])]
    pub score: Option<String>,
    /// Mask kind.
    #[arg(long, value_parser = ["gumbel", "ste", "off"])]
    pub mask: Option<String>,
    /// What the mask gates.
    #[arg(long, value_parser = ["score", "opacity", "opacity-scale"])]
    pub mask_target: Option<String>,
    /// Gumbel-Sigmoid temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Weight of the mask sparsity term.
    #[arg(long)]
    pub lambda_m: Option<f64>,
    /// Total training iterations.
    #[arg(long)]
    pub iters: Option<u64>,
}

impl ConfigArgs {
    /// Preset, then config file, then individual flags.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            c.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(s) = &self.score {
            c.score_mode = s.parse::<ScoreMode>()?;
        }
        if let Some(m) = &self.mask {
            c.set("mask", m)?;
        }
        if let Some(t) = &self.mask_target {
            c.mask_target = t.parse::<MaskTarget>()?;
        }
        if let Some(t) = self.tau {
            c.tau = t;
        }
        if let Some(l) = self.lambda_m {
            c.lambda_m = l;
        }
        if let Some(n) = self.iters {
            c.total_iters = n;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Initial cloud (defaults to `<data>/init.ply`).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// Stop after this many iterations and write a checkpoint.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Include wall-clock columns in the evaluation report.
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint or PLY file.
    #[arg(long)]
    pub model: PathBuf,
    /// Include wall-clock columns.
    #[arg(long)]
    pub timing: bool,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Dataset directory whose cameras are used.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint or PLY file.
    #[arg(long)]
    pub model: PathBuf,
    /// View index as listed in `cameras.csv`.
    #[arg(long)]
    pub camera: usize,
    /// Output PNG; a `.raw` float dump is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Initial cloud (defaults to `<data>/init.ply`).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Comma-separated pruning ratios in [0, 1).
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Initial cloud (defaults to `<data>/init.ply`).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        ensure!(n >= 1, "--threads must be at least 1");
        // Fails only if a pool already exists, e.g. when called twice in one
        // process; the existing pool is then kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

fn print_config(config: &TrainConfig) {
    println!("# resolved config");
    print!("{}", config.to_text());
}

fn load_init(data: &Path, init: Option<&Path>) -> Result<GaussianCloud> {
    let path = init.map(Path::to_path_buf).unwrap_or_else(|| data.join("init.ply"));
    load_ply(&path).with_context(|| format!("loading initial cloud {}", path.display()))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    ensure!(a.views >= 2, "--views must be at least 2");
    ensure!(a.size >= 1, "--size must be at least 1");
    ensure!(a.holdout_every >= 1, "--holdout-every must be at least 1");
    let scene = SceneSpec {
        n_gaussians: a.n as usize,
        seed: a.seed,
        ..SceneSpec::default()
    };
    let orbit = OrbitSpec {
        count: a.views,
        width: a.size,
        height: a.size,
        ..OrbitSpec::default()
    };
    let settings = RenderSettings::default();
    let gt = make_synthetic_cloud(&scene)?;
    let cameras = orbit_cameras(&orbit)?;
    let dataset = render_dataset(&gt, &cameras, a.holdout_every, &settings, a.seed)?;
    let init = duplicate_with_jitter(&gt, a.copies as usize, a.jitter, a.seed.wrapping_add(1))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_dataset(&dataset, &a.out)?;
    save_ply(&init, &a.out.join("init.ply"))?;
    println!(
        "wrote {} ({} train / {} test views, {} ground-truth Gaussians, {} initial)",
        a.out.display(),
        dataset.train.len(),
        dataset.test.len(),
        gt.len(),
        init.len()
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let dataset = load_data(&a.data)?;
    let settings = RenderSettings::default();
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            Trainer::resume(&dataset, ckpt)?
        }
        None => {
            let config = a.config.resolve()?;
            let init = load_init(&a.data, a.init.as_deref())?;
            Trainer::new(&dataset, init, config, settings)?
        }
    };
    print_config(&trainer.config);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let end = a.stop_after.unwrap_or(trainer.config.total_iters);
    trainer.run_until(end)?;
    info!("stopped at iteration {} with {} Gaussians", trainer.iteration, trainer.cloud.len());

    let mut history = Vec::new();
    write_history_csv(&trainer.history, &mut history)?;
    fs::write(a.out.join("history.csv"), history)?;
    save_checkpoint(&trainer.checkpoint(), &a.out.join("checkpoint.bin"))?;
    write_file(&a.out.join("config.txt"), &trainer.config.to_text())?;
    if trainer.iteration < trainer.config.total_iters {
        println!("checkpoint at iteration {} written to {}", trainer.iteration, a.out.display());
        return Ok(());
    }
    save_ply(&trainer.cloud, &a.out.join("final.ply"))?;
    if !dataset.test.is_empty() {
        let report = trainer.evaluate()?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv, a.timing)?;
        fs::write(a.out.join("report.csv"), csv)?;
        println!(
            "psnr {:.3} ssim {:.4} gaussians {} prune ratio {:.4}",
            report.mean_psnr, report.mean_ssim, report.n_gaussians, report.prune_ratio
        );
    }
    Ok(())
}

/// A loaded model, with the deterministic gates of a still-active mask.
struct Model {
    cloud: GaussianCloud,
    gates: Option<(Gates, MaskTarget)>,
    prune_ratio: f64,
}

impl Model {
    fn gate(&self) -> Option<Gate<'_>> {
        self.gates.as_ref().map(|(g, target)| Gate {
            values: &g.values,
            target: target.gate_target(),
        })
    }
}

fn load_model(path: &Path, dataset: &Dataset) -> Result<Model> {
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        return Ok(Model {
            cloud: load_ply(path).with_context(|| format!("loading {}", path.display()))?,
            gates: None,
            prune_ratio: 0.0,
        });
    }
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let t = Trainer::resume(dataset, ckpt)?;
    let gates = match (t.deterministic_gates()?, &t.mask) {
        (Some(g), Some(m)) => Some((g, m.target)),
        _ => None,
    };
    Ok(Model {
        prune_ratio: t.prune_ratio(),
        cloud: t.cloud,
        gates,
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let dataset = load_data(&a.data)?;
    let model = load_model(&a.model, &dataset)?;
    let report = eval_model(
        &model.cloud,
        &dataset.test,
        &RenderSettings::default(),
        model.gate().as_ref(),
        model.prune_ratio,
    )?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv, a.timing)?;
    fs::write(&a.out, csv).with_context(|| format!("writing {}", a.out.display()))?;
    println!("psnr {:.3} ssim {:.4} over {} views", report.mean_psnr, report.mean_ssim, report.views.len());
    Ok(())
}

pub fn cmd_render(a: &RenderArgs) -> Result<()> {
    let dataset = load_data(&a.data)?;
    let mut indices: Vec<usize> = dataset.train.iter().chain(&dataset.test).map(|v| v.index).collect();
    indices.sort_unstable();
    let Some(view) = dataset.train.iter().chain(&dataset.test).find(|v| v.index == a.camera) else {
        match (indices.first(), indices.last()) {
            (Some(lo), Some(hi)) => bail!("camera {} not found; valid indices are {lo}..={hi}", a.camera),
            _ => bail!("dataset has no cameras"),
        }
    };
    let model = load_model(&a.model, &dataset)?;
    let (img, _) = render_image(&model.cloud, &view.camera, &RenderSettings::default(), model.gate().as_ref())?;
    save_png(&img, &a.out)?;
    write_raw_image(&img, fs::File::create(a.out.with_extension("raw"))?)?;
    println!("rendered camera {} to {}", a.camera, a.out.display());
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let config = a.config.resolve()?;
    print_config(&config);
    let ratios = a.ratios.clone().unwrap_or_else(default_ratios);
    for &r in &ratios {
        ensure!((0.0..1.0).contains(&r), "ratio {r} is outside [0, 1)");
    }
    let dataset = load_data(&a.data)?;
    let init = load_init(&a.data, a.init.as_deref())?;
    let prefix = Prefix::train(&dataset, init, config, RenderSettings::default())?;
    let result = sweep(&prefix, &ratios)?;
    fs::create_dir_all(&a.out)?;
    let csv = result.to_csv();
    write_file(&a.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let config = a.config.resolve()?;
    print_config(&config);
    let dataset = load_data(&a.data)?;
    let init = load_init(&a.data, a.init.as_deref())?;
    let prefix = Prefix::train(&dataset, init, config, RenderSettings::default())?;
    let cells = compare(&prefix)?;
    fs::create_dir_all(&a.out)?;
    let csv = compare_csv(&cells);
    write_file(&a.out.join("compare.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
