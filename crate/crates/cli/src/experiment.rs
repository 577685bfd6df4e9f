//! Multi-run experiments that share one training prefix.
//!
//! Every run of an experiment uses the same seed and configuration, so their
//! trajectories are identical up to the mask window. The prefix is trained
//! once and cloned, which makes a sweep or a four-cell comparison cost little
//! more than the post-window tails.

use anyhow::{Context, Result};
use gsprune::data::Dataset;
use gsprune::masking::{MaskKind, MaskTarget};
use gsprune::render::RenderSettings;
use gsprune::scene::sigmoid;
use gsprune::train::{TrainConfig, Trainer};
use gsprune::GaussianCloud;

/// Final quality of one finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub ratio: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n_gaussians: usize,
}

impl Outcome {
    fn of(t: &Trainer<'_>) -> Result<Self> {
        let report = t.evaluate().context("evaluating on held-out views")?;
        Ok(Self {
            ratio: t.prune_ratio(),
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
            n_gaussians: t.cloud.len(),
        })
    }
}

/// Gate statistics of a learned mask at the end of its window, before the
/// prune.
#[derive(Clone, Debug, PartialEq)]
pub struct GateStats {
    /// Fraction of stochastic gate samples in (0.05, 0.95).
    pub stochastic_band: f64,
    /// Fraction of `sigmoid(x)` values in (0.05, 0.95) for the same gate
    /// arguments `x`.
    pub sigmoid_band: f64,
    /// Fraction of Gaussians whose deterministic gate falls below the prune
    /// threshold.
    pub below_threshold: f64,
}

/// Stochastic draws pooled for [`GateStats`].
pub const GATE_STAT_DRAWS: u64 = 4;

fn in_band(v: f64) -> bool {
    v > 0.05 && v < 0.95
}

/// Measures the mask state of a trainer whose window has just ended.
pub fn gate_stats(t: &Trainer<'_>) -> Result<GateStats> {
    let mask = t.mask.as_ref().context("no learned mask")?;
    let n = t.cloud.len();
    let args: Vec<f64> = match mask.target {
        MaskTarget::Score => t.cloud.mask_params.iter().zip(&t.cloud.scores).map(|(m, s)| m * s).collect(),
        _ => t.cloud.mask_params.clone(),
    };
    let mut stochastic = 0usize;
    for draw in 0..GATE_STAT_DRAWS {
        let gates = t.stochastic_gates(draw)?.context("no learned mask")?;
        stochastic += gates.values.iter().filter(|&&v| in_band(v)).count();
    }
    let det = t.deterministic_gates()?.context("mask is not active")?;
    Ok(GateStats {
        stochastic_band: stochastic as f64 / (GATE_STAT_DRAWS as usize * n) as f64,
        sigmoid_band: args.iter().filter(|&&x| in_band(sigmoid(x))).count() as f64 / n as f64,
        below_threshold: det.values.iter().filter(|&&g| g < mask.gate_prune).count() as f64 / n as f64,
    })
}

/// A run trained up to the start of the mask window.
pub struct Prefix<'a> {
    trainer: Trainer<'a>,
}

impl<'a> Prefix<'a> {
    pub fn train(
        dataset: &'a Dataset,
        init: GaussianCloud,
        config: TrainConfig,
        settings: RenderSettings,
    ) -> Result<Self> {
        let mut trainer = Trainer::new(dataset, init, config, settings)?;
        let start = trainer.config.mask_start;
        trainer.run_until(start)?;
        Ok(Self { trainer })
    }

    pub fn trainer(&self) -> &Trainer<'a> {
        &self.trainer
    }

    /// The never-pruned control: no mask, no prune.
    pub fn control(&self) -> Result<Outcome> {
        let mut t = self.trainer.clone();
        t.config.mask = None;
        t.config.hard_prune_ratio = None;
        t.run()?;
        Outcome::of(&t)
    }

    /// Hard-threshold prunes at the end of the window for each ratio, then
    /// fine-tunes. The window itself is trained once, without a mask.
    pub fn hard_threshold(&self, ratios: &[f64]) -> Result<Vec<Outcome>> {
        let mut at_end = self.trainer.clone();
        at_end.config.mask = None;
        at_end.config.hard_prune_ratio = Some(0.0);
        let end = at_end.config.mask_end;
        at_end.run_until(end)?;
        ratios
            .iter()
            .map(|&r| {
                let mut t = at_end.clone();
                t.config.hard_prune_ratio = Some(r);
                t.run().with_context(|| format!("ratio {r}"))?;
                Outcome::of(&t)
            })
            .collect()
    }

    /// Trains a learned mask of the given kind and target through the window,
    /// prunes with it and fine-tunes.
    pub fn learned(&self, kind: MaskKind, target: MaskTarget) -> Result<(GateStats, Outcome)> {
        let mut t = self.trainer.clone();
        t.config.mask = Some(kind);
        t.config.mask_target = target;
        t.config.hard_prune_ratio = None;
        let end = t.config.mask_end;
        t.run_until(end)?;
        let stats = gate_stats(&t)?;
        t.run()?;
        Ok((stats, Outcome::of(&t)?))
    }
}

/// The ratios of the default sweep, 0.1 to 0.9.
pub fn default_ratios() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<Outcome>,
    /// The learned mask of the configured kind and target.
    pub learned: Outcome,
}

pub const SWEEP_HEADER: &str = "ratio,psnr,ssim,n_gaussians,method";

impl SweepResult {
    /// Hard-threshold rows sorted by ratio, then the learned row.
    pub fn to_csv(&self) -> String {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in &rows {
            s += &format!("{},{},{},{},hard\n", r.ratio, r.psnr, r.ssim, r.n_gaussians);
        }
        let l = &self.learned;
        s += &format!("{},{},{},{},learned\n", l.ratio, l.psnr, l.ssim, l.n_gaussians);
        s
    }

    /// Best hard-threshold PSNR among ratios at or above `ratio`.
    pub fn best_psnr_at_or_above(&self, ratio: f64) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.ratio >= ratio)
            .map(|r| r.psnr)
            .max_by(f64::total_cmp)
    }
}

pub fn sweep(prefix: &Prefix<'_>, ratios: &[f64]) -> Result<SweepResult> {
    let rows = prefix.hard_threshold(ratios)?;
    let c = &prefix.trainer.config;
    let kind = c.mask.unwrap_or(MaskKind::Gumbel);
    let (_, learned) = prefix.learned(kind, c.mask_target)?;
    Ok(SweepResult { rows, learned })
}

#[derive(Clone, Debug)]
pub struct CompareCell {
    pub kind: MaskKind,
    pub target: MaskTarget,
    pub gates: GateStats,
    pub outcome: Outcome,
}

pub const COMPARE_HEADER: &str = "mask,target,ratio,psnr,ssim,n_gaussians";

/// The {gumbel, ste} x {score, direct} grid. "Direct" masks opacity and scale.
pub fn compare(prefix: &Prefix<'_>) -> Result<Vec<CompareCell>> {
    let mut cells = Vec::new();
    for target in [MaskTarget::Score, MaskTarget::OpacityScale] {
        for kind in [MaskKind::Gumbel, MaskKind::Ste] {
            let (gates, outcome) = prefix
                .learned(kind, target)
                .with_context(|| format!("cell {kind}/{target}"))?;
            cells.push(CompareCell {
                kind,
                target,
                gates,
                outcome,
            });
        }
    }
    Ok(cells)
}

pub fn compare_csv(cells: &[CompareCell]) -> String {
    let mut s = format!("{COMPARE_HEADER}\n");
    for c in cells {
        let o = &c.outcome;
        s += &format!("{},{},{},{},{},{}\n", c.kind, c.target, o.ratio, o.psnr, o.ssim, o.n_gaussians);
    }
    s
}
