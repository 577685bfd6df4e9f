//! The training schedule: densification, the mask window, the one-time
//! prune and fine-tuning.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::importance::compute_scores;
use crate::masking::{
    apply_keep, gate_values, mask_regularizer, prune_cloud, threshold_for_ratio, Gates, MaskKind, MaskState,
};
use crate::metrics::{eval_model, EvalReport};
use crate::render::{render_backward, render_image, Gate, RenderSettings};
use crate::scene::{GaussianCloud, ParamGroup};
use crate::train::density::{densify_and_prune, reset_opacity, DensifyStats};
use crate::train::{adam_step, adam_step_columns, ssim, total_loss, AdamState, MaskPenalty, TrainConfig};

/// Seed domains, so that independent random streams never share a key.
pub(crate) const DOMAIN_VIEWS: u64 = 1;
pub(crate) const DOMAIN_MASK: u64 = 2;
pub(crate) const DOMAIN_DENSIFY: u64 = 3;

/// Derives an independent seed for one use of the run seed.
pub fn derive_seed(seed: u64, domain: u64) -> u64 {
    let mut z = seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const HISTORY_HEADER: &str = "iter,loss,l1,ssim,mask_l1,n_gaussians,prune_ratio,psnr_holdout";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    /// Number of completed iterations.
    pub iter: u64,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub mask_l1: f64,
    pub n_gaussians: usize,
    pub prune_ratio: f64,
    pub psnr_holdout: Option<f64>,
}

impl HistoryRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            self.loss,
            self.l1,
            self.ssim,
            self.mask_l1,
            self.n_gaussians,
            self.prune_ratio,
            self.psnr_holdout.map_or(String::new(), |p| p.to_string())
        )
    }
}

pub fn write_history_csv<W: Write>(rows: &[HistoryRow], mut w: W) -> Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Outcome of the one-time prune.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneEvent {
    pub iteration: u64,
    pub n_before: usize,
    pub pruned: usize,
}

impl PruneEvent {
    pub fn ratio(&self) -> f64 {
        if self.n_before == 0 {
            0.0
        } else {
            self.pruned as f64 / self.n_before as f64
        }
    }
}

/// Resumable training state. Everything that influences later iterations
/// lives here, so cloning a trainer branches a run exactly.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub settings: RenderSettings,
    pub dataset: &'a Dataset,
    pub cloud: GaussianCloud,
    pub adam: AdamState,
    pub mask: Option<MaskState>,
    pub densify: DensifyStats,
    pub scene_extent: f64,
    /// Next iteration to run (0-based).
    pub iteration: u64,
    pub window_started: bool,
    pub prune_event: Option<PruneEvent>,
    pub history: Vec<HistoryRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a Dataset,
        init: GaussianCloud,
        config: TrainConfig,
        settings: RenderSettings,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.train.len() < 2 {
            return Err(Error::InvalidArgument("training needs at least two views".into()));
        }
        init.validate()?;
        let adam = AdamState::new(&init);
        let densify = DensifyStats::new(init.len());
        Ok(Self {
            scene_extent: dataset.scene_extent(),
            config,
            settings,
            dataset,
            cloud: init,
            adam,
            mask: None,
            densify,
            iteration: 0,
            window_started: false,
            prune_event: None,
            history: Vec::new(),
        })
    }

    /// Snapshot of the complete run state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            settings: self.settings.clone(),
            iteration: self.iteration,
            window_started: self.window_started,
            scene_extent: self.scene_extent,
            prune_event: self.prune_event,
            mask: self.mask.clone(),
            cloud: self.cloud.clone(),
            adam: self.adam.clone(),
            densify: self.densify.clone(),
            history: self.history.clone(),
        }
    }

    /// Continues a run from a checkpoint. Later iterations are identical to
    /// those of the uninterrupted run on the same dataset.
    pub fn resume(dataset: &'a Dataset, checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.config.validate()?;
        checkpoint.cloud.validate()?;
        if dataset.train.len() < 2 {
            return Err(Error::InvalidArgument("training needs at least two views".into()));
        }
        Ok(Self {
            config: checkpoint.config,
            settings: checkpoint.settings,
            dataset,
            cloud: checkpoint.cloud,
            adam: checkpoint.adam,
            mask: checkpoint.mask,
            densify: checkpoint.densify,
            scene_extent: checkpoint.scene_extent,
            iteration: checkpoint.iteration,
            window_started: checkpoint.window_started,
            prune_event: checkpoint.prune_event,
            history: checkpoint.history,
        })
    }

    /// Index into `dataset.train` used at an iteration: a fresh seeded
    /// permutation of the training views every epoch.
    pub fn view_index(&self, iteration: u64) -> usize {
        let n = self.dataset.train.len() as u64;
        let epoch = iteration / n;
        let mut order: Vec<usize> = (0..n as usize).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, DOMAIN_VIEWS));
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order[(iteration % n) as usize]
    }

    pub fn prune_ratio(&self) -> f64 {
        self.prune_event.map_or(0.0, |p| p.ratio())
    }

    fn mask_active(&self) -> bool {
        self.mask.as_ref().is_some_and(|m| m.active)
    }

    /// Deterministic gates of the active mask, if any.
    pub fn deterministic_gates(&self) -> Result<Option<Gates>> {
        match &self.mask {
            Some(m) if m.active => Ok(Some(gate_values(
                m,
                &self.cloud.mask_params,
                Some(&self.cloud.scores),
                self.iteration,
                true,
            )?)),
            _ => Ok(None),
        }
    }

    /// Stochastic gate samples for the current state, drawn with noise keyed
    /// by `draw` (independent from the training noise stream).
    pub fn stochastic_gates(&self, draw: u64) -> Result<Option<Gates>> {
        match &self.mask {
            Some(m) => {
                let mut sampler = m.clone();
                sampler.seed = derive_seed(m.seed, 0xD1A9 + draw);
                Ok(Some(gate_values(&sampler, &self.cloud.mask_params, Some(&self.cloud.scores), 0, false)?))
            }
            None => Ok(None),
        }
    }

    /// Importance scores of the current cloud over the training views.
    pub fn compute_scores(&self, gated: bool) -> Result<Vec<f64>> {
        let cameras = self.dataset.train_cameras();
        let gates = if gated { self.deterministic_gates()? } else { None };
        let target = self.mask.as_ref().map(|m| m.target.gate_target());
        let gate = match (&gates, target) {
            (Some(g), Some(target)) => Some(Gate {
                values: &g.values,
                target,
            }),
            _ => None,
        };
        compute_scores(&self.cloud, &cameras, self.config.score_mode, &self.settings, gate.as_ref())
    }

    fn start_window(&mut self) -> Result<()> {
        self.window_started = true;
        self.densify.reset(self.cloud.len());
        if !self.config.mask_enabled() {
            return Ok(());
        }
        let kind = self.config.mask.expect("mask enabled");
        let mut mask = MaskState::new(
            kind,
            self.config.mask_target,
            self.config.tau,
            derive_seed(self.config.seed, DOMAIN_MASK),
        )?;
        mask.ste_epsilon = self.config.ste_epsilon;
        mask.gate_prune = self.config.gate_prune;
        MaskState::init_params(&mut self.cloud);
        self.cloud.scores = self.compute_scores(false)?;
        mask.active = true;
        self.mask = Some(mask);
        self.adam.reset_group(ParamGroup::Mask);
        self.adam.group_mut(ParamGroup::Mask).step = 0;
        Ok(())
    }

    /// Removes the lowest-scoring `ratio` of Gaussians now (hard threshold).
    pub fn prune_by_ratio(&mut self, ratio: f64) -> Result<PruneEvent> {
        let scores = self.compute_scores(false)?;
        let threshold = threshold_for_ratio(&scores, ratio)?;
        self.cloud.scores = scores;
        let keep = threshold.keep(&self.cloud.scores);
        let report = apply_keep(&mut self.cloud, keep, Some(&mut self.adam))?;
        self.finish_prune(report.n_before, report.pruned)
    }

    /// Applies the learned mask now.
    pub fn prune_with_mask(&mut self) -> Result<PruneEvent> {
        let mask = self
            .mask
            .clone()
            .ok_or_else(|| Error::InvalidArgument("no mask to prune with".into()))?;
        let report = prune_cloud(&mut self.cloud, &mask, Some(&mut self.adam))?;
        self.finish_prune(report.n_before, report.pruned)
    }

    fn finish_prune(&mut self, n_before: usize, pruned: usize) -> Result<PruneEvent> {
        if let Some(m) = self.mask.as_mut() {
            m.active = false;
        }
        self.densify.reset(self.cloud.len());
        let event = PruneEvent {
            iteration: self.iteration,
            n_before,
            pruned,
        };
        self.prune_event = Some(event);
        Ok(event)
    }

    /// Schedule events due before the next iteration runs.
    fn handle_events(&mut self) -> Result<()> {
        let k = self.iteration;
        let c = &self.config;
        if c.mask_start < c.mask_end && k == c.mask_end && self.window_started && self.prune_event.is_none() {
            if let Some(r) = c.hard_prune_ratio {
                self.prune_by_ratio(r)?;
            } else if self.mask_active() {
                self.prune_with_mask()?;
            }
        }
        let c = &self.config;
        if c.mask_start < c.mask_end && k == c.mask_start && !self.window_started {
            self.start_window()?;
        } else if self.mask_active()
            && k > self.config.mask_start
            && (k - self.config.mask_start) % self.config.score_update_every == 0
        {
            self.cloud.scores = self.compute_scores(self.config.gated_scores)?;
        }
        Ok(())
    }

    /// Runs one iteration and appends its history row.
    pub fn step(&mut self) -> Result<()> {
        self.handle_events()?;
        let k = self.iteration;
        let dataset = self.dataset;
        let view = &dataset.train[self.view_index(k)];
        let gates = match &self.mask {
            Some(m) if m.active => Some(gate_values(
                m,
                &self.cloud.mask_params,
                Some(&self.cloud.scores),
                k,
                false,
            )?),
            _ => None,
        };
        let target = self.mask.as_ref().map(|m| m.target.gate_target());
        let gate = gates.as_ref().map(|g| Gate {
            values: &g.values,
            target: target.expect("gates imply a mask"),
        });

        let (image, aux) = render_image(&self.cloud, &view.camera, &self.settings, gate.as_ref())?;
        let penalty = match (&self.mask, &gates) {
            (Some(m), Some(_)) => {
                let (value, grad) = mask_regularizer(m, &self.cloud.mask_params, Some(&self.cloud.scores));
                Some(MaskPenalty { value, grad })
            }
            _ => None,
        };
        let loss = total_loss(
            &image,
            &view.image,
            self.config.lambda_ssim,
            self.config.lambda_m,
            penalty.as_ref(),
        )?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                index: k as usize,
                field: "loss",
            });
        }
        let mut grads = render_backward(
            &self.cloud,
            &view.camera,
            &self.settings,
            gate.as_ref(),
            &aux,
            &loss.d_image,
        )?;

        if !self.window_started && k < self.config.densify_until {
            self.densify
                .accumulate(&grads.mean2d, &grads.visible, view.camera.width, view.camera.height);
        }

        let c = &self.config;
        let pos_lr = c.position_lr(k) * self.scene_extent;
        adam_step(
            ParamGroup::Position,
            &mut self.cloud.positions,
            &grads.positions,
            self.adam.group_mut(ParamGroup::Position),
            pos_lr,
        )?;
        adam_step(
            ParamGroup::LogScale,
            &mut self.cloud.log_scales,
            &grads.log_scales,
            self.adam.group_mut(ParamGroup::LogScale),
            c.lr_log_scale,
        )?;
        adam_step(
            ParamGroup::Rotation,
            &mut self.cloud.rotations,
            &grads.rotations,
            self.adam.group_mut(ParamGroup::Rotation),
            c.lr_rotation,
        )?;
        adam_step(
            ParamGroup::Opacity,
            &mut self.cloud.opacity_logits,
            &grads.opacity_logits,
            self.adam.group_mut(ParamGroup::Opacity),
            c.lr_opacity,
        )?;
        let sh_width = self.cloud.sh_width();
        let sh_lrs: Vec<f64> = (0..sh_width)
            .map(|j| if j < 3 { c.lr_sh } else { c.lr_sh / 20.0 })
            .collect();
        adam_step_columns(
            ParamGroup::Sh,
            &mut self.cloud.sh_coeffs,
            &grads.sh_coeffs,
            self.adam.group_mut(ParamGroup::Sh),
            &sh_lrs,
        )?;
        if let (Some(m), Some(g)) = (&self.mask, &gates) {
            let d_mask = grads.mask_params.iter_mut();
            for (i, dm) in d_mask.enumerate() {
                *dm = *dm * g.dvalue_dm[i] + loss.d_mask[i];
            }
            if c.mask_log_update && m.kind == MaskKind::Gumbel {
                let params = &mut self.cloud.mask_params;
                let mut log_m: Vec<f64> = params.iter().map(|v| v.ln()).collect();
                let d_log: Vec<f64> = grads.mask_params.iter().zip(params.iter()).map(|(g, v)| g * v).collect();
                adam_step(
                    ParamGroup::Mask,
                    &mut log_m,
                    &d_log,
                    self.adam.group_mut(ParamGroup::Mask),
                    c.lr_mask,
                )?;
                for (v, l) in params.iter_mut().zip(log_m) {
                    *v = l.exp();
                }
            } else {
                adam_step(
                    ParamGroup::Mask,
                    &mut self.cloud.mask_params,
                    &grads.mask_params,
                    self.adam.group_mut(ParamGroup::Mask),
                    c.lr_mask,
                )?;
            }
            m.clamp_params(&mut self.cloud.mask_params);
        }

        let done = k + 1;
        let c = &self.config;
        if !self.window_started && done < c.densify_until {
            if done > c.densify_from && done % c.densify_interval == 0 {
                densify_and_prune(
                    &mut self.cloud,
                    &mut self.adam,
                    &mut self.densify,
                    c,
                    self.scene_extent,
                    done,
                );
            }
            if c.opacity_reset_every > 0 && done % c.opacity_reset_every == 0 {
                reset_opacity(&mut self.cloud, &mut self.adam);
            }
        }
        self.iteration = done;

        let ssim_value = if self.config.lambda_ssim != 0.0 {
            1.0 - loss.ssim_loss
        } else {
            ssim(&image, &view.image).unwrap_or(f64::NAN)
        };
        let eval_due = done % self.config.eval_every == 0 || done == self.config.total_iters;
        let psnr_holdout = if eval_due && !self.dataset.test.is_empty() {
            Some(self.evaluate()?.mean_psnr)
        } else {
            None
        };
        self.history.push(HistoryRow {
            iter: done,
            loss: loss.total,
            l1: loss.l1,
            ssim: ssim_value,
            mask_l1: loss.mask,
            n_gaussians: self.cloud.len(),
            prune_ratio: self.prune_ratio(),
            psnr_holdout,
        });
        Ok(())
    }

    /// Runs iterations until `self.iteration == end` (capped at the schedule
    /// length), then fires any event due at that point.
    pub fn run_until(&mut self, end: u64) -> Result<()> {
        let end = end.min(self.config.total_iters);
        while self.iteration < end {
            self.step()?;
        }
        if self.iteration == self.config.total_iters {
            self.handle_events()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.total_iters)
    }

    /// Evaluates on the held-out views, with deterministic gates while the
    /// mask is active.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let gates = self.deterministic_gates()?;
        let gate = match (&gates, &self.mask) {
            (Some(g), Some(m)) => Some(Gate {
                values: &g.values,
                target: m.target.gate_target(),
            }),
            _ => None,
        };
        eval_model(&self.cloud, &self.dataset.test, &self.settings, gate.as_ref(), self.prune_ratio())
    }
}
