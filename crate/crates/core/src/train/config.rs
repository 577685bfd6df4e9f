//! Training configuration, presets and the `key = value` config format.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::importance::ScoreMode;
use crate::masking::{MaskKind, MaskTarget};

/// Every schedule constant, learning rate, loss weight and density-control
/// threshold of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_iters: u64,
    /// First iteration of the mask window.
    pub mask_start: u64,
    /// End of the mask window (exclusive); pruning happens here.
    pub mask_end: u64,
    pub score_update_every: u64,
    pub tau: f64,
    pub lambda_ssim: f64,
    pub lambda_m: f64,

    pub lr_position_init: f64,
    pub lr_position_final: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    /// Learning rate of the base-color SH band; higher bands use 1/20 of it.
    pub lr_sh: f64,
    pub lr_mask: f64,
    /// Take Gumbel mask steps on `ln m` (multiplicative updates) instead of
    /// on `m` directly.
    pub mask_log_update: bool,

    pub densify_from: u64,
    pub densify_interval: u64,
    pub densify_until: u64,
    pub grad_threshold: f64,
    pub min_opacity: f64,
    /// Clone vs split boundary as a fraction of the scene extent.
    pub percent_dense: f64,
    pub opacity_reset_every: u64,

    pub score_mode: ScoreMode,
    /// `None` disables the learned mask.
    pub mask: Option<MaskKind>,
    pub mask_target: MaskTarget,
    pub ste_epsilon: f64,
    pub gate_prune: f64,
    /// Recompute importance scores through the current deterministic gates
    /// during the window (otherwise the raw cloud is scored).
    pub gated_scores: bool,
    /// When set, the mask is not learned; instead the lowest-scoring fraction
    /// of Gaussians is removed at the end of the mask window.
    pub hard_prune_ratio: Option<f64>,

    /// Held-out PSNR is logged every this many iterations and at the end.
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// Full-length schedule.
    pub fn full() -> Self {
        Self {
            total_iters: 30_000,
            mask_start: 19_500,
            mask_end: 20_000,
            score_update_every: 20,
            tau: 0.5,
            lambda_ssim: 0.2,
            lambda_m: 5e-4,
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_log_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 0.05,
            lr_sh: 2.5e-3,
            lr_mask: 0.01,
            mask_log_update: false,
            densify_from: 500,
            densify_interval: 100,
            densify_until: 15_000,
            grad_threshold: 2e-4,
            min_opacity: 0.005,
            percent_dense: 0.01,
            opacity_reset_every: 3000,
            score_mode: ScoreMode::RadSplatMax,
            mask: Some(MaskKind::Gumbel),
            mask_target: MaskTarget::Score,
            ste_epsilon: 0.01,
            gate_prune: 0.5,
            gated_scores: true,
            hard_prune_ratio: None,
            eval_every: 1000,
            seed: 0,
        }
    }

    /// The same schedule scaled to 3000 iterations on small images.
    pub fn desk() -> Self {
        Self {
            total_iters: 3000,
            mask_start: 1950,
            mask_end: 2000,
            densify_from: 100,
            densify_until: 1500,
            grad_threshold: 0.002,
            lambda_m: 0.0,
            lr_mask: 0.85,
            mask_log_update: true,
            gated_scores: false,
            ste_epsilon: 0.5,
            eval_every: 250,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.mask_start > self.mask_end || self.mask_end > self.total_iters {
            return fail(format!(
                "mask window [{}, {}) not inside [0, {})",
                self.mask_start, self.mask_end, self.total_iters
            ));
        }
        if self.mask_start < self.mask_end && self.densify_until > self.mask_start {
            return fail(format!(
                "densify_until {} is after the mask window start {}",
                self.densify_until, self.mask_start
            ));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.score_update_every == 0 || self.densify_interval == 0 || self.eval_every == 0 {
            return fail("interval settings must be at least 1".into());
        }
        if let Some(r) = self.hard_prune_ratio {
            if !(0.0..1.0).contains(&r) {
                return fail(format!("hard_prune_ratio {r} not in [0, 1)"));
            }
        }
        let rates = [
            self.lr_position_init,
            self.lr_position_final,
            self.lr_log_scale,
            self.lr_rotation,
            self.lr_opacity,
            self.lr_sh,
            self.lr_mask,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return fail("learning rates must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Whether a learned mask runs in the window.
    pub fn mask_enabled(&self) -> bool {
        self.mask.is_some() && self.hard_prune_ratio.is_none() && self.mask_start < self.mask_end
    }

    /// Position learning rate at an iteration (log-linear decay), before
    /// scaling by the scene extent.
    pub fn position_lr(&self, iteration: u64) -> f64 {
        let t = (iteration as f64 / self.total_iters.max(1) as f64).clamp(0.0, 1.0);
        ((1.0 - t) * self.lr_position_init.ln() + t * self.lr_position_final.ln()).exp()
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        match key {
            "total_iters" => self.total_iters = num(key, value)?,
            "mask_start" => self.mask_start = num(key, value)?,
            "mask_end" => self.mask_end = num(key, value)?,
            "score_update_every" => self.score_update_every = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "lambda_ssim" => self.lambda_ssim = num(key, value)?,
            "lambda_m" => self.lambda_m = num(key, value)?,
            "lr_position_init" => self.lr_position_init = num(key, value)?,
            "lr_position_final" => self.lr_position_final = num(key, value)?,
            "lr_log_scale" => self.lr_log_scale = num(key, value)?,
            "lr_rotation" => self.lr_rotation = num(key, value)?,
            "lr_opacity" => self.lr_opacity = num(key, value)?,
            "lr_sh" => self.lr_sh = num(key, value)?,
            "lr_mask" => self.lr_mask = num(key, value)?,
            "mask_log_update" => self.mask_log_update = num(key, value)?,
            "densify_from" => self.densify_from = num(key, value)?,
            "densify_interval" => self.densify_interval = num(key, value)?,
            "densify_until" => self.densify_until = num(key, value)?,
            "grad_threshold" => self.grad_threshold = num(key, value)?,
            "min_opacity" => self.min_opacity = num(key, value)?,
            "percent_dense" => self.percent_dense = num(key, value)?,
            "opacity_reset_every" => self.opacity_reset_every = num(key, value)?,
            "score_mode" => self.score_mode = value.parse()?,
            "mask" => {
                self.mask = match value {
                    "off" | "none" => None,
                    other => Some(other.parse()?),
                }
            }
            "mask_target" => self.mask_target = value.parse()?,
            "ste_epsilon" => self.ste_epsilon = num(key, value)?,
            "gate_prune" => self.gate_prune = num(key, value)?,
            "gated_scores" => self.gated_scores = num(key, value)?,
            "hard_prune_ratio" => {
                self.hard_prune_ratio = match value {
                    "none" | "off" => None,
                    v => Some(num(key, v)?),
                }
            }
            "eval_every" => self.eval_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document on top of `self`. Blank lines and
    /// `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{}`", lineno + 1, raw.trim()))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Every field in the `key = value` format; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("total_iters", self.total_iters.to_string());
        kv("mask_start", self.mask_start.to_string());
        kv("mask_end", self.mask_end.to_string());
        kv("score_update_every", self.score_update_every.to_string());
        kv("tau", self.tau.to_string());
        kv("lambda_ssim", self.lambda_ssim.to_string());
        kv("lambda_m", self.lambda_m.to_string());
        kv("lr_position_init", self.lr_position_init.to_string());
        kv("lr_position_final", self.lr_position_final.to_string());
        kv("lr_log_scale", self.lr_log_scale.to_string());
        kv("lr_rotation", self.lr_rotation.to_string());
        kv("lr_opacity", self.lr_opacity.to_string());
        kv("lr_sh", self.lr_sh.to_string());
        kv("lr_mask", self.lr_mask.to_string());
        kv("mask_log_update", self.mask_log_update.to_string());
        kv("densify_from", self.densify_from.to_string());
        kv("densify_interval", self.densify_interval.to_string());
        kv("densify_until", self.densify_until.to_string());
        kv("grad_threshold", self.grad_threshold.to_string());
        kv("min_opacity", self.min_opacity.to_string());
        kv("percent_dense", self.percent_dense.to_string());
        kv("opacity_reset_every", self.opacity_reset_every.to_string());
        kv("score_mode", self.score_mode.to_string());
        kv("mask", self.mask.map_or("off".to_string(), |m| m.to_string()));
        kv("mask_target", self.mask_target.to_string());
        kv("ste_epsilon", self.ste_epsilon.to_string());
        kv("gate_prune", self.gate_prune.to_string());
        kv("gated_scores", self.gated_scores.to_string());
        kv(
            "hard_prune_ratio",
            self.hard_prune_ratio.map_or("none".to_string(), |r| r.to_string()),
        );
        kv("eval_every", self.eval_every.to_string());
        kv("seed", self.seed.to_string());
        s
    }
}
