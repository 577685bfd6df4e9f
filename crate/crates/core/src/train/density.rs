//! Adaptive density control: clone, split and low-opacity removal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scene::{logit, normalize_quat, quat_to_matrix, sigmoid, GaussianCloud, ParamGroup};
use crate::train::trainer::{derive_seed, DOMAIN_DENSIFY};
use crate::train::{AdamState, TrainConfig};
use nalgebra::Vector3;

/// Split children shrink their scales by this factor.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
/// Opacity ceiling applied by an opacity reset.
pub const OPACITY_RESET_VALUE: f64 = 0.01;

/// Running per-Gaussian statistics of the screen-space positional gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DensifyStats {
    pub grad_accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_accum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn reset(&mut self, n: usize) {
        *self = Self::new(n);
    }

    /// Adds one view's gradient norms. `mean2d` holds pixel-space gradients;
    /// they are converted to normalized device coordinates first.
    pub fn accumulate(&mut self, mean2d: &[f64], visible: &[bool], width: usize, height: usize) {
        let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
        for i in 0..self.count.len() {
            if visible[i] {
                let gx = mean2d[2 * i] * sx;
                let gy = mean2d[2 * i + 1] * sy;
                self.grad_accum[i] += (gx * gx + gy * gy).sqrt();
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub removed: usize,
}

/// Clones small high-gradient Gaussians, splits large ones into two shrunken
/// children and removes Gaussians below `min_opacity`. Optimizer rows follow:
/// new rows start with zero moments. `stats` is reset to the new size.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    adam: &mut AdamState,
    stats: &mut DensifyStats,
    config: &TrainConfig,
    scene_extent: f64,
    iteration: u64,
) -> DensifyReport {
    let n = cloud.len();
    let size_limit = config.percent_dense * scene_extent;
    let mut clone_idx = Vec::new();
    let mut split_idx = Vec::new();
    for i in 0..n {
        if stats.mean(i) < config.grad_threshold {
            continue;
        }
        let max_scale = cloud.log_scale(i).iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
        if max_scale <= size_limit {
            clone_idx.push(i);
        } else {
            split_idx.push(i);
        }
    }

    cloud.append_rows(&clone_idx);
    adam.append_zero_rows(clone_idx.len());

    let children: Vec<usize> = split_idx.iter().flat_map(|&i| [i, i]).collect();
    let first_child = cloud.len();
    cloud.append_rows(&children);
    adam.append_zero_rows(children.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, DOMAIN_DENSIFY));
    rng.set_stream(iteration);
    for (k, &src) in children.iter().enumerate() {
        let row = first_child + k;
        let ls = cloud.log_scale(src);
        let scale = Vector3::new(ls[0].exp(), ls[1].exp(), ls[2].exp());
        let rot = normalize_quat(cloud.rotation(src))
            .map(|(q, _)| quat_to_matrix(q))
            .unwrap_or_else(|_| nalgebra::Matrix3::identity());
        let z = Vector3::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        let offset = rot * scale.component_mul(&z);
        for a in 0..3 {
            cloud.positions[3 * row + a] += offset[a];
            cloud.log_scales[3 * row + a] -= SPLIT_SCALE_DIVISOR.ln();
        }
    }

    let mut is_split = vec![false; cloud.len()];
    for &i in &split_idx {
        is_split[i] = true;
    }
    let keep: Vec<bool> = (0..cloud.len())
        .map(|i| !is_split[i] && cloud.opacity(i) >= config.min_opacity)
        .collect();
    let kept = keep.iter().filter(|&&k| k).count();
    let total = cloud.len();
    cloud.retain(&keep);
    adam.retain(&keep);
    stats.reset(cloud.len());
    DensifyReport {
        cloned: clone_idx.len(),
        split: split_idx.len(),
        removed: total - kept - split_idx.len(),
    }
}

/// Caps every opacity at [`OPACITY_RESET_VALUE`] and clears the opacity
/// optimizer moments.
pub fn reset_opacity(cloud: &mut GaussianCloud, adam: &mut AdamState) {
    for v in &mut cloud.opacity_logits {
        *v = logit(sigmoid(*v).min(OPACITY_RESET_VALUE));
    }
    adam.reset_group(ParamGroup::Opacity);
}
