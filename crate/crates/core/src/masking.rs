//! Trainable pruning masks.
//!
//! The main mask is a Gumbel-Sigmoid relaxation of a Bernoulli gate applied
//! to each Gaussian's opacity. Its argument is either `m_i * S_i` (mask
//! parameter times importance score) or `m_i` alone. A straight-through
//! estimator (STE) mask and rank-based hard thresholding are provided as
//! baselines.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::render::GateTarget;
use crate::scene::{sigmoid, GaussianCloud};
use crate::train::AdamState;

/// Lower bound on Gumbel-mask parameters, keeping `log(m * S)` finite.
pub const M_FLOOR: f64 = 1e-6;
/// Uniform samples are clamped into `[U_EPS, 1 - U_EPS]` before the double log.
const U_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Gumbel,
    Ste,
}

/// What the mask parameter is combined with before the relaxation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskTarget {
    /// Gate argument `m * S`, gate applied to opacity.
    Score,
    /// Gate argument `m`, gate applied to opacity.
    Opacity,
    /// Gate argument `m`, gate applied to opacity and scale.
    OpacityScale,
}

impl MaskTarget {
    pub fn gate_target(self) -> GateTarget {
        match self {
            MaskTarget::Score | MaskTarget::Opacity => GateTarget::Opacity,
            MaskTarget::OpacityScale => GateTarget::OpacityScale,
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Gumbel => "gumbel",
            MaskKind::Ste => "ste",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gumbel" => Ok(MaskKind::Gumbel),
            "ste" => Ok(MaskKind::Ste),
            other => Err(Error::InvalidArgument(format!("unknown mask kind `{other}`"))),
        }
    }
}

impl fmt::Display for MaskTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskTarget::Score => "score",
            MaskTarget::Opacity => "opacity",
            MaskTarget::OpacityScale => "opacity-scale",
        })
    }
}

impl FromStr for MaskTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score" | "score-modulated" => Ok(MaskTarget::Score),
            "opacity" | "direct-opacity" => Ok(MaskTarget::Opacity),
            "opacity-scale" | "direct-opacity-scale" => Ok(MaskTarget::OpacityScale),
            other => Err(Error::InvalidArgument(format!("unknown mask target `{other}`"))),
        }
    }
}

/// Mask hyperparameters and noise key. The per-Gaussian parameters `m` live
/// in [`GaussianCloud::mask_params`] so they stay aligned through pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    pub kind: MaskKind,
    pub target: MaskTarget,
    pub tau: f64,
    pub ste_epsilon: f64,
    /// Deterministic gates below this are pruned.
    pub gate_prune: f64,
    pub seed: u64,
    pub active: bool,
}

impl MaskState {
    pub fn new(kind: MaskKind, target: MaskTarget, tau: f64, seed: u64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidTemperature(tau));
        }
        Ok(Self {
            kind,
            target,
            tau,
            ste_epsilon: 0.01,
            gate_prune: 0.5,
            seed,
            active: false,
        })
    }

    /// Resets every mask parameter to 1.
    pub fn init_params(cloud: &mut GaussianCloud) {
        cloud.mask_params.iter_mut().for_each(|m| *m = 1.0);
    }

    pub fn clamp_params(&self, m: &mut [f64]) {
        if self.kind == MaskKind::Gumbel {
            for v in m {
                if *v < M_FLOOR {
                    *v = M_FLOOR;
                }
            }
        }
    }
}

/// Maps a uniform sample to a standard Gumbel sample, `-log(-log u)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(U_EPS, 1.0 - U_EPS);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    gumbel_from_uniform(rng.random::<f64>())
}

/// Two Gumbel draws for one Gaussian at one iteration. Counter-based, so the
/// draw depends only on `(seed, iteration, index)`.
pub fn noise_pair(seed: u64, iteration: u64, index: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng.set_word_pos(4 * index as u128);
    let to_unit = |v: u64| (v >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let u0 = to_unit(rng.next_u64());
    let u1 = to_unit(rng.next_u64());
    (gumbel_from_uniform(u0), gumbel_from_uniform(u1))
}

/// `sigmoid((log x + g0 - g1) / tau)` and its derivative wrt `x`.
pub fn gumbel_sigmoid(x: f64, tau: f64, g0: f64, g1: f64) -> Result<(f64, f64)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    if x <= 0.0 {
        return Ok((0.0, 0.0));
    }
    let v = sigmoid((x.ln() + g0 - g1) / tau);
    Ok((v, v * (1.0 - v) / (tau * x)))
}

/// Straight-through mask: forward `1[sigmoid(m) > eps]`, backward `sigmoid'(m)`.
pub fn ste_mask(m: f64, epsilon: f64) -> (f64, f64) {
    let f = sigmoid(m);
    let forward = if f > epsilon { 1.0 } else { 0.0 };
    (forward, f * (1.0 - f))
}

/// Gate values and their derivatives wrt the mask parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gates {
    pub values: Vec<f64>,
    pub dvalue_dm: Vec<f64>,
}

/// Evaluates the gates for every Gaussian.
///
/// Stochastic gates draw fresh Gumbel noise keyed by `(mask.seed, iteration,
/// index)`; deterministic gates drop the noise. STE gates have no noise.
pub fn gate_values(
    mask: &MaskState,
    m: &[f64],
    scores: Option<&[f64]>,
    iteration: u64,
    deterministic: bool,
) -> Result<Gates> {
    if !(mask.tau > 0.0) {
        return Err(Error::InvalidTemperature(mask.tau));
    }
    let scores = match mask.target {
        MaskTarget::Score => {
            let s = scores.ok_or(Error::MissingScores)?;
            if s.len() != m.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} scores for {} mask parameters",
                    s.len(),
                    m.len()
                )));
            }
            Some(s)
        }
        _ => None,
    };
    let n = m.len();
    let mut values = Vec::with_capacity(n);
    let mut dvalue_dm = Vec::with_capacity(n);
    for i in 0..n {
        let s = scores.map_or(1.0, |s| s[i]);
        let arg = m[i] * s;
        let (v, d) = match mask.kind {
            MaskKind::Gumbel => {
                let (g0, g1) = if deterministic {
                    (0.0, 0.0)
                } else {
                    noise_pair(mask.seed, iteration, i)
                };
                let (v, _) = gumbel_sigmoid(arg, mask.tau, g0, g1)?;
                // d/dm of sigmoid((log m + log s + g)/tau) = v(1-v)/(tau m)
                let d = if arg > 0.0 { v * (1.0 - v) / (mask.tau * m[i]) } else { 0.0 };
                (v, d)
            }
            MaskKind::Ste => {
                let (v, d) = ste_mask(arg, mask.ste_epsilon);
                (v, d * s)
            }
        };
        values.push(v);
        dvalue_dm.push(d);
    }
    Ok(Gates { values, dvalue_dm })
}

/// `(1/N) sum |m_i|` and its gradient `sign(m_i)/N`.
pub fn mask_l1(m: &[f64]) -> (f64, Vec<f64>) {
    if m.is_empty() {
        return (0.0, Vec::new());
    }
    let n = m.len() as f64;
    let value = m.iter().map(|v| v.abs()).sum::<f64>() / n;
    let grad = m
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1.0 / n
            } else if v < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (value, grad)
}

/// Sparsity penalty for the active mask kind: L1 on `m` for the Gumbel mask,
/// mean of the sigmoid surrogate for the STE mask.
pub fn mask_regularizer(mask: &MaskState, m: &[f64], scores: Option<&[f64]>) -> (f64, Vec<f64>) {
    match mask.kind {
        MaskKind::Gumbel => mask_l1(m),
        MaskKind::Ste => {
            if m.is_empty() {
                return (0.0, Vec::new());
            }
            let n = m.len() as f64;
            let mut value = 0.0;
            let mut grad = Vec::with_capacity(m.len());
            for (i, &mi) in m.iter().enumerate() {
                let s = match (mask.target, scores) {
                    (MaskTarget::Score, Some(s)) => s[i],
                    _ => 1.0,
                };
                let f = sigmoid(mi * s);
                value += f;
                grad.push(f * (1.0 - f) * s / n);
            }
            (value / n, grad)
        }
    }
}

/// `keep_i = S_i >= t_prune`.
pub fn hard_threshold_keep(scores: &[f64], t_prune: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= t_prune).collect()
}

/// A threshold on the `(score, index)` order, so that ties are broken by index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankThreshold {
    /// Smallest kept score (`+inf` when everything is pruned).
    pub value: f64,
    pub index: usize,
}

impl RankThreshold {
    pub fn keep(&self, scores: &[f64]) -> Vec<bool> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| s > self.value || (s == self.value && i >= self.index))
            .collect()
    }
}

/// Threshold pruning exactly `ceil(ratio * N)` Gaussians with the lowest
/// scores, lower index first among ties.
pub fn threshold_for_ratio(scores: &[f64], ratio: f64) -> Result<RankThreshold> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("threshold_for_ratio needs N >= 1".into()));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("pruning ratio {ratio} not in [0, 1)")));
    }
    let n = scores.len();
    let k = ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok(if k >= n {
        RankThreshold {
            value: f64::INFINITY,
            index: 0,
        }
    } else {
        RankThreshold {
            value: scores[order[k]],
            index: order[k],
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub n_before: usize,
    pub pruned: usize,
    pub keep: Vec<bool>,
}

impl PruneReport {
    pub fn ratio(&self) -> f64 {
        if self.n_before == 0 {
            0.0
        } else {
            self.pruned as f64 / self.n_before as f64
        }
    }
}

/// Removes rows where `keep` is false from the cloud and the optimizer state.
pub fn apply_keep(
    cloud: &mut GaussianCloud,
    keep: Vec<bool>,
    adam: Option<&mut AdamState>,
) -> Result<PruneReport> {
    let n_before = cloud.len();
    let kept = keep.iter().filter(|&&k| k).count();
    if kept == 0 && n_before > 0 {
        return Err(Error::EmptyAfterPrune);
    }
    cloud.retain(&keep);
    if let Some(adam) = adam {
        adam.retain(&keep);
    }
    Ok(PruneReport {
        n_before,
        pruned: n_before - kept,
        keep,
    })
}

/// One-time prune: removes every Gaussian whose deterministic gate is below
/// `mask.gate_prune`.
pub fn prune_cloud(
    cloud: &mut GaussianCloud,
    mask: &MaskState,
    adam: Option<&mut AdamState>,
) -> Result<PruneReport> {
    let gates = gate_values(mask, &cloud.mask_params, Some(&cloud.scores), 0, true)?;
    let keep: Vec<bool> = gates.values.iter().map(|&g| g >= mask.gate_prune).collect();
    apply_keep(cloud, keep, adam)
}
