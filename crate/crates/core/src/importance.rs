//! Per-Gaussian importance scores accumulated over training views.
//!
//! `RadSplatMax` keeps the largest compositing weight `alpha * T` a Gaussian
//! reaches on any ray; `MiniSplatSum` adds the weights up over all rays.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::render::{
    composite_pixel, project_gaussian, render_with_contributions, Gate, ProjectedGaussian,
    RenderSettings, ViewContributions,
};
use crate::scene::{Camera, GaussianCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    RadSplatMax,
    MiniSplatSum,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::RadSplatMax => "radsplat",
            ScoreMode::MiniSplatSum => "minisplat",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radsplat" | "radsplat-max" => Ok(ScoreMode::RadSplatMax),
            "minisplat" | "minisplat-sum" => Ok(ScoreMode::MiniSplatSum),
            other => Err(Error::InvalidArgument(format!("unknown score mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreAccumulator {
    pub mode: ScoreMode,
    pub raw: Vec<f64>,
    pub views_seen: usize,
}

impl ScoreAccumulator {
    pub fn new(mode: ScoreMode, n: usize) -> Self {
        Self {
            mode,
            raw: vec![0.0; n],
            views_seen: 0,
        }
    }

    pub fn reset(&mut self, n: usize) {
        self.raw.clear();
        self.raw.resize(n, 0.0);
        self.views_seen = 0;
    }

    pub fn accumulate_view(&mut self, stats: &ViewContributions) -> Result<()> {
        if stats.max.len() != self.raw.len() || stats.sum.len() != self.raw.len() {
            return Err(Error::ShapeMismatch(format!(
                "view statistics for {} Gaussians, accumulator holds {}",
                stats.max.len(),
                self.raw.len()
            )));
        }
        match self.mode {
            ScoreMode::RadSplatMax => {
                for (r, &m) in self.raw.iter_mut().zip(&stats.max) {
                    *r = r.max(m);
                }
            }
            ScoreMode::MiniSplatSum => {
                for (r, &s) in self.raw.iter_mut().zip(&stats.sum) {
                    *r += s;
                }
            }
        }
        self.views_seen += 1;
        Ok(())
    }

    /// Scores in `[0, 1]`. Sums are divided by their maximum.
    pub fn finalize(&self) -> Result<Vec<f64>> {
        if self.views_seen == 0 {
            return Err(Error::InvalidArgument(
                "cannot finalize scores before any view was accumulated".into(),
            ));
        }
        Ok(match self.mode {
            ScoreMode::RadSplatMax => self.raw.clone(),
            ScoreMode::MiniSplatSum => {
                let max = self.raw.iter().copied().fold(0.0, f64::max);
                if max > 0.0 {
                    self.raw.iter().map(|r| r / max).collect()
                } else {
                    vec![0.0; self.raw.len()]
                }
            }
        })
    }
}

/// Scores a cloud over a set of cameras with the fast rasterizer.
pub fn compute_scores(
    cloud: &GaussianCloud,
    cameras: &[&Camera],
    mode: ScoreMode,
    settings: &RenderSettings,
    gate: Option<&Gate<'_>>,
) -> Result<Vec<f64>> {
    let mut acc = ScoreAccumulator::new(mode, cloud.len());
    for cam in cameras {
        let stats = render_with_contributions(cloud, cam, settings, gate)?;
        acc.accumulate_view(&stats)?;
    }
    acc.finalize()
}

/// Reference scores: every pixel composites every projected Gaussian in depth
/// order with no culling box and no early termination. Quadratic cost; meant
/// for small test scenes.
pub fn score_oracle(
    cloud: &GaussianCloud,
    cameras: &[&Camera],
    mode: ScoreMode,
    settings: &RenderSettings,
) -> Result<Vec<f64>> {
    if cameras.is_empty() {
        return Err(Error::InvalidArgument("score oracle needs at least one view".into()));
    }
    let naive = RenderSettings {
        t_min: 0.0,
        ..settings.clone()
    };
    let mut acc = ScoreAccumulator::new(mode, cloud.len());
    for cam in cameras {
        let mut splats: Vec<ProjectedGaussian> = Vec::new();
        for i in 0..cloud.len() {
            if let Some(mut p) = project_gaussian(cloud, i, cam, settings, None)? {
                p.extent = [f64::INFINITY; 2];
                splats.push(p);
            }
        }
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_index.cmp(&b.source_index)));
        let mut stats = ViewContributions {
            max: vec![0.0; cloud.len()],
            sum: vec![0.0; cloud.len()],
        };
        for y in 0..cam.height {
            for x in 0..cam.width {
                let px = composite_pixel(&splats, [x as f64 + 0.5, y as f64 + 0.5], &naive);
                for c in px.contributions {
                    let i = c.source_index;
                    stats.max[i] = stats.max[i].max(c.weight);
                    stats.sum[i] += c.weight;
                }
            }
        }
        acc.accumulate_view(&stats)?;
    }
    acc.finalize()
}
