//! Differentiable CPU splat rasterizer.
//!
//! Gaussians are projected with the affine (EWA) approximation, globally
//! depth-sorted per view, binned into small pixel blocks and composited front
//! to back. The backward pass re-traverses each pixel back to front starting
//! from the stored final transmittance.
//!
//! All per-Gaussian reductions (gradients, contribution statistics) are done
//! per block and merged in block order, so results do not depend on the
//! number of worker threads.

mod backward;
mod project;
mod raster;

pub use backward::render_backward;
pub use project::{project_gaussian, ProjectedGaussian};
pub use raster::{
    composite_pixel, render_image, render_with_contributions, PixelResult, RenderAux,
    ViewContributions,
};

/// Rasterizer constants.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Added to the diagonal of every projected covariance.
    pub dilation: f64,
    /// Contributions with alpha below this are skipped.
    pub alpha_min: f64,
    /// Alpha is clamped to at most this value.
    pub alpha_max: f64,
    /// A pixel stops once its transmittance would drop below this.
    pub t_min: f64,
    pub near_clip: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            dilation: 0.3,
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.99,
            t_min: 1e-4,
            near_clip: 0.01,
        }
    }
}

/// What a per-Gaussian gate multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateTarget {
    Opacity,
    /// Opacity and all three scale axes.
    OpacityScale,
}

/// Per-Gaussian multiplicative gate applied inside the render.
#[derive(Clone, Copy, Debug)]
pub struct Gate<'a> {
    pub values: &'a [f64],
    pub target: GateTarget,
}

impl<'a> Gate<'a> {
    pub fn opacity(values: &'a [f64]) -> Self {
        Self {
            values,
            target: GateTarget::Opacity,
        }
    }

    pub(crate) fn opacity_factor(gate: Option<&Gate<'_>>, i: usize) -> f64 {
        gate.map_or(1.0, |g| g.values[i])
    }

    pub(crate) fn scale_factor(gate: Option<&Gate<'_>>, i: usize) -> f64 {
        match gate {
            Some(g) if g.target == GateTarget::OpacityScale => g.values[i],
            _ => 1.0,
        }
    }
}

/// One splat's contribution along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayContribution {
    pub source_index: usize,
    pub alpha: f64,
    pub transmittance: f64,
    pub weight: f64,
}

/// Gradients wrt every Gaussian parameter, laid out like [`crate::GaussianCloud`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub positions: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    /// dL/dgate for each Gaussian (zero when rendered ungated).
    pub mask_params: Vec<f64>,
    /// dL/d(projected mean) in pixels, used by densification.
    pub mean2d: Vec<f64>,
    /// Whether the Gaussian was projected into this view.
    pub visible: Vec<bool>,
}

impl GradientBuffer {
    pub fn zeros(n: usize, sh_width: usize) -> Self {
        Self {
            positions: vec![0.0; 3 * n],
            log_scales: vec![0.0; 3 * n],
            rotations: vec![0.0; 4 * n],
            opacity_logits: vec![0.0; n],
            sh_coeffs: vec![0.0; sh_width * n],
            mask_params: vec![0.0; n],
            mean2d: vec![0.0; 2 * n],
            visible: vec![false; n],
        }
    }

    pub fn group(&self, g: crate::ParamGroup) -> &[f64] {
        use crate::ParamGroup::*;
        match g {
            Position => &self.positions,
            LogScale => &self.log_scales,
            Rotation => &self.rotations,
            Opacity => &self.opacity_logits,
            Sh => &self.sh_coeffs,
            Mask => &self.mask_params,
        }
    }

    pub fn group_mut(&mut self, g: crate::ParamGroup) -> &mut Vec<f64> {
        use crate::ParamGroup::*;
        match g {
            Position => &mut self.positions,
            LogScale => &mut self.log_scales,
            Rotation => &mut self.rotations,
            Opacity => &mut self.opacity_logits,
            Sh => &mut self.sh_coeffs,
            Mask => &mut self.mask_params,
        }
    }

    pub fn all_finite(&self) -> bool {
        crate::ParamGroup::ALL
            .iter()
            .all(|&g| self.group(g).iter().all(|v| v.is_finite()))
            && self.mean2d.iter().all(|v| v.is_finite())
    }
}
