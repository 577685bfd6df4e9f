//! Image-quality metrics and evaluation reports.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::View;
use crate::error::{Error, Result};
use crate::render::{render_image, Gate, RenderSettings};
use crate::scene::{GaussianCloud, Image};
use crate::train::ssim;

/// Value returned for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(1 / MSE)` on unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean windowed SSIM, identical to the value term of the SSIM loss.
pub fn ssim_eval(a: &Image, b: &Image) -> Result<f64> {
    ssim(a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub n_gaussians: usize,
    pub prune_ratio: f64,
    pub seconds: f64,
}

/// `lpips` is always empty: it is reserved so external tools can join
/// perceptual scores by row.
pub const EVAL_HEADER: &str = "view,psnr,ssim,lpips,n_gaussians,prune_ratio,seconds";

impl EvalReport {
    /// Writes the per-view rows followed by a `mean` row. The wall-clock
    /// column is left empty when `with_timing` is false so reports can be
    /// compared byte for byte.
    pub fn write_csv<W: Write>(&self, mut w: W, with_timing: bool) -> Result<()> {
        writeln!(w, "{EVAL_HEADER}")?;
        let secs = |s: f64| if with_timing { format!("{s:.6}") } else { String::new() };
        for v in &self.views {
            writeln!(
                w,
                "{},{},{},,{},{},{}",
                v.view,
                v.psnr,
                v.ssim,
                self.n_gaussians,
                self.prune_ratio,
                secs(v.seconds)
            )?;
        }
        writeln!(
            w,
            "mean,{},{},,{},{},{}",
            self.mean_psnr,
            self.mean_ssim,
            self.n_gaussians,
            self.prune_ratio,
            secs(self.seconds)
        )?;
        Ok(())
    }
}

/// Renders every test view and scores it against its ground truth.
pub fn eval_model(
    cloud: &GaussianCloud,
    views: &[View],
    settings: &RenderSettings,
    gate: Option<&Gate<'_>>,
    prune_ratio: f64,
) -> Result<EvalReport> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one test view".into()));
    }
    let start = Instant::now();
    let rows: Vec<Result<ViewMetrics>> = views
        .par_iter()
        .map(|v| {
            let t = Instant::now();
            let (img, _) = render_image(cloud, &v.camera, settings, gate)?;
            Ok(ViewMetrics {
                view: v.index,
                psnr: psnr(&img, &v.image)?,
                ssim: ssim_eval(&img, &v.image)?,
                seconds: t.elapsed().as_secs_f64(),
            })
        })
        .collect();
    let views: Vec<ViewMetrics> = rows.into_iter().collect::<Result<_>>()?;
    let n = views.len() as f64;
    Ok(EvalReport {
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        views,
        n_gaussians: cloud.len(),
        prune_ratio,
        seconds: start.elapsed().as_secs_f64(),
    })
}
