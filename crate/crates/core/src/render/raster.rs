use rayon::prelude::*;

use super::project::{project, Projection};
use super::{Gate, ProjectedGaussian, RayContribution, RenderSettings};
use crate::error::{Error, Result};
use crate::scene::{Camera, GaussianCloud, Image};

pub(crate) const BLOCK: usize = 8;

/// Result of compositing one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelResult {
    pub rgb: [f64; 3],
    /// Transmittance left after the last contributor.
    pub transmittance: f64,
    pub contributions: Vec<RayContribution>,
}

/// Front-to-back compositing of depth-sorted contributors at one pixel.
pub fn composite_pixel(
    sorted_contributors: &[ProjectedGaussian],
    pixel: [f64; 2],
    settings: &RenderSettings,
) -> PixelResult {
    let mut rgb = [0.0; 3];
    let mut t = 1.0;
    let mut contributions = Vec::new();
    for g in sorted_contributors {
        let Some((raw, _, _, _)) = g.falloff(pixel[0], pixel[1]) else {
            continue;
        };
        let alpha = raw.min(settings.alpha_max);
        if alpha < settings.alpha_min {
            continue;
        }
        let next = t * (1.0 - alpha);
        if next < settings.t_min {
            break;
        }
        for c in 0..3 {
            rgb[c] += g.rgb[c] * alpha * t;
        }
        contributions.push(RayContribution {
            source_index: g.source_index,
            alpha,
            transmittance: t,
            weight: alpha * t,
        });
        t = next;
    }
    for c in 0..3 {
        rgb[c] += t * settings.background[c];
    }
    PixelResult {
        rgb,
        transmittance: t,
        contributions,
    }
}

/// Depth-sorted projected Gaussians binned into `BLOCK x BLOCK` pixel blocks.
#[derive(Clone, Debug)]
pub(crate) struct Bins {
    pub blocks_x: usize,
    pub lists: Vec<Vec<u32>>,
}

impl Bins {
    fn build(projected: &[ProjectedGaussian], width: usize, height: usize) -> Self {
        let blocks_x = width.div_ceil(BLOCK);
        let blocks_y = height.div_ceil(BLOCK);
        let mut order: Vec<u32> = (0..projected.len() as u32).collect();
        // Stable tie-break on source index keeps the render independent of input order.
        order.sort_by(|&a, &b| {
            let (ga, gb) = (&projected[a as usize], &projected[b as usize]);
            ga.depth
                .total_cmp(&gb.depth)
                .then(ga.source_index.cmp(&gb.source_index))
        });
        let mut lists = vec![Vec::new(); blocks_x * blocks_y];
        for &k in &order {
            let g = &projected[k as usize];
            // Pixel centers are at i + 0.5.
            let x0 = ((g.mean2d[0] - g.extent[0] - 0.5).ceil().max(0.0)) as usize;
            let y0 = ((g.mean2d[1] - g.extent[1] - 0.5).ceil().max(0.0)) as usize;
            let x1 = (g.mean2d[0] + g.extent[0] - 0.5).floor();
            let y1 = (g.mean2d[1] + g.extent[1] - 0.5).floor();
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            let x1 = (x1 as usize).min(width - 1);
            let y1 = (y1 as usize).min(height - 1);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            for by in y0 / BLOCK..=y1 / BLOCK {
                for bx in x0 / BLOCK..=x1 / BLOCK {
                    lists[by * blocks_x + bx].push(k);
                }
            }
        }
        Self {
            blocks_x,
            lists,
        }
    }

    pub fn block_pixels(&self, b: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
        let bx = b % self.blocks_x;
        let by = b / self.blocks_x;
        let xs = bx * BLOCK..((bx + 1) * BLOCK).min(width);
        let ys = by * BLOCK..((by + 1) * BLOCK).min(height);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }
}

/// Everything the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct RenderAux {
    pub(crate) projected: Vec<ProjectedGaussian>,
    pub(crate) bins: Bins,
    /// Final transmittance per pixel.
    pub(crate) t_final: Vec<f64>,
    /// Number of block-list entries visited per pixel before termination.
    pub(crate) visited: Vec<u32>,
    pub(crate) fingerprint: Fingerprint,
}

impl RenderAux {
    pub fn projected(&self) -> &[ProjectedGaussian] {
        &self.projected
    }

    pub fn final_transmittance(&self) -> &[f64] {
        &self.t_final
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Fingerprint {
    pub n: usize,
    pub width: usize,
    pub height: usize,
    pub cloud_sum: f64,
    pub gate_sum: f64,
}

impl Fingerprint {
    pub fn of(cloud: &GaussianCloud, camera: &Camera, gate: Option<&Gate<'_>>) -> Self {
        Self {
            n: cloud.len(),
            width: camera.width,
            height: camera.height,
            cloud_sum: cloud.checksum(),
            gate_sum: gate.map_or(-1.0, |g| g.values.iter().sum()),
        }
    }
}

pub(crate) fn check_inputs(cloud: &GaussianCloud, gate: Option<&Gate<'_>>) -> Result<()> {
    cloud.validate()?;
    if let Some((index, field)) = cloud.first_non_finite() {
        return Err(Error::NonFinite { index, field });
    }
    if let Some(g) = gate {
        if g.values.len() != cloud.len() {
            return Err(Error::ShapeMismatch(format!(
                "gate has {} entries for {} Gaussians",
                g.values.len(),
                cloud.len()
            )));
        }
        if let Some(index) = g.values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite {
                index,
                field: "mask gate",
            });
        }
    }
    Ok(())
}

pub(crate) fn project_all(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    gate: Option<&Gate<'_>>,
) -> Result<Vec<Projection>> {
    let results: Vec<Result<Option<Projection>>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| project(cloud, i, camera, settings, gate))
        .collect();
    let mut out = Vec::new();
    for r in results {
        if let Some(p) = r? {
            out.push(p);
        }
    }
    Ok(out)
}

struct BlockOutput {
    rgb: Vec<[f64; 3]>,
    t_final: Vec<f64>,
    visited: Vec<u32>,
}

/// Renders a view. With a gate, each Gaussian's opacity (and optionally its
/// scale) is multiplied by its gate value.
pub fn render_image(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    gate: Option<&Gate<'_>>,
) -> Result<(Image, RenderAux)> {
    check_inputs(cloud, gate)?;
    let (w, h) = (camera.width, camera.height);
    let projected: Vec<ProjectedGaussian> = project_all(cloud, camera, settings, gate)?
        .into_iter()
        .map(|p| p.out)
        .collect();
    let bins = Bins::build(&projected, w, h);

    let blocks: Vec<BlockOutput> = (0..bins.lists.len())
        .into_par_iter()
        .map(|b| {
            let list = &bins.lists[b];
            let mut out = BlockOutput {
                rgb: Vec::with_capacity(BLOCK * BLOCK),
                t_final: Vec::with_capacity(BLOCK * BLOCK),
                visited: Vec::with_capacity(BLOCK * BLOCK),
            };
            for (x, y) in bins.block_pixels(b, w, h) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut rgb = [0.0; 3];
                let mut t = 1.0;
                let mut visited = list.len() as u32;
                for (k, &gi) in list.iter().enumerate() {
                    let g = &projected[gi as usize];
                    let Some((raw, _, _, _)) = g.falloff(px, py) else {
                        continue;
                    };
                    let alpha = raw.min(settings.alpha_max);
                    if alpha < settings.alpha_min {
                        continue;
                    }
                    let next = t * (1.0 - alpha);
                    if next < settings.t_min {
                        visited = k as u32;
                        break;
                    }
                    let wgt = alpha * t;
                    rgb[0] += g.rgb[0] * wgt;
                    rgb[1] += g.rgb[1] * wgt;
                    rgb[2] += g.rgb[2] * wgt;
                    t = next;
                }
                for c in 0..3 {
                    rgb[c] += t * settings.background[c];
                }
                out.rgb.push(rgb);
                out.t_final.push(t);
                out.visited.push(visited);
            }
            out
        })
        .collect();

    let mut image = Image::new(w, h);
    let mut t_final = vec![0.0; w * h];
    let mut visited = vec![0u32; w * h];
    for (b, block) in blocks.iter().enumerate() {
        for (k, (x, y)) in bins.block_pixels(b, w, h).enumerate() {
            image.set_pixel(x, y, block.rgb[k]);
            t_final[y * w + x] = block.t_final[k];
            visited[y * w + x] = block.visited[k];
        }
    }
    let aux = RenderAux {
        projected,
        bins,
        t_final,
        visited,
        fingerprint: Fingerprint::of(cloud, camera, gate),
    };
    Ok((image, aux))
}

/// Per-Gaussian statistics of `alpha * T` over every ray of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewContributions {
    pub max: Vec<f64>,
    pub sum: Vec<f64>,
}

/// Renders a view while recording, for every Gaussian, the maximum and the
/// sum of its compositing weight `alpha * T` over all pixels.
pub fn render_with_contributions(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    gate: Option<&Gate<'_>>,
) -> Result<ViewContributions> {
    check_inputs(cloud, gate)?;
    let (w, h) = (camera.width, camera.height);
    let projected: Vec<ProjectedGaussian> = project_all(cloud, camera, settings, gate)?
        .into_iter()
        .map(|p| p.out)
        .collect();
    let bins = Bins::build(&projected, w, h);

    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..bins.lists.len())
        .into_par_iter()
        .map(|b| {
            let list = &bins.lists[b];
            let mut max = vec![0.0; list.len()];
            let mut sum = vec![0.0; list.len()];
            for (x, y) in bins.block_pixels(b, w, h) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut t = 1.0;
                for (k, &gi) in list.iter().enumerate() {
                    let g = &projected[gi as usize];
                    let Some((raw, _, _, _)) = g.falloff(px, py) else {
                        continue;
                    };
                    let alpha = raw.min(settings.alpha_max);
                    if alpha < settings.alpha_min {
                        continue;
                    }
                    let next = t * (1.0 - alpha);
                    if next < settings.t_min {
                        break;
                    }
                    let wgt = alpha * t;
                    if wgt > max[k] {
                        max[k] = wgt;
                    }
                    sum[k] += wgt;
                    t = next;
                }
            }
            (max, sum)
        })
        .collect();

    let n = cloud.len();
    let mut out = ViewContributions {
        max: vec![0.0; n],
        sum: vec![0.0; n],
    };
    for (b, (max, sum)) in blocks.iter().enumerate() {
        for (k, &gi) in bins.lists[b].iter().enumerate() {
            let src = projected[gi as usize].source_index;
            if max[k] > out.max[src] {
                out.max[src] = max[k];
            }
            out.sum[src] += sum[k];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{logit, Gaussian};
    use nalgebra::{Matrix3, Vector3};

    fn splat_at(x: f64, y: f64, depth: f64, sigma: f64, rgb: [f64; 3]) -> ProjectedGaussian {
        ProjectedGaussian {
            mean2d: [x, y],
            cov2d: [1.0, 0.0, 1.0],
            inv_cov2d: [1.0, 0.0, 1.0],
            depth,
            rgb,
            sigma_eff: sigma,
            source_index: 0,
            extent: [10.0, 10.0],
        }
    }

    #[test]
    fn single_contributor_at_center() {
        let s = RenderSettings::default();
        let r = composite_pixel(&[splat_at(3.0, 4.0, 1.0, 0.5, [1.0, 0.0, 0.0])], [3.0, 4.0], &s);
        assert_eq!(r.rgb, [0.5, 0.0, 0.0]);
        assert_eq!(r.transmittance, 0.5);
    }

    #[test]
    fn two_contributors_front_to_back() {
        let s = RenderSettings::default();
        let front = splat_at(3.0, 4.0, 1.0, 0.5, [1.0, 0.0, 0.0]);
        let back = splat_at(3.0, 4.0, 2.0, 0.5, [0.0, 0.0, 1.0]);
        let r = composite_pixel(&[front, back], [3.0, 4.0], &s);
        assert!((r.rgb[0] - 0.5).abs() < 1e-15);
        assert_eq!(r.rgb[1], 0.0);
        assert!((r.rgb[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn empty_list_is_background() {
        let s = RenderSettings {
            background: [0.2, 0.3, 0.4],
            ..Default::default()
        };
        let r = composite_pixel(&[], [0.0, 0.0], &s);
        assert_eq!(r.rgb, [0.2, 0.3, 0.4]);
        assert_eq!(r.transmittance, 1.0);
    }

    fn camera() -> Camera {
        Camera::new(40.0, 40.0, 8.0, 8.0, 16, 16, Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    #[test]
    fn empty_cloud_renders_background() {
        let s = RenderSettings {
            background: [0.1, 0.2, 0.3],
            ..Default::default()
        };
        let (img, _) = render_image(&GaussianCloud::new(0), &camera(), &s, None).unwrap();
        assert!(img.data.chunks(3).all(|p| p == [0.1, 0.2, 0.3]));
    }

    #[test]
    fn non_finite_parameter_names_index() {
        let mut c = GaussianCloud::new(0);
        for _ in 0..3 {
            c.push(&Gaussian {
                position: [0.0, 0.0, 2.0],
                log_scale: [-2.0; 3],
                rotation: [1.0, 0.0, 0.0, 0.0],
                opacity_logit: logit(0.5),
                sh: vec![0.1; 3],
            });
        }
        c.log_scales[4] = f64::NAN;
        let err = render_image(&c, &camera(), &RenderSettings::default(), None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
    }
}
