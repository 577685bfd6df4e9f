use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::project::Projection;
use super::raster::{check_inputs, project_all, Fingerprint, RenderAux};
use super::{Gate, GradientBuffer, RenderSettings};
use crate::error::{Error, Result};
use crate::scene::{quat_backward, Camera, GaussianCloud, Image};
use crate::sh;

/// Gradient wrt the screen-space quantities of one projected Gaussian.
#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    /// Wrt the inverse covariance entries (xx, xy, yy); xy enters the
    /// quadratic form twice.
    conic: [f64; 3],
    sigma: f64,
    rgb: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.rgb[k] += o.rgb[k];
        }
        self.sigma += o.sigma;
    }
}

/// Analytic gradient of `sum(upstream * image)` wrt every Gaussian parameter
/// and, when a gate is given, wrt each gate value.
///
/// `aux` must come from [`super::render_image`] called with the same cloud,
/// camera and gate.
pub fn render_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    gate: Option<&Gate<'_>>,
    aux: &RenderAux,
    upstream: &Image,
) -> Result<GradientBuffer> {
    check_inputs(cloud, gate)?;
    let fp = Fingerprint::of(cloud, camera, gate);
    if fp != aux.fingerprint {
        return Err(Error::StateMismatch(format!(
            "forward state {:?} differs from backward state {:?}",
            aux.fingerprint, fp
        )));
    }
    if upstream.width != camera.width || upstream.height != camera.height {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {}x{} for a {}x{} view",
            upstream.width, upstream.height, camera.width, camera.height
        )));
    }
    let (w, h) = (camera.width, camera.height);
    let projected = &aux.projected;
    let bins = &aux.bins;

    let blocks: Vec<Vec<ScreenGrad>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|b| {
            let list = &bins.lists[b];
            let mut acc = vec![ScreenGrad::default(); list.len()];
            for (x, y) in bins.block_pixels(b, w, h) {
                let pix = y * w + x;
                let dl = upstream.pixel(x, y);
                if dl == [0.0; 3] {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut t = aux.t_final[pix];
                let mut after = settings.background;
                for k in (0..aux.visited[pix] as usize).rev() {
                    let g = &projected[list[k] as usize];
                    let Some((raw, gval, dx, dy)) = g.falloff(px, py) else {
                        continue;
                    };
                    let alpha = raw.min(settings.alpha_max);
                    if alpha < settings.alpha_min {
                        continue;
                    }
                    let t_before = t / (1.0 - alpha);
                    let wgt = alpha * t_before;
                    let sg = &mut acc[k];
                    let mut d_alpha = 0.0;
                    for c in 0..3 {
                        sg.rgb[c] += wgt * dl[c];
                        d_alpha += dl[c] * t_before * (g.rgb[c] - after[c]);
                        after[c] = alpha * g.rgb[c] + (1.0 - alpha) * after[c];
                    }
                    t = t_before;
                    if raw < settings.alpha_max {
                        sg.sigma += gval * d_alpha;
                        let d_power = g.sigma_eff * gval * d_alpha;
                        let [a, bb, c] = g.inv_cov2d;
                        sg.mean[0] += d_power * (a * dx + bb * dy);
                        sg.mean[1] += d_power * (bb * dx + c * dy);
                        sg.conic[0] += d_power * (-0.5 * dx * dx);
                        sg.conic[1] += d_power * (-dx * dy);
                        sg.conic[2] += d_power * (-0.5 * dy * dy);
                    }
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); projected.len()];
    for (b, acc) in blocks.iter().enumerate() {
        for (k, &gi) in bins.lists[b].iter().enumerate() {
            screen[gi as usize].add(&acc[k]);
        }
    }

    // Re-run the projections to recover the intermediates.
    let projections = project_all(cloud, camera, settings, gate)?;
    if projections.len() != projected.len() {
        return Err(Error::StateMismatch("projection count changed".into()));
    }

    let sh_width = cloud.sh_width();
    let per_gaussian: Vec<(usize, GaussianGrad)> = projections
        .par_iter()
        .zip(screen.par_iter())
        .map(|(p, sg)| (p.out.source_index, projection_backward(cloud, camera, p, sg, sh_width)))
        .collect();

    let mut grads = GradientBuffer::zeros(cloud.len(), sh_width);
    for (i, g) in per_gaussian {
        grads.positions[3 * i..3 * i + 3].copy_from_slice(&g.position);
        grads.log_scales[3 * i..3 * i + 3].copy_from_slice(&g.log_scale);
        grads.rotations[4 * i..4 * i + 4].copy_from_slice(&g.rotation);
        grads.opacity_logits[i] = g.opacity_logit;
        grads.sh_coeffs[sh_width * i..sh_width * (i + 1)].copy_from_slice(&g.sh);
        if gate.is_some() {
            grads.mask_params[i] = g.gate;
        }
        grads.mean2d[2 * i..2 * i + 2].copy_from_slice(&g.mean2d);
        grads.visible[i] = true;
    }
    Ok(grads)
}

struct GaussianGrad {
    position: [f64; 3],
    log_scale: [f64; 3],
    rotation: [f64; 4],
    opacity_logit: f64,
    sh: Vec<f64>,
    gate: f64,
    mean2d: [f64; 2],
}

fn projection_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    p: &Projection,
    sg: &ScreenGrad,
    sh_width: usize,
) -> GaussianGrad {
    let i = p.out.source_index;
    let (fx, fy) = (camera.fx, camera.fy);
    let t = p.t_cam;
    let iz = 1.0 / t.z;

    // Inverse covariance -> covariance.
    let [ca, cb, cc] = p.out.inv_cov2d;
    let conic = Matrix2::new(ca, cb, cb, cc);
    let g_conic = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2 = -(conic * g_conic * conic);

    // cov2 = J M J^T
    let g_cov_cam = p.jac.transpose() * g_cov2 * p.jac;
    let g_jac = 2.0 * g_cov2 * p.jac * p.cov_cam;

    // M = W Sigma W^T, Sigma = A A^T, A = R S
    let g_sigma = camera.rotation.transpose() * g_cov_cam * camera.rotation;
    let a = p.rot * Matrix3::from_diagonal(&Vector3::from(p.scale_eff));
    let g_a = 2.0 * g_sigma * a;
    let mut g_rot = g_a;
    let mut g_scale_eff = [0.0; 3];
    for j in 0..3 {
        for r in 0..3 {
            g_rot[(r, j)] *= p.scale_eff[j];
            g_scale_eff[j] += g_a[(r, j)] * p.rot[(r, j)];
        }
    }
    let rotation = quat_backward(p.q_unit, p.q_norm, &g_rot);
    let log_scale = [
        g_scale_eff[0] * p.scale_eff[0],
        g_scale_eff[1] * p.scale_eff[1],
        g_scale_eff[2] * p.scale_eff[2],
    ];
    let gate_from_scale: f64 = (0..3).map(|j| g_scale_eff[j] * p.scale_raw[j]).sum();

    // Camera-space center from the projected mean and the Jacobian.
    let mut g_t = Vector3::new(
        sg.mean[0] * fx * iz,
        sg.mean[1] * fy * iz,
        -sg.mean[0] * fx * t.x * iz * iz - sg.mean[1] * fy * t.y * iz * iz,
    );
    g_t.x += g_jac[(0, 2)] * (-fx * iz * iz);
    g_t.y += g_jac[(1, 2)] * (-fy * iz * iz);
    g_t.z += g_jac[(0, 0)] * (-fx * iz * iz)
        + g_jac[(0, 2)] * (2.0 * fx * t.x * iz * iz * iz)
        + g_jac[(1, 1)] * (-fy * iz * iz)
        + g_jac[(1, 2)] * (2.0 * fy * t.y * iz * iz * iz);
    let mut g_pos = camera.rotation.transpose() * g_t;

    // Color through SH, including its dependence on the view direction.
    let mut g_rgb = sg.rgb;
    for c in 0..3 {
        if p.clamped[c] {
            g_rgb[c] = 0.0;
        }
    }
    let mut sh_grad = vec![0.0; sh_width];
    let g_dir = sh::eval_sh_backward(cloud.sh(i), p.view_dir, cloud.sh_degree(), g_rgb, &mut sh_grad);
    if p.view_dist > 0.0 {
        let d = p.view_dir;
        let dot = g_dir[0] * d[0] + g_dir[1] * d[1] + g_dir[2] * d[2];
        for k in 0..3 {
            g_pos[k] += (g_dir[k] - dot * d[k]) / p.view_dist;
        }
    }

    // sigma_eff = sigmoid(logit) * gate
    let g_sigma_raw = sg.sigma * p.opacity_gate;
    let opacity_logit = g_sigma_raw * p.sigma * (1.0 - p.sigma);
    let gate_from_opacity = sg.sigma * p.sigma;
    let gate = if p.gates_scale {
        gate_from_opacity + gate_from_scale
    } else {
        gate_from_opacity
    };

    GaussianGrad {
        position: [g_pos.x, g_pos.y, g_pos.z],
        log_scale,
        rotation,
        opacity_logit,
        sh: sh_grad,
        gate,
        mean2d: sg.mean,
    }
}
