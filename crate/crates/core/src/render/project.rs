use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::{Gate, RenderSettings};
use crate::error::Result;
use crate::scene::{normalize_quat, quat_to_matrix, sigmoid, Camera, GaussianCloud};
use crate::sh;

/// A Gaussian after projection to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: [f64; 2],
    /// Dilated 2D covariance `(xx, xy, yy)`.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d` `(xx, xy, yy)`.
    pub inv_cov2d: [f64; 3],
    pub depth: f64,
    pub rgb: [f64; 3],
    pub sigma_eff: f64,
    pub source_index: usize,
    /// Half-extent of the box outside which alpha is below `alpha_min`.
    pub extent: [f64; 2],
}

impl ProjectedGaussian {
    /// Alpha before clamping and the Gaussian falloff at a pixel, or `None`
    /// when the pixel lies outside the culling box.
    #[inline]
    pub(crate) fn falloff(&self, px: f64, py: f64) -> Option<(f64, f64, f64, f64)> {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        if dx.abs() > self.extent[0] || dy.abs() > self.extent[1] {
            return None;
        }
        let [a, b, c] = self.inv_cov2d;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        let g = power.exp();
        Some((self.sigma_eff * g, g, dx, dy))
    }
}

/// Intermediate quantities shared by the forward projection and its backward.
pub(crate) struct Projection {
    pub out: ProjectedGaussian,
    pub t_cam: Vector3<f64>,
    pub jac: Matrix2x3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub rot: Matrix3<f64>,
    pub q_unit: [f64; 4],
    pub q_norm: f64,
    pub scale_raw: [f64; 3],
    pub scale_eff: [f64; 3],
    pub sigma: f64,
    pub opacity_gate: f64,
    pub gates_scale: bool,
    pub view_dir: [f64; 3],
    pub view_dist: f64,
    pub clamped: [bool; 3],
}

pub(crate) fn project(
    cloud: &GaussianCloud,
    index: usize,
    camera: &Camera,
    settings: &RenderSettings,
    gate: Option<&Gate<'_>>,
) -> Result<Option<Projection>> {
    let p = Vector3::from(cloud.position(index));
    let t = camera.to_camera(&p);
    if t.z <= settings.near_clip {
        return Ok(None);
    }
    let sigma = sigmoid(cloud.opacity_logits[index]);
    let opacity_gate = Gate::opacity_factor(gate, index);
    let sigma_eff = sigma * opacity_gate;
    if sigma_eff < settings.alpha_min {
        return Ok(None);
    }

    let (q_unit, q_norm) = normalize_quat(cloud.rotation(index))?;
    let rot = quat_to_matrix(q_unit);
    let ls = cloud.log_scale(index);
    let scale_gate = Gate::scale_factor(gate, index);
    let scale_raw = [ls[0].exp(), ls[1].exp(), ls[2].exp()];
    let scale_eff = [
        scale_raw[0] * scale_gate,
        scale_raw[1] * scale_gate,
        scale_raw[2] * scale_gate,
    ];
    let a = rot * Matrix3::from_diagonal(&Vector3::from(scale_eff));
    let cov_world = a * a.transpose();
    let cov_cam = camera.rotation * cov_world * camera.rotation.transpose();

    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let jac = Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * t.x * iz * iz,
        0.0,
        fy * iz,
        -fy * t.y * iz * iz,
    );
    let cov2 = jac * cov_cam * jac.transpose() + Matrix2::identity() * settings.dilation;
    let (xx, xy, yy) = (cov2[(0, 0)], 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]), cov2[(1, 1)]);
    let det = xx * yy - xy * xy;
    if !(det > 0.0) {
        return Ok(None);
    }
    let inv = [yy / det, -xy / det, xx / det];
    let mean2d = [fx * t.x * iz + camera.cx, fy * t.y * iz + camera.cy];

    // Box containing every pixel where sigma_eff * G >= alpha_min.
    let k = 2.0 * (sigma_eff / settings.alpha_min).ln();
    let extent = [(k * xx).sqrt(), (k * yy).sqrt()];
    if mean2d[0] + extent[0] < 0.0
        || mean2d[0] - extent[0] > camera.width as f64
        || mean2d[1] + extent[1] < 0.0
        || mean2d[1] - extent[1] > camera.height as f64
    {
        return Ok(None);
    }

    let v = p - camera.center();
    let view_dist = v.norm();
    let view_dir = if view_dist > 0.0 {
        [v.x / view_dist, v.y / view_dist, v.z / view_dist]
    } else {
        [0.0, 0.0, 1.0]
    };
    let raw = sh::eval_unchecked(cloud.sh(index), view_dir, cloud.sh_degree());
    let (rgb, clamped) = sh::clamp_color(raw);

    Ok(Some(Projection {
        out: ProjectedGaussian {
            mean2d,
            cov2d: [xx, xy, yy],
            inv_cov2d: inv,
            depth: t.z,
            rgb,
            sigma_eff,
            source_index: index,
            extent,
        },
        t_cam: t,
        jac,
        cov_cam,
        rot,
        q_unit,
        q_norm,
        scale_raw,
        scale_eff,
        sigma,
        opacity_gate,
        gates_scale: matches!(gate, Some(g) if g.target == super::GateTarget::OpacityScale),
        view_dir,
        view_dist,
        clamped,
    }))
}

/// Projects one Gaussian; `None` means it cannot contribute to this view
/// (behind the near plane, too transparent, or entirely off-screen).
pub fn project_gaussian(
    cloud: &GaussianCloud,
    index: usize,
    camera: &Camera,
    settings: &RenderSettings,
    gate: Option<&Gate<'_>>,
) -> Result<Option<ProjectedGaussian>> {
    Ok(project(cloud, index, camera, settings, gate)?.map(|p| p.out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{logit, Gaussian};

    fn axis_camera(f: f64) -> Camera {
        Camera::new(
            f,
            f,
            32.0,
            32.0,
            64,
            64,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap()
    }

    fn single(depth: f64, s: f64) -> GaussianCloud {
        let mut c = GaussianCloud::new(0);
        c.push(&Gaussian {
            position: [0.0, 0.0, depth],
            log_scale: [s.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(0.8),
            sh: vec![0.0; 3],
        });
        c
    }

    #[test]
    fn on_axis_closed_form() {
        let settings = RenderSettings::default();
        let (f, s, d) = (50.0, 0.1, 2.0);
        let p = project_gaussian(&single(d, s), 0, &axis_camera(f), &settings, None)
            .unwrap()
            .unwrap();
        assert_eq!(p.mean2d, [32.0, 32.0]);
        let expected = (f * s / d).powi(2) + settings.dilation;
        assert!((p.cov2d[0] - expected).abs() < 1e-12);
        assert!((p.cov2d[2] - expected).abs() < 1e-12);
        assert!(p.cov2d[1].abs() < 1e-12);
        assert_eq!(p.depth, d);
    }

    #[test]
    fn doubling_depth_quarters_covariance() {
        let settings = RenderSettings {
            dilation: 0.0,
            ..Default::default()
        };
        let cam = axis_camera(50.0);
        let near = project_gaussian(&single(2.0, 0.1), 0, &cam, &settings, None).unwrap().unwrap();
        let far = project_gaussian(&single(4.0, 0.1), 0, &cam, &settings, None).unwrap().unwrap();
        assert!((far.cov2d[0] * 4.0 - near.cov2d[0]).abs() < 1e-12);
    }

    #[test]
    fn near_clip_skips() {
        let settings = RenderSettings::default();
        let cam = axis_camera(50.0);
        assert!(project_gaussian(&single(0.01, 0.1), 0, &cam, &settings, None).unwrap().is_none());
        assert!(project_gaussian(&single(-1.0, 0.1), 0, &cam, &settings, None).unwrap().is_none());
    }

    #[test]
    fn offscreen_skips() {
        let settings = RenderSettings::default();
        let cam = axis_camera(50.0);
        let mut c = single(2.0, 0.01);
        c.positions[0] = 10.0;
        assert!(project_gaussian(&c, 0, &cam, &settings, None).unwrap().is_none());
    }
}
