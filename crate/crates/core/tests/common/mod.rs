//! Random small scenes and finite-difference helpers shared by the gradient
//! checks.

#![allow(dead_code)]

use gsprune::data::look_at;
use gsprune::masking::{gate_values, gumbel_sigmoid, mask_regularizer, MaskKind, MaskState, MaskTarget};
use gsprune::render::{render_backward, render_image, Gate, GateTarget, RenderSettings};
use gsprune::train::{loss_ssim, total_loss, MaskPenalty};
use gsprune::sh::{basis_count, SH_C0};
use gsprune::{Camera, Gaussian, GaussianCloud, Image, ParamGroup};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIZE: usize = 16;

/// Gradients smaller than this are compared by absolute rather than relative
/// error.
pub const GRAD_FLOOR: f64 = 1e-6;

/// A random scene small enough for finite differences.
pub struct SmallScene {
    pub cloud: GaussianCloud,
    pub camera: Camera,
    pub gate: Option<(Vec<f64>, GateTarget)>,
    pub upstream: Image,
    pub background: [f64; 3],
}

impl SmallScene {
    /// Rendering settings under which the image is a smooth function of the
    /// parameters: the alpha cutoff (and with it the culling box) is pushed
    /// to a negligible level, and opacities stay clear of the alpha cap and
    /// of early termination.
    pub fn smooth_settings(&self) -> RenderSettings {
        RenderSettings {
            background: self.background,
            alpha_min: 1e-12,
            t_min: 1e-14,
            ..RenderSettings::default()
        }
    }
}

pub fn camera_looking_at_origin(rng: &mut ChaCha8Rng, size: usize) -> Camera {
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let el = rng.random_range(-0.6f64..0.6);
    let r = rng.random_range(2.5..3.5);
    let eye = Vector3::new(r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin());
    let (rot, t) = look_at(eye, Vector3::zeros(), Vector3::z()).unwrap();
    let f = size as f64 / (2.0 * (0.5f64).tan());
    Camera::new(f, f, size as f64 / 2.0, size as f64 / 2.0, size, size, rot, t).unwrap()
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, sh_degree: usize) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(sh_degree);
    let nb = basis_count(sh_degree);
    for _ in 0..n {
        let rotation = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.3..1.0),
        ];
        let mut sh = vec![0.0; 3 * nb];
        for c in 0..3 {
            sh[c] = (rng.random_range(0.3..0.7) - 0.5) / SH_C0;
        }
        for v in sh.iter_mut().skip(3) {
            *v = rng.random_range(-0.01..0.01);
        }
        let opacity: f64 = rng.random_range(0.2..0.6);
        cloud.push(&Gaussian {
            position: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            log_scale: std::array::from_fn(|_| rng.random_range(0.1f64..0.35).ln()),
            rotation,
            opacity_logit: (opacity / (1.0 - opacity)).ln(),
            sh,
        });
    }
    cloud
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> Image {
    Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Scene `k` of the gradient suite: 1 to 8 Gaussians, a 16x16 view, random
/// SH degree, and a gate on a third of the scenes for each target.
pub fn small_scene(k: u64) -> SmallScene {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5CE7E + k);
    let n = rng.random_range(1..=8);
    let degree = rng.random_range(0..=3);
    let cloud = random_cloud(&mut rng, n, degree);
    let camera = camera_looking_at_origin(&mut rng, SIZE);
    let gate = match k % 3 {
        0 => None,
        1 => Some(((0..n).map(|_| rng.random_range(0.3..1.0)).collect(), GateTarget::Opacity)),
        _ => Some(((0..n).map(|_| rng.random_range(0.3..1.0)).collect(), GateTarget::OpacityScale)),
    };
    let upstream = random_image(&mut rng, SIZE, SIZE, -1.0, 1.0);
    let background = std::array::from_fn(|_| rng.random_range(0.0..0.3));
    SmallScene {
        cloud,
        camera,
        gate,
        upstream,
        background,
    }
}

/// Richardson-extrapolated central difference of `f` at `x` with step `h`.
pub fn derivative(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let mut central = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    let coarse = central(h);
    let fine = central(h / 2.0);
    (4.0 * fine - coarse) / 3.0
}

/// `|a - b| / max(|a|, |b|, GRAD_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

pub fn dot(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Largest relative error of one family of analytic gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheck {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            max_rel: 0.0,
            tolerance,
            checked: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel = self.max_rel.max(rel_err(analytic, numeric));
        self.checked += 1;
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel < self.tolerance
    }
}

/// Tolerance for gradients through the renderer and the image losses.
pub const RENDER_TOL: f64 = 1e-4;
/// Tolerance for the scalar mask operations.
pub const MASK_TOL: f64 = 1e-5;

fn objective(s: &SmallScene, cloud: &GaussianCloud, gate: Option<&[f64]>) -> f64 {
    let settings = s.smooth_settings();
    let g = gate.zip(s.gate.as_ref()).map(|(values, (_, target))| Gate {
        values,
        target: *target,
    });
    let (img, _) = render_image(cloud, &s.camera, &settings, g.as_ref()).unwrap();
    dot(&img, &s.upstream)
}

/// Checks `render_backward` against finite differences for every parameter
/// (and gate value) of scene `k`.
pub fn check_render_backward(k: u64, out: &mut GradCheck) {
    let s = small_scene(k);
    let settings = s.smooth_settings();
    let gate = s.gate.as_ref().map(|(v, t)| Gate { values: v, target: *t });
    let (_, aux) = render_image(&s.cloud, &s.camera, &settings, gate.as_ref()).unwrap();
    let grads = render_backward(&s.cloud, &s.camera, &settings, gate.as_ref(), &aux, &s.upstream).unwrap();
    let gate_values = s.gate.as_ref().map(|(v, _)| v.clone());
    for group in [
        ParamGroup::Position,
        ParamGroup::LogScale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Sh,
    ] {
        for j in 0..s.cloud.group(group).len() {
            let x0 = s.cloud.group(group)[j];
            let numeric = derivative(
                |x| {
                    let mut c = s.cloud.clone();
                    c.group_mut(group)[j] = x;
                    objective(&s, &c, gate_values.as_deref())
                },
                x0,
                1e-3,
            );
            out.record(grads.group(group)[j], numeric);
        }
    }
    if let Some(values) = &gate_values {
        for i in 0..values.len() {
            let numeric = derivative(
                |x| {
                    let mut v = values.clone();
                    v[i] = x;
                    objective(&s, &s.cloud, Some(&v))
                },
                values[i],
                1e-4,
            );
            out.record(grads.mask_params[i], numeric);
        }
    }
}

/// A random image pair whose pixels differ by at least 0.01, keeping the L1
/// term away from its kink.
fn loss_images(k: u64) -> (Image, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1055 + k);
    let a = random_image(&mut rng, SIZE, SIZE, 0.0, 1.0);
    let mut b = a.clone();
    for v in &mut b.data {
        let d = rng.random_range(0.01..0.5);
        *v += if rng.random_bool(0.5) { d } else { -d };
    }
    (a, b)
}

/// Checks the SSIM loss gradient wrt every pixel of a random image pair.
pub fn check_loss_ssim(k: u64, out: &mut GradCheck) {
    let (a, b) = loss_images(k);
    let (_, grad) = loss_ssim(&a, &b).unwrap();
    for j in 0..a.data.len() {
        let numeric = derivative(
            |x| {
                let mut p = a.clone();
                p.data[j] = x;
                loss_ssim(&p, &b).unwrap().0
            },
            a.data[j],
            1e-4,
        );
        out.record(grad.data[j], numeric);
    }
}

/// Checks `total_loss` wrt the rendered image and the mask parameters, with
/// the mask penalty of a Gumbel and an STE mask.
pub fn check_total_loss(k: u64, out: &mut GradCheck) {
    let (a, b) = loss_images(k);
    let mut rng = ChaCha8Rng::seed_from_u64(0x7074 + k);
    let n = 6;
    let m: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let kind = if k % 2 == 0 { MaskKind::Gumbel } else { MaskKind::Ste };
    let mask = MaskState::new(kind, MaskTarget::Score, 0.5, k).unwrap();
    let (lambda_ssim, lambda_m) = (0.2, 0.3);
    let eval = |img: &Image, m: &[f64]| {
        let (value, grad) = mask_regularizer(&mask, m, Some(&scores));
        let penalty = MaskPenalty { value, grad };
        total_loss(img, &b, lambda_ssim, lambda_m, Some(&penalty)).unwrap()
    };
    let base = eval(&a, &m);
    for j in 0..a.data.len() {
        let numeric = derivative(
            |x| {
                let mut p = a.clone();
                p.data[j] = x;
                eval(&p, &m).total
            },
            a.data[j],
            1e-4,
        );
        out.record(base.d_image.data[j], numeric);
    }
    for i in 0..n {
        let numeric = derivative(
            |x| {
                let mut v = m.clone();
                v[i] = x;
                eval(&a, &v).total
            },
            m[i],
            1e-4,
        );
        out.record(base.d_mask[i], numeric);
    }
}

/// Checks `gumbel_sigmoid` wrt its argument over random arguments, noise and
/// temperatures.
pub fn check_gumbel_sigmoid(k: u64, out: &mut GradCheck) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6B + k);
    for _ in 0..50 {
        let x: f64 = rng.random_range(-3.0f64..3.0).exp();
        let tau = rng.random_range(0.1..2.0);
        let g0 = rng.random_range(-2.0..2.0);
        let g1 = rng.random_range(-2.0..2.0);
        let (_, d) = gumbel_sigmoid(x, tau, g0, g1).unwrap();
        let numeric = derivative(|v| gumbel_sigmoid(v, tau, g0, g1).unwrap().0, x, 1e-4 * x);
        out.record(d, numeric);
    }
}

/// Checks the gate derivatives wrt the mask parameters for stochastic and
/// deterministic Gumbel gates of every target, and the regularizers of both
/// mask kinds.
pub fn check_mask_ops(k: u64, out: &mut GradCheck) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3A5 + k);
    let n = 8;
    let m: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    for target in [MaskTarget::Score, MaskTarget::Opacity, MaskTarget::OpacityScale] {
        let mask = MaskState::new(MaskKind::Gumbel, target, 0.5, 17 + k).unwrap();
        for deterministic in [false, true] {
            let gates = gate_values(&mask, &m, Some(&scores), k, deterministic).unwrap();
            for i in 0..n {
                let numeric = derivative(
                    |x| {
                        let mut v = m.clone();
                        v[i] = x;
                        gate_values(&mask, &v, Some(&scores), k, deterministic).unwrap().values[i]
                    },
                    m[i],
                    1e-4 * m[i],
                );
                out.record(gates.dvalue_dm[i], numeric);
            }
        }
    }
    let signed: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    for kind in [MaskKind::Gumbel, MaskKind::Ste] {
        let mask = MaskState::new(kind, MaskTarget::Score, 0.5, k).unwrap();
        let (_, grad) = mask_regularizer(&mask, &signed, Some(&scores));
        for i in 0..n {
            let numeric = derivative(
                |x| {
                    let mut v = signed.clone();
                    v[i] = x;
                    mask_regularizer(&mask, &v, Some(&scores)).0
                },
                signed[i],
                1e-4,
            );
            out.record(grad[i], numeric);
        }
    }
}

/// Runs every check on scenes `0..scenes`.
pub fn gradient_suite(scenes: u64) -> Vec<GradCheck> {
    let mut render = GradCheck::new("render_backward", RENDER_TOL);
    let mut ssim = GradCheck::new("loss_ssim", RENDER_TOL);
    let mut total = GradCheck::new("total_loss", RENDER_TOL);
    let mut gumbel = GradCheck::new("gumbel_sigmoid", MASK_TOL);
    let mut mask = GradCheck::new("mask gates and regularizers", MASK_TOL);
    for k in 0..scenes {
        check_render_backward(k, &mut render);
        check_loss_ssim(k, &mut ssim);
        check_total_loss(k, &mut total);
        check_gumbel_sigmoid(k, &mut gumbel);
        check_mask_ops(k, &mut mask);
    }
    vec![render, ssim, total, gumbel, mask]
}
