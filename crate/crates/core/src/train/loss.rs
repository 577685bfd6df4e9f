//! Photometric losses and the combined training objective.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated at every fully
//! covered position (no padding), per channel, then averaged.

use crate::error::{Error, Result};
use crate::scene::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean absolute error and its gradient wrt `rendered`.
pub fn loss_l1(rendered: &Image, gt: &Image) -> Result<(f64, Image)> {
    rendered.same_shape(gt)?;
    let n = rendered.data.len() as f64;
    let mut grad = Image::new(rendered.width, rendered.height);
    let mut sum = 0.0;
    for (k, (&a, &b)) in rendered.data.iter().zip(&gt.data).enumerate() {
        let d = a - b;
        sum += d.abs();
        grad.data[k] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

fn window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (j, &kj) in k.iter().enumerate() {
            let src_row = &tmp[(y + j) * ow..(y + j + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += kj * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `ow x oh` map back to `w x h`.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        let src = &g[y * ow..(y + 1) * ow];
        for (j, &kj) in k.iter().enumerate() {
            let dst = &mut tmp[(y + j) * ow..(y + j + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kj * s;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &mut out[y * w..(y + 1) * w];
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (j, &kj) in k.iter().enumerate() {
                row[x + j] += kj * v;
            }
        }
    }
    out
}

fn check_ssim_shapes(a: &Image, b: &Image) -> Result<()> {
    a.same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    Ok(())
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM of `a` against `b`, optionally with its gradient wrt `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_ssim_shapes(a, b)?;
    let (w, h) = (a.width, a.height);
    let k = window();
    let count = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW) * 3) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = filter_valid(&x, w, h, &k);
        let mu_y = filter_valid(&y, w, h, &k);
        let e_xx = filter_valid(&xx, w, h, &k);
        let e_yy = filter_valid(&yy, w, h, &k);
        let e_xy = filter_valid(&xy, w, h, &k);
        let m = mu_x.len();
        let (mut g_mu, mut g_xx, mut g_xy) = if want_grad {
            (vec![0.0; m], vec![0.0; m], vec![0.0; m])
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        for i in 0..m {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = e_xx[i] - mx * mx;
            let var_y = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = var_x + var_y + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let bb = b1 * b2;
                g_mu[i] = (2.0 * my * a2 - 2.0 * my * a1) / bb - s * (2.0 * mx / b1 - 2.0 * mx / b2);
                g_xx[i] = -s / b2;
                g_xy[i] = 2.0 * a1 / bb;
            }
        }
        if let Some(g) = grad.as_mut() {
            let d_mu = filter_valid_adjoint(&g_mu, w, h, &k);
            let d_xx = filter_valid_adjoint(&g_xx, w, h, &k);
            let d_xy = filter_valid_adjoint(&g_xy, w, h, &k);
            for p in 0..w * h {
                // Loss is 1 - mean(S).
                g.data[3 * p + c] = -(d_mu[p] + 2.0 * x[p] * d_xx[p] + y[p] * d_xy[p]) / count;
            }
        }
    }
    Ok((total / count, grad))
}

/// Mean windowed SSIM in `[-1, 1]`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// `1 - SSIM(rendered, gt)` and its gradient wrt `rendered`.
pub fn loss_ssim(rendered: &Image, gt: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(rendered, gt, true)?;
    Ok((1.0 - s, g.expect("gradient requested")))
}

/// Value and gradient of the mask sparsity term.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPenalty {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub l1: f64,
    /// `1 - SSIM`, or 0 when the SSIM term is disabled.
    pub ssim_loss: f64,
    pub mask: f64,
    pub d_image: Image,
    /// Gradient of the weighted mask term wrt the mask parameters.
    pub d_mask: Vec<f64>,
}

/// `(1 - lambda_ssim) * L1 + lambda_ssim * (1 - SSIM) + lambda_m * R_mask`.
pub fn total_loss(
    rendered: &Image,
    gt: &Image,
    lambda_ssim: f64,
    lambda_m: f64,
    mask: Option<&MaskPenalty>,
) -> Result<LossOutput> {
    let (l1, g1) = loss_l1(rendered, gt)?;
    let mut d_image = g1;
    d_image.data.iter_mut().for_each(|v| *v *= 1.0 - lambda_ssim);
    let mut ssim_loss = 0.0;
    if lambda_ssim != 0.0 {
        let (ls, gs) = loss_ssim(rendered, gt)?;
        ssim_loss = ls;
        for (d, g) in d_image.data.iter_mut().zip(&gs.data) {
            *d += lambda_ssim * g;
        }
    }
    let (mask_value, d_mask) = match mask {
        Some(p) => (p.value, p.grad.iter().map(|g| lambda_m * g).collect()),
        None => (0.0, Vec::new()),
    };
    Ok(LossOutput {
        total: (1.0 - lambda_ssim) * l1 + lambda_ssim * ssim_loss + lambda_m * mask_value,
        l1,
        ssim_loss,
        mask: mask_value,
        d_image,
        d_mask,
    })
}
