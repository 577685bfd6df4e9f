//! Real spherical-harmonics basis up to degree 3 and view-dependent color.
//!
//! Coefficients follow the usual splatting layout: row `b` of a Gaussian's
//! block holds the RGB weights of basis function `b`, and an offset of 0.5 is
//! added after the weighted sum.

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 3;
pub const MAX_BASIS: usize = 16;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of basis functions for a given degree, `(L+1)^2`.
pub const fn basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Recovers the degree from a coefficient count (`3 * (L+1)^2`).
pub fn degree_for_coeffs(n_coeffs: usize) -> Result<usize> {
    if n_coeffs % 3 == 0 {
        let basis = n_coeffs / 3;
        for degree in 0..=MAX_DEGREE {
            if basis_count(degree) == basis {
                return Ok(degree);
            }
        }
    }
    Err(Error::MalformedSh(n_coeffs))
}

/// Evaluates the basis at a unit direction. Entries past `basis_count(degree)`
/// are left at zero.
pub fn basis(dir: [f64; 3], degree: usize) -> [f64; MAX_BASIS] {
    let [x, y, z] = dir;
    let mut out = [0.0; MAX_BASIS];
    out[0] = SH_C0;
    if degree == 0 {
        return out;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if degree == 1 {
        return out;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = SH_C2[0] * xy;
    out[5] = SH_C2[1] * yz;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * xz;
    out[8] = SH_C2[4] * (xx - yy);
    if degree == 2 {
        return out;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * xy * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    out
}

/// Partial derivatives of each basis function wrt the (x, y, z) components of
/// the direction, treating them as independent variables.
pub fn basis_grad(dir: [f64; 3], degree: usize) -> [[f64; 3]; MAX_BASIS] {
    let [x, y, z] = dir;
    let mut g = [[0.0; 3]; MAX_BASIS];
    if degree == 0 {
        return g;
    }
    g[1] = [0.0, -SH_C1, 0.0];
    g[2] = [0.0, 0.0, SH_C1];
    g[3] = [-SH_C1, 0.0, 0.0];
    if degree == 1 {
        return g;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    g[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
    g[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
    g[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
    g[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
    g[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    if degree == 2 {
        return g;
    }
    g[9] = [
        SH_C3[0] * 6.0 * x * y,
        SH_C3[0] * (3.0 * xx - 3.0 * yy),
        0.0,
    ];
    g[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
    g[11] = [
        -SH_C3[2] * 2.0 * x * y,
        SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
        SH_C3[2] * 8.0 * y * z,
    ];
    g[12] = [
        -SH_C3[3] * 6.0 * x * z,
        -SH_C3[3] * 6.0 * y * z,
        SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    g[13] = [
        SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
        -SH_C3[4] * 2.0 * x * y,
        SH_C3[4] * 8.0 * x * z,
    ];
    g[14] = [
        SH_C3[5] * 2.0 * x * z,
        -SH_C3[5] * 2.0 * y * z,
        SH_C3[5] * (xx - yy),
    ];
    g[15] = [
        SH_C3[6] * (3.0 * xx - 3.0 * yy),
        -SH_C3[6] * 6.0 * x * y,
        0.0,
    ];
    g
}

/// Evaluates the unclamped color `sum_b c_b Y_b(dir) + 0.5`.
///
/// `coeffs` is a row-major `basis x 3` block. `degree` may be lower than the
/// block's own degree, in which case the higher bands are ignored.
pub fn eval_sh(coeffs: &[f64], dir: [f64; 3], degree: usize) -> Result<[f64; 3]> {
    let block_degree = degree_for_coeffs(coeffs.len())?;
    if degree > block_degree {
        return Err(Error::InvalidArgument(format!(
            "SH degree {degree} exceeds block degree {block_degree}"
        )));
    }
    Ok(eval_unchecked(coeffs, dir, degree))
}

pub(crate) fn eval_unchecked(coeffs: &[f64], dir: [f64; 3], degree: usize) -> [f64; 3] {
    let y = basis(dir, degree);
    let mut rgb = [0.5; 3];
    for (b, yb) in y.iter().enumerate().take(basis_count(degree)) {
        for (c, v) in rgb.iter_mut().enumerate() {
            *v += coeffs[b * 3 + c] * yb;
        }
    }
    rgb
}

/// Clamps a color to be non-negative, reporting which channels were clamped.
pub fn clamp_color(rgb: [f64; 3]) -> ([f64; 3], [bool; 3]) {
    let mut out = rgb;
    let mut clamped = [false; 3];
    for c in 0..3 {
        if rgb[c] < 0.0 {
            out[c] = 0.0;
            clamped[c] = true;
        }
    }
    (out, clamped)
}

/// Backward pass of [`eval_sh`]: given dL/drgb, accumulates dL/dcoeffs into
/// `coeff_grad` and returns dL/ddir (wrt the unit direction components).
pub fn eval_sh_backward(
    coeffs: &[f64],
    dir: [f64; 3],
    degree: usize,
    grad_rgb: [f64; 3],
    coeff_grad: &mut [f64],
) -> [f64; 3] {
    let n = basis_count(degree);
    let y = basis(dir, degree);
    for b in 0..n {
        for c in 0..3 {
            coeff_grad[b * 3 + c] += y[b] * grad_rgb[c];
        }
    }
    let dy = basis_grad(dir, degree);
    let mut grad_dir = [0.0; 3];
    for b in 1..n {
        let w: f64 = (0..3).map(|c| coeffs[b * 3 + c] * grad_rgb[c]).sum();
        for k in 0..3 {
            grad_dir[k] += w * dy[b][k];
        }
    }
    grad_dir
}
