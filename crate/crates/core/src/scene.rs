//! Scene representation: the Gaussian cloud, pinhole cameras and images.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::sh;

/// One Gaussian in row form. Used for construction and inspection; the cloud
/// itself is stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub sh: Vec<f64>,
}

/// Trainable parameter groups. Each group is a flat `N x width` array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    LogScale,
    Rotation,
    Opacity,
    Sh,
    Mask,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Position,
        ParamGroup::LogScale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Sh,
        ParamGroup::Mask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "positions",
            ParamGroup::LogScale => "log_scales",
            ParamGroup::Rotation => "rotations",
            ParamGroup::Opacity => "opacity_logits",
            ParamGroup::Sh => "sh_coeffs",
            ParamGroup::Mask => "mask_params",
        }
    }

    pub fn width(self, sh_degree: usize) -> usize {
        match self {
            ParamGroup::Position | ParamGroup::LogScale => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Opacity | ParamGroup::Mask => 1,
            ParamGroup::Sh => 3 * sh::basis_count(sh_degree),
        }
    }
}

/// Column-oriented Gaussian scene.
///
/// Every column holds `N` rows; `sh_coeffs` rows are `(L+1)^2 x 3` blocks in
/// basis-major order. `mask_params` and `scores` ride along so that pruning and
/// densification keep them aligned with the geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    sh_degree: usize,
    pub positions: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    pub mask_params: Vec<f64>,
    pub scores: Vec<f64>,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        assert!(sh_degree <= sh::MAX_DEGREE, "SH degree {sh_degree} > 3");
        Self {
            sh_degree,
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            sh_coeffs: Vec::new(),
            mask_params: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn sh_width(&self) -> usize {
        3 * sh::basis_count(self.sh_degree)
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends a Gaussian. SH blocks shorter than the cloud's degree are
    /// zero-padded; longer ones are truncated.
    pub fn push(&mut self, g: &Gaussian) {
        self.positions.extend_from_slice(&g.position);
        self.log_scales.extend_from_slice(&g.log_scale);
        self.rotations.extend_from_slice(&g.rotation);
        self.opacity_logits.push(g.opacity_logit);
        let w = self.sh_width();
        let n = g.sh.len().min(w);
        self.sh_coeffs.extend_from_slice(&g.sh[..n]);
        self.sh_coeffs.extend(std::iter::repeat_n(0.0, w - n));
        self.mask_params.push(1.0);
        self.scores.push(0.0);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.position(i),
            log_scale: self.log_scale(i),
            rotation: self.rotation(i),
            opacity_logit: self.opacity_logits[i],
            sh: self.sh(i).to_vec(),
        }
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        let p = &self.positions[3 * i..3 * i + 3];
        [p[0], p[1], p[2]]
    }

    pub fn log_scale(&self, i: usize) -> [f64; 3] {
        let s = &self.log_scales[3 * i..3 * i + 3];
        [s[0], s[1], s[2]]
    }

    pub fn rotation(&self, i: usize) -> [f64; 4] {
        let q = &self.rotations[4 * i..4 * i + 4];
        [q[0], q[1], q[2], q[3]]
    }

    pub fn sh(&self, i: usize) -> &[f64] {
        let w = self.sh_width();
        &self.sh_coeffs[w * i..w * (i + 1)]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::Position => &self.positions,
            ParamGroup::LogScale => &self.log_scales,
            ParamGroup::Rotation => &self.rotations,
            ParamGroup::Opacity => &self.opacity_logits,
            ParamGroup::Sh => &self.sh_coeffs,
            ParamGroup::Mask => &self.mask_params,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Vec<f64> {
        match g {
            ParamGroup::Position => &mut self.positions,
            ParamGroup::LogScale => &mut self.log_scales,
            ParamGroup::Rotation => &mut self.rotations,
            ParamGroup::Opacity => &mut self.opacity_logits,
            ParamGroup::Sh => &mut self.sh_coeffs,
            ParamGroup::Mask => &mut self.mask_params,
        }
    }

    /// Checks that all columns agree on `N`.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let w = self.sh_width();
        let checks = [
            ("positions", self.positions.len(), 3 * n),
            ("log_scales", self.log_scales.len(), 3 * n),
            ("rotations", self.rotations.len(), 4 * n),
            ("sh_coeffs", self.sh_coeffs.len(), w * n),
            ("mask_params", self.mask_params.len(), n),
            ("scores", self.scores.len(), n),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has {got} entries, expected {want} for N={n}"
                )));
            }
        }
        Ok(())
    }

    /// Returns the first Gaussian with a non-finite parameter, if any.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        for g in ParamGroup::ALL {
            let w = g.width(self.sh_degree);
            if let Some(pos) = self.group(g).iter().position(|v| !v.is_finite()) {
                return Some((pos / w, g.name()));
            }
        }
        None
    }

    /// Keeps rows where `keep[i]` is true.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let deg = self.sh_degree;
        for g in ParamGroup::ALL {
            let w = g.width(deg);
            retain_rows(self.group_mut(g), w, keep);
        }
        retain_rows(&mut self.scores, 1, keep);
    }

    /// Appends copies of the listed rows (in order) to the end of the cloud.
    pub fn append_rows(&mut self, rows: &[usize]) {
        let deg = self.sh_degree;
        for g in ParamGroup::ALL {
            let w = g.width(deg);
            append_rows(self.group_mut(g), w, rows);
        }
        append_rows(&mut self.scores, 1, rows);
    }

    /// Sum of every parameter, handy as a cheap state fingerprint.
    pub fn checksum(&self) -> f64 {
        ParamGroup::ALL
            .iter()
            .map(|&g| self.group(g).iter().sum::<f64>())
            .sum::<f64>()
            + self.len() as f64
    }
}

pub(crate) fn retain_rows(v: &mut Vec<f64>, width: usize, keep: &[bool]) {
    let mut w = 0;
    for (i, &k) in keep.iter().enumerate() {
        if k {
            if w != i {
                v.copy_within(i * width..(i + 1) * width, w * width);
            }
            w += 1;
        }
    }
    v.truncate(w * width);
}

pub(crate) fn append_rows(v: &mut Vec<f64>, width: usize, rows: &[usize]) {
    v.reserve(rows.len() * width);
    for &r in rows {
        v.extend_from_within(r * width..(r + 1) * width);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Normalizes a quaternion `(w, x, y, z)`.
pub fn normalize_quat(q: [f64; 4]) -> Result<([f64; 4], f64)> {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateRotation);
    }
    Ok(([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm], norm))
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Backpropagates dL/dR through `quat_to_matrix` and the normalization step,
/// returning dL/dq for the raw (unnormalized) quaternion.
pub fn quat_backward(q_unit: [f64; 4], norm: f64, g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q_unit;
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gu = [gw, gx, gy, gz];
    let dot: f64 = (0..4).map(|k| gu[k] * q_unit[k]).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (gu[k] - dot * q_unit[k]) / norm;
    }
    out
}

/// `R diag(s)^2 R^T` with `s = exp(log_scale)` and `R` from the normalized quaternion.
pub fn covariance_3d(log_scale: [f64; 3], rotation: [f64; 4]) -> Result<Matrix3<f64>> {
    let (q, _) = normalize_quat(rotation)?;
    let r = quat_to_matrix(q);
    let s = Vector3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp());
    let m = r * Matrix3::from_diagonal(&s);
    Ok(m * m.transpose())
}

/// Activated parameters of one Gaussian.
#[derive(Clone, Debug)]
pub struct Activated {
    pub sigma: f64,
    pub scale: [f64; 3],
    pub rotation: Matrix3<f64>,
}

pub fn activate_params(cloud: &GaussianCloud, index: usize) -> Result<Activated> {
    if index >= cloud.len() {
        return Err(Error::InvalidArgument(format!(
            "Gaussian index {index} out of range (N={})",
            cloud.len()
        )));
    }
    let ls = cloud.log_scale(index);
    let (q, _) = normalize_quat(cloud.rotation(index))?;
    Ok(Activated {
        sigma: cloud.opacity(index),
        scale: [ls[0].exp(), ls[1].exp(), ls[2].exp()],
        rotation: quat_to_matrix(q),
    })
}

/// Pinhole camera with a rigid world-to-camera transform. Camera space is
/// x right, y down, z forward; pixel centers sit at half-integer coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero image size".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) || (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera(format!(
                "rotation block is not orthonormal (error {err:e})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Unit viewing direction (camera z axis) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }
}

/// Linear RGB image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = 3 * (y * self.width + x);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = 3 * (y * self.width + x);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.data.len() != other.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// 8-bit sRGB-less quantization of the clamped image.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}
