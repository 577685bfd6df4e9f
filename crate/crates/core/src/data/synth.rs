//! Synthetic scenes, camera rigs and rendered datasets.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::render::{render_image, RenderSettings};
use crate::scene::{logit, sigmoid, Camera, Gaussian, GaussianCloud, Image};
use crate::sh::SH_C0;

/// Parameters of a random Gaussian scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub n_gaussians: usize,
    /// Positions are uniform in `[-half_extent, half_extent]^3`.
    pub half_extent: f64,
    /// Per-axis scales are log-uniform in this range.
    pub scale_range: (f64, f64),
    pub opacity_range: (f64, f64),
    pub sh_degree: usize,
    /// Base colors are uniform per channel in this range.
    pub color_range: (f64, f64),
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_gaussians: 250,
            half_extent: 1.0,
            scale_range: (0.05, 0.2),
            opacity_range: (0.6, 0.95),
            sh_degree: 0,
            color_range: (0.05, 0.95),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_gaussians >= 1
            && self.half_extent.is_finite()
            && self.half_extent > 0.0
            && self.scale_range.0 > 0.0
            && self.scale_range.0 <= self.scale_range.1
            && self.opacity_range.0 > 0.0
            && self.opacity_range.0 <= self.opacity_range.1
            && self.opacity_range.1 < 1.0
            && self.color_range.0 <= self.color_range.1
            && self.sh_degree <= crate::sh::MAX_DEGREE;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid scene spec {self:?}")))
        }
    }
}

fn unit_quaternion<R: Rng>(rng: &mut R) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return q.map(|v| v / n);
        }
    }
}

/// Random cloud following `spec`; a pure function of the spec.
pub fn make_synthetic_cloud(spec: &SceneSpec) -> Result<GaussianCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cloud = GaussianCloud::new(spec.sh_degree);
    let (ls0, ls1) = (spec.scale_range.0.ln(), spec.scale_range.1.ln());
    for _ in 0..spec.n_gaussians {
        let position = std::array::from_fn(|_| rng.random_range(-spec.half_extent..=spec.half_extent));
        let log_scale = std::array::from_fn(|_| rng.random_range(ls0..=ls1));
        let rotation = unit_quaternion(&mut rng);
        let opacity = rng.random_range(spec.opacity_range.0..=spec.opacity_range.1);
        let color: [f64; 3] =
            std::array::from_fn(|_| rng.random_range(spec.color_range.0..=spec.color_range.1));
        let sh = color.iter().map(|c| (c - 0.5) / SH_C0).collect();
        cloud.push(&Gaussian {
            position,
            log_scale,
            rotation,
            opacity_logit: logit(opacity),
            sh,
        });
    }
    Ok(cloud)
}

/// Replaces every Gaussian by `copies` near-identical copies.
///
/// Copies are offset by `jitter * max_scale` times a standard normal vector
/// and share an opacity `1 - (1 - sigma)^(1/copies)`, so a stack of copies
/// composites to roughly the original opacity. Copies of Gaussian `i` occupy
/// rows `i * copies .. (i + 1) * copies`.
pub fn duplicate_with_jitter(
    cloud: &GaussianCloud,
    copies: usize,
    jitter: f64,
    seed: u64,
) -> Result<GaussianCloud> {
    if copies == 0 {
        return Err(Error::InvalidArgument("copies must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GaussianCloud::new(cloud.sh_degree());
    for i in 0..cloud.len() {
        let g = cloud.get(i);
        let sigma = sigmoid(g.opacity_logit);
        let sigma_copy = 1.0 - (1.0 - sigma).powf(1.0 / copies as f64);
        let max_scale = g.log_scale.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
        for _ in 0..copies {
            let mut c = g.clone();
            if copies > 1 {
                c.opacity_logit = logit(sigma_copy);
            }
            if jitter != 0.0 {
                for p in &mut c.position {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *p += jitter * max_scale * z;
                }
            }
            out.push(&c);
        }
    }
    Ok(out)
}

/// World-to-camera pose for a camera at `eye` looking at `target`, with image
/// x to the right and image y pointing down.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let forward = target - eye;
    if forward.norm() == 0.0 {
        return Err(Error::InvalidCamera("eye coincides with target".into()));
    }
    let forward = forward.normalize();
    let right = forward.cross(&up);
    if right.norm() < 1e-9 {
        return Err(Error::InvalidCamera("view direction parallel to up vector".into()));
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * eye);
    Ok((rotation, translation))
}

/// A ring (or several elevation rings) of cameras around a point.
#[derive(Clone, Debug, PartialEq)]
pub struct OrbitSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    /// Camera `k` uses elevation `elevations_deg[k % len]`.
    pub elevations_deg: Vec<f64>,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            center: [0.0; 3],
            radius: 4.0,
            count: 24,
            width: 64,
            height: 64,
            fov_deg: 50.0,
            elevations_deg: vec![15.0, 40.0],
        }
    }
}

/// Cameras at azimuths `360 * k / count` degrees around the world z axis,
/// all looking at `center`.
pub fn orbit_cameras(spec: &OrbitSpec) -> Result<Vec<Camera>> {
    if spec.count == 0 {
        return Err(Error::InvalidArgument("orbit needs at least one camera".into()));
    }
    if !(spec.radius > 0.0) || !(spec.fov_deg > 0.0 && spec.fov_deg < 180.0) {
        return Err(Error::InvalidArgument(format!("invalid orbit {spec:?}")));
    }
    let elevations = if spec.elevations_deg.is_empty() {
        vec![0.0]
    } else {
        spec.elevations_deg.clone()
    };
    let center = Vector3::from(spec.center);
    let f = 0.5 * spec.width as f64 / (0.5 * spec.fov_deg.to_radians()).tan();
    (0..spec.count)
        .map(|k| {
            let az = std::f64::consts::TAU * k as f64 / spec.count as f64;
            let el = elevations[k % elevations.len()].to_radians();
            let eye = center
                + spec.radius * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let (rotation, translation) = look_at(eye, center, Vector3::z())?;
            Camera::new(
                f,
                f,
                0.5 * spec.width as f64,
                0.5 * spec.height as f64,
                spec.width,
                spec.height,
                rotation,
                translation,
            )
        })
        .collect()
}

/// A camera with its ground-truth image.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// Position in the original camera list.
    pub index: usize,
    pub camera: Camera,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub ground_truth: Option<GaussianCloud>,
    pub seed: u64,
}

impl Dataset {
    pub fn train_cameras(&self) -> Vec<&Camera> {
        self.train.iter().map(|v| &v.camera).collect()
    }

    /// Radius of the bounding sphere of the training camera centers.
    pub fn scene_extent(&self) -> f64 {
        scene_extent(self.train.iter().map(|v| &v.camera))
    }
}

/// Radius of the sphere around the mean camera center that contains every
/// camera center, with the 3DGS 10% margin.
pub fn scene_extent<'a>(cameras: impl Iterator<Item = &'a Camera> + Clone) -> f64 {
    let centers: Vec<Vector3<f64>> = cameras.map(|c| c.center()).collect();
    if centers.is_empty() {
        return 1.0;
    }
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Renders every camera; camera `k` goes to the test split when
/// `k % holdout_every == 0`.
pub fn render_dataset(
    cloud: &GaussianCloud,
    cameras: &[Camera],
    holdout_every: usize,
    settings: &RenderSettings,
    seed: u64,
) -> Result<Dataset> {
    if cameras.len() < 2 {
        return Err(Error::InvalidArgument("a dataset needs at least two cameras".into()));
    }
    if holdout_every == 0 {
        return Err(Error::InvalidArgument("holdout_every must be at least 1".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (index, camera) in cameras.iter().enumerate() {
        let (image, _) = render_image(cloud, camera, settings, None)?;
        let view = View {
            index,
            camera: camera.clone(),
            image,
        };
        if index % holdout_every == 0 {
            test.push(view);
        } else {
            train.push(view);
        }
    }
    Ok(Dataset {
        train,
        test,
        ground_truth: Some(cloud.clone()),
        seed,
    })
}

/// The redundancy benchmark: a random ground-truth scene rendered from an
/// orbit rig, and a training initialization that holds every ground-truth
/// Gaussian several times over.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub scene: SceneSpec,
    pub copies: usize,
    /// Copy offsets in units of each Gaussian's largest scale.
    pub jitter: f64,
    pub orbit: OrbitSpec,
    pub holdout_every: usize,
}

impl BenchmarkSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            scene: SceneSpec {
                seed,
                ..Default::default()
            },
            copies: 4,
            jitter: 0.5,
            orbit: OrbitSpec::default(),
            holdout_every: 8,
        }
    }
}

/// Builds the benchmark dataset and its duplicated initial cloud.
pub fn redundancy_benchmark(spec: &BenchmarkSpec, settings: &RenderSettings) -> Result<(Dataset, GaussianCloud)> {
    let gt = make_synthetic_cloud(&spec.scene)?;
    let cameras = orbit_cameras(&spec.orbit)?;
    let dataset = render_dataset(&gt, &cameras, spec.holdout_every, settings, spec.scene.seed)?;
    let init = duplicate_with_jitter(&gt, spec.copies, spec.jitter, spec.scene.seed.wrapping_add(1))?;
    Ok((dataset, init))
}
