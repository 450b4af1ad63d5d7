//! Scene, camera and raster types shared by every stage of the pipeline.
//!
//! Label `0` is reserved for unlabeled Gaussians and background pixels;
//! object labels run from `1..=label_count`.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Quaternion, Vector3};

/// Object label. `0` means unlabeled / background.
pub type Label = u32;

pub const UNLABELED: Label = 0;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
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

/// One splatting primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    /// Per-axis log standard deviation.
    pub log_scale: Vector3<f64>,
    /// Unit quaternion; re-normalized after every optimizer step.
    pub rotation: Quaternion<f64>,
    pub opacity_logit: f64,
    /// Degree-0 RGB in `[0, 1]`.
    pub color: Vector3<f64>,
    pub label: Label,
}

impl Gaussian3D {
    pub fn new(
        mean: Vector3<f64>,
        log_scale: Vector3<f64>,
        rotation: Quaternion<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        let mut g = Self {
            mean,
            log_scale,
            rotation,
            opacity_logit: logit(opacity.clamp(1e-12, 1.0 - 1e-12)),
            color,
            label: UNLABELED,
        };
        g.normalize_rotation();
        g
    }

    /// Isotropic Gaussian with identity rotation.
    pub fn isotropic(mean: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self::new(mean, Vector3::repeat(sigma.ln()), Quaternion::identity(), opacity, color)
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.norm();
        if n > 0.0 && n.is_finite() {
            self.rotation /= n;
        } else {
            self.rotation = Quaternion::identity();
        }
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_of(self)
    }
}

/// `R · diag(exp(2 · log_scale)) · Rᵀ`.
pub fn covariance_of(g: &Gaussian3D) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let s2 = Matrix3::from_diagonal(&g.log_scale.map(|s| (2.0 * s).exp()));
    let cov = r * s2 * r.transpose();
    // exact symmetry
    (cov + cov.transpose()) * 0.5
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian3D>,
    pub background: Vector3<f64>,
    /// Number of object labels; every Gaussian label lies in `0..=label_count`.
    pub label_count: Label,
}

impl Default for GaussianScene {
    fn default() -> Self {
        Self { gaussians: Vec::new(), background: Vector3::zeros(), label_count: 0 }
    }
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian3D>, background: Vector3<f64>) -> Self {
        let label_count = gaussians.iter().map(|g| g.label).max().unwrap_or(0);
        Self { gaussians, background, label_count }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Indices of Gaussians per label (`H(G, k)`), with the unlabeled set under key `0`.
    pub fn partition(&self) -> BTreeMap<Label, Vec<usize>> {
        let mut parts: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (i, g) in self.gaussians.iter().enumerate() {
            parts.entry(g.label).or_default().push(i);
        }
        parts
    }

    pub fn labels_present(&self) -> BTreeSet<Label> {
        self.gaussians.iter().map(|g| g.label).filter(|&l| l != UNLABELED).collect()
    }

    pub fn labeled_fraction(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 0.0;
        }
        let n = self.gaussians.iter().filter(|g| g.label != UNLABELED).count();
        n as f64 / self.gaussians.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.label > self.label_count {
                return Err(Error::InvalidInput(format!(
                    "gaussian {i} has label {} > label_count {}",
                    g.label, self.label_count
                )));
            }
            let finite = g.mean.iter().all(|v| v.is_finite())
                && g.log_scale.iter().all(|v| v.is_finite())
                && g.rotation.coords.iter().all(|v| v.is_finite())
                && g.opacity_logit.is_finite()
                && g.color.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidInput(format!("gaussian {i} has non-finite parameters")));
            }
        }
        Ok(())
    }
}

/// Pinhole camera with a world-to-camera rigid pose. Camera space is
/// x right, y down, z forward.
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
        let cam = Self { fx, fy, cx, cy, width, height, rotation, translation };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, world `up` mapped to image up.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height, rotation, translation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("width and height must be >= 1".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidCamera("focal lengths must be positive and finite".into()));
        }
        let r = &self.rotation;
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::InvalidCamera(format!("rotation not orthonormal (err {err:e})")));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera("rotation determinant must be +1".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("translation not finite".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a world point; pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.
    /// `None` when the point lies behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let c = self.world_to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }

    /// Copy with the same intrinsics and a new pose.
    pub fn with_pose(&self, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Self::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, rotation, translation)
    }
}

/// Row-major RGB image with channel values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
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
            return Err(Error::InvalidInput(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Multiply every pixel by a binary mask (zero where the mask is off).
    pub fn masked(&self, mask: &Mask) -> Image {
        let mut out = self.clone();
        for (p, &on) in mask.data.iter().enumerate() {
            if !on {
                out.data[p * 3..p * 3 + 3].fill(0.0);
            }
        }
        out
    }

    /// Round every channel to the nearest multiple of 1/255.
    pub fn quantize_u8(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
        }
    }
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn not(&self) -> Mask {
        Mask { width: self.width, height: self.height, data: self.data.iter().map(|b| !b).collect() }
    }
}

/// Per-pixel object IDs for one view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<Label>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, ids: vec![UNLABELED; width * height] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> Label {
        self.ids[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: Label) {
        self.ids[y * self.width + x] = id;
    }

    pub fn mask_of(&self, label: Label) -> Mask {
        Mask { width: self.width, height: self.height, data: self.ids.iter().map(|&l| l == label).collect() }
    }

    /// Nonzero labels occurring in the map, ascending.
    pub fn labels(&self) -> BTreeSet<Label> {
        self.ids.iter().copied().filter(|&l| l != UNLABELED).collect()
    }

    pub fn max_label(&self) -> Label {
        self.ids.iter().copied().max().unwrap_or(0)
    }
}

/// Per-pixel depth; smaller values are nearer the camera.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f32>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "depth buffer has {} values, expected {}",
                depth.len(),
                width * height
            )));
        }
        if let Some(i) = depth.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidInput(format!("depth at pixel {i} is {} (must be finite and >= 0)", depth[i])));
        }
        Ok(Self { width, height, depth })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.depth[y * self.width + x]
    }

    /// Convert a disparity-style map (larger = nearer) to depth ordering.
    pub fn from_disparity(width: usize, height: usize, disparity: &[f32]) -> Result<Self> {
        let depth = disparity.iter().map(|&d| if d > 0.0 { 1.0 / d } else { f32::MAX }).collect();
        Self::new(width, height, depth)
    }
}

/// One training or test view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub id: String,
    pub camera: Camera,
    pub image: Image,
    pub label_map: LabelMap,
    pub depth_map: Option<DepthMap>,
    /// Unocclusion mask per label; a missing entry means "all ones".
    pub unocclusion: BTreeMap<Label, Mask>,
}

impl ViewRecord {
    pub fn new(id: impl Into<String>, camera: Camera, image: Image, label_map: LabelMap) -> Result<Self> {
        let v = Self { id: id.into(), camera, image, label_map, depth_map: None, unocclusion: BTreeMap::new() };
        v.validate()?;
        Ok(v)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.camera.dims()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if self.image.dims() != dims {
            return Err(Error::dims(format!("view {} image", self.id), dims, self.image.dims()));
        }
        if self.label_map.dims() != dims {
            return Err(Error::dims(format!("view {} label map", self.id), dims, self.label_map.dims()));
        }
        if let Some(d) = &self.depth_map {
            if d.dims() != dims {
                return Err(Error::dims(format!("view {} depth map", self.id), dims, d.dims()));
            }
        }
        for (k, m) in &self.unocclusion {
            if m.dims() != dims {
                return Err(Error::dims(format!("view {} unocclusion mask {k}", self.id), dims, m.dims()));
            }
        }
        Ok(())
    }

    /// `U_k` for this view, all-ones when none was computed.
    pub fn unocclusion_mask(&self, label: Label) -> Mask {
        self.unocclusion.get(&label).cloned().unwrap_or_else(|| Mask::new(self.camera.width, self.camera.height, true))
    }
}
