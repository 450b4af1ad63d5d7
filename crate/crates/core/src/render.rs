//! Tile-based EWA splatting with front-to-back alpha compositing.
//!
//! Each visible Gaussian is linearized into a 2D splat, splats are sorted by
//! camera depth (ties by scene index) and binned into tiles by the bounding
//! box of their 3σ ellipse. A splat contributes to a pixel only inside that
//! ellipse, so per-pixel results do not depend on the tiling.

use std::collections::BTreeSet;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::scene::{covariance_of, Camera, DepthMap, GaussianScene, Image, Label, LabelMap};

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    pub alpha_max: f64,
    pub alpha_min: f64,
    /// Blending stops once transmittance falls below this.
    pub transmittance_min: f64,
    /// Added to the diagonal of every 2D covariance.
    pub low_pass: f64,
    pub near: f64,
    /// Splat support radius in standard deviations.
    pub extent_sigma: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            low_pass: 0.3,
            near: 0.01,
            extent_sigma: 3.0,
        }
    }
}

/// A Gaussian linearized into image space.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub source_index: usize,
    /// Pixel coordinates of the projected mean.
    pub center: Vector2<f64>,
    /// 2D covariance including the low-pass term, pixel².
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub label: Label,
    /// Camera-space mean.
    pub cam_point: Vector3<f64>,
    /// Perspective Jacobian times world-to-camera rotation.
    pub jw: Matrix2x3<f64>,
    pub cov3d: Matrix3<f64>,
    /// Half-width and half-height of the support bounding box, pixels.
    pub extent: Vector2<f64>,
}

impl Splat2D {
    /// Opacity-free falloff `exp(-½ dᵀ Σ⁻¹ d)` at a pixel center, or `None`
    /// outside the support ellipse.
    #[inline]
    pub fn falloff(&self, px: f64, py: f64, settings: &RenderSettings) -> Option<f64> {
        let dx = px - self.center.x;
        let dy = py - self.center.y;
        let q = self.conic[(0, 0)] * dx * dx + 2.0 * self.conic[(0, 1)] * dx * dy + self.conic[(1, 1)] * dy * dy;
        let limit = settings.extent_sigma * settings.extent_sigma;
        if !(0.0..=limit).contains(&q) {
            return None;
        }
        Some((-0.5 * q).exp())
    }

    /// Blending alpha at a pixel after clamping; `None` when skipped.
    /// The flag reports whether the upper clamp was active.
    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64, settings: &RenderSettings) -> Option<(f64, f64, bool)> {
        let g = self.falloff(px, py, settings)?;
        let raw = self.opacity * g;
        let clamped = raw > settings.alpha_max;
        let alpha = if clamped { settings.alpha_max } else { raw };
        if alpha < settings.alpha_min {
            return None;
        }
        Some((alpha, g, clamped))
    }
}

/// Linearize every visible Gaussian. Gaussians at or behind the near plane,
/// or whose 2D covariance is degenerate, are dropped.
pub fn project(scene: &GaussianScene, cam: &Camera) -> Vec<Splat2D> {
    project_with(scene, cam, &RenderSettings::default(), None).0
}

pub(crate) fn project_with(
    scene: &GaussianScene,
    cam: &Camera,
    settings: &RenderSettings,
    subset: Option<&BTreeSet<Label>>,
) -> (Vec<Splat2D>, usize) {
    let mut culled = 0;
    let mut splats = Vec::with_capacity(scene.len());
    for (i, g) in scene.gaussians.iter().enumerate() {
        if let Some(set) = subset {
            if !set.contains(&g.label) {
                continue;
            }
        }
        match project_one(i, g, cam, settings) {
            Some(s) => splats.push(s),
            None => culled += 1,
        }
    }
    (splats, culled)
}

fn project_one(index: usize, g: &crate::scene::Gaussian3D, cam: &Camera, settings: &RenderSettings) -> Option<Splat2D> {
    let p = cam.world_to_camera(&g.mean);
    if !(p.z > settings.near) {
        return None;
    }
    let (x, y, z) = (p.x, p.y, p.z);
    let j = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z));
    let jw = j * cam.rotation;
    let cov3d = covariance_of(g);
    let mut cov2d = jw * cov3d * jw.transpose();
    cov2d = (cov2d + cov2d.transpose()) * 0.5;
    cov2d[(0, 0)] += settings.low_pass;
    cov2d[(1, 1)] += settings.low_pass;
    let det = cov2d.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let center = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
    // Bounding box of the ellipse dᵀΣ⁻¹d ≤ k² is ±k·sqrt(Σ_ii) per axis.
    let extent =
        Vector2::new(settings.extent_sigma * cov2d[(0, 0)].sqrt(), settings.extent_sigma * cov2d[(1, 1)].sqrt());
    if !center.iter().chain(extent.iter()).all(|v| v.is_finite()) {
        return None;
    }
    Some(Splat2D {
        source_index: index,
        center,
        cov2d,
        conic,
        depth: z,
        color: g.color,
        opacity: g.opacity(),
        label: g.label,
        cam_point: p,
        jw,
        cov3d,
        extent,
    })
}

/// Sort front to back; equal depths keep ascending scene order.
pub(crate) fn sort_splats(splats: &mut [Splat2D]) {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_index.cmp(&b.source_index)));
}

/// Per-tile lists of splat indices (into the sorted splat list), front to back.
#[derive(Clone, Debug)]
pub struct TileBins {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileBins {
    pub fn build(splats: &[Splat2D], width: usize, height: usize, tile_size: usize) -> Self {
        let tiles_x = width.div_ceil(tile_size);
        let tiles_y = height.div_ceil(tile_size);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (si, s) in splats.iter().enumerate() {
            // pixel centers sit at i + 0.5; widen by one pixel so rounding
            // never drops a covered pixel
            let x0 = (s.center.x - s.extent.x - 0.5).floor() - 1.0;
            let x1 = (s.center.x + s.extent.x - 0.5).ceil() + 1.0;
            let y0 = (s.center.y - s.extent.y - 0.5).floor() - 1.0;
            let y1 = (s.center.y + s.extent.y - 0.5).ceil() + 1.0;
            if x1 < 0.0 || y1 < 0.0 || x0 >= width as f64 || y0 >= height as f64 {
                continue;
            }
            let px0 = x0.max(0.0) as usize;
            let py0 = y0.max(0.0) as usize;
            let px1 = (x1 as usize).min(width - 1);
            let py1 = (y1 as usize).min(height - 1);
            for ty in py0 / tile_size..=py1 / tile_size {
                for tx in px0 / tile_size..=px1 / tile_size {
                    lists[ty * tiles_x + tx].push(si as u32);
                }
            }
        }
        Self { tile_size, tiles_x, tiles_y, lists }
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` (exclusive ends) of a tile.
    pub fn tile_rect(&self, tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, y0, (x0 + self.tile_size).min(width), (y0 + self.tile_size).min(height))
    }
}

/// Per-pixel record of the Gaussian with the largest blending weight `αT`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionBuffer {
    pub width: usize,
    pub height: usize,
    /// Scene index of the main contributor.
    pub best_index: Vec<Option<usize>>,
    pub best_weight: Vec<f64>,
    /// Nearest pixel to the main contributor's projected center, when it
    /// falls inside the image.
    pub best_center_pixel: Vec<Option<(usize, usize)>>,
}

impl ContributionBuffer {
    pub fn center_ok(&self, pixel: usize) -> bool {
        self.best_center_pixel[pixel].is_some()
    }
}

/// Which Gaussians to draw and over what background.
#[derive(Clone, Debug, Default)]
pub struct RenderOptions<'a> {
    /// Restrict to Gaussians whose label is in the set.
    pub subset: Option<&'a BTreeSet<Label>>,
    /// Overrides the scene background.
    pub background: Option<Vector3<f64>>,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    /// Accumulated alpha `1 - T_final` per pixel.
    pub alpha: Vec<f64>,
    /// Label of the main contributor per pixel (0 where nothing contributes).
    pub labels: LabelMap,
    pub contributions: ContributionBuffer,
    /// Σ z·αT per pixel.
    pub depth_sum: Vec<f64>,
    /// Final transmittance per pixel.
    pub transmittance: Vec<f64>,
    /// Sorted splats, front to back.
    pub splats: Vec<Splat2D>,
    pub bins: TileBins,
    pub background: Vector3<f64>,
    pub settings: RenderSettings,
    pub culled: usize,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

struct TilePixels {
    color: Vec<[f64; 3]>,
    transmittance: Vec<f64>,
    depth_sum: Vec<f64>,
    best: Vec<Option<u32>>,
    best_weight: Vec<f64>,
}

pub fn render(scene: &GaussianScene, cam: &Camera, subset: Option<&BTreeSet<Label>>) -> RenderOutput {
    render_with(scene, cam, &RenderOptions { subset, background: None }, &RenderSettings::default())
}

pub fn render_with(
    scene: &GaussianScene,
    cam: &Camera,
    options: &RenderOptions<'_>,
    settings: &RenderSettings,
) -> RenderOutput {
    let (width, height) = cam.dims();
    let (mut splats, culled) = project_with(scene, cam, settings, options.subset);
    sort_splats(&mut splats);
    let bins = TileBins::build(&splats, width, height, settings.tile_size.max(1));
    let background = options.background.unwrap_or(scene.background);

    let tiles: Vec<TilePixels> = (0..bins.lists.len())
        .into_par_iter()
        .map(|t| render_tile(&splats, &bins, t, width, height, settings))
        .collect();

    let npix = width * height;
    let mut image = Image::new(width, height);
    let mut alpha = vec![0.0; npix];
    let mut transmittance = vec![1.0; npix];
    let mut depth_sum = vec![0.0; npix];
    let mut labels = LabelMap::new(width, height);
    let mut contributions = ContributionBuffer {
        width,
        height,
        best_index: vec![None; npix],
        best_weight: vec![0.0; npix],
        best_center_pixel: vec![None; npix],
    };

    for (t, tile) in tiles.into_iter().enumerate() {
        let (x0, y0, x1, y1) = bins.tile_rect(t, width, height);
        let tw = x1 - x0;
        for y in y0..y1 {
            for x in x0..x1 {
                let l = (y - y0) * tw + (x - x0);
                let p = y * width + x;
                let tr = tile.transmittance[l];
                let c = tile.color[l];
                for ch in 0..3 {
                    image.data[p * 3 + ch] = c[ch] + tr * background[ch];
                }
                alpha[p] = 1.0 - tr;
                transmittance[p] = tr;
                depth_sum[p] = tile.depth_sum[l];
                if let Some(si) = tile.best[l] {
                    let s = &splats[si as usize];
                    labels.ids[p] = s.label;
                    contributions.best_index[p] = Some(s.source_index);
                    contributions.best_weight[p] = tile.best_weight[l];
                    contributions.best_center_pixel[p] = nearest_pixel(s.center, width, height);
                }
            }
        }
    }

    RenderOutput {
        image,
        alpha,
        labels,
        contributions,
        depth_sum,
        transmittance,
        splats,
        bins,
        background,
        settings: settings.clone(),
        culled,
    }
}

/// Pixel containing a continuous image point, if inside the image.
pub fn nearest_pixel(p: Vector2<f64>, width: usize, height: usize) -> Option<(usize, usize)> {
    let x = p.x.floor();
    let y = p.y.floor();
    if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
        Some((x as usize, y as usize))
    } else {
        None
    }
}

fn render_tile(
    splats: &[Splat2D],
    bins: &TileBins,
    tile: usize,
    width: usize,
    height: usize,
    settings: &RenderSettings,
) -> TilePixels {
    let (x0, y0, x1, y1) = bins.tile_rect(tile, width, height);
    let n = (x1 - x0) * (y1 - y0);
    let mut out = TilePixels {
        color: vec![[0.0; 3]; n],
        transmittance: vec![1.0; n],
        depth_sum: vec![0.0; n],
        best: vec![None; n],
        best_weight: vec![0.0; n],
    };
    let list = &bins.lists[tile];
    if list.is_empty() {
        return out;
    }
    let tw = x1 - x0;
    for y in y0..y1 {
        for x in x0..x1 {
            let l = (y - y0) * tw + (x - x0);
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut dsum = 0.0;
            let mut best = None;
            let mut best_w = 0.0;
            for &si in list {
                let s = &splats[si as usize];
                let Some((a, _, _)) = s.alpha_at(px, py, settings) else {
                    continue;
                };
                let w = a * t;
                c[0] += s.color.x * w;
                c[1] += s.color.y * w;
                c[2] += s.color.z * w;
                dsum += s.depth * w;
                if w > best_w {
                    best_w = w;
                    best = Some(si);
                }
                t *= 1.0 - a;
                if t < settings.transmittance_min {
                    break;
                }
            }
            out.color[l] = c;
            out.transmittance[l] = t;
            out.depth_sum[l] = dsum;
            out.best[l] = best;
            out.best_weight[l] = best_w;
        }
    }
    out
}

/// Alpha-weighted expected depth `Σ zαT / Σ αT`; pixels with accumulated
/// alpha below `1e-3` receive `far`.
pub fn render_depth(scene: &GaussianScene, cam: &Camera, far: f32) -> DepthMap {
    let out = render(scene, cam, None);
    depth_from_output(&out, far)
}

pub fn depth_from_output(out: &RenderOutput, far: f32) -> DepthMap {
    let depth =
        out.alpha.iter().zip(&out.depth_sum).map(|(&a, &d)| if a < 1e-3 { far } else { (d / a) as f32 }).collect();
    DepthMap { width: out.width(), height: out.height(), depth }
}

/// Label map of the main contributors, for convenience.
pub fn render_labels(scene: &GaussianScene, cam: &Camera) -> LabelMap {
    render(scene, cam, None).labels
}
