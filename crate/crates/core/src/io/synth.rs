//! Synthetic labeled scenes with known geometry, for oracle checks and
//! end-to-end runs.
//!
//! Each object is a cluster of small opaque Gaussians carrying one label.
//! Cameras sit on a horizontal arc around the world y axis looking at the
//! origin; training and held-out views are interleaved along the arc.

use std::f64::consts::PI;

use nalgebra::{Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Map;

use crate::error::{Error, Result};
use crate::io::bundle::{BundleView, SceneBundle, Split};
use crate::render::{depth_from_output, render, render_with, RenderOptions, RenderSettings};
use crate::scene::{Camera, Gaussian3D, GaussianScene, Label, LabelMap, Mask, ViewRecord};

/// Depth assigned to uncovered pixels.
pub const FAR_DEPTH: f32 = 1000.0;
/// Accumulated alpha at which a pixel counts as covered by an object.
pub const COVERAGE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub objects: usize,
    pub seed: u64,
    pub train_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Put object 1 in front of object 2 so they overlap along the arc.
    pub occluding: bool,
    pub gaussians_per_object: usize,
    /// Half-angle of the camera arc, radians.
    pub arc: f64,
    pub radius: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            objects: 3,
            seed: 0,
            train_views: 12,
            test_views: 4,
            width: 128,
            height: 128,
            focal: 150.0,
            occluding: true,
            gaussians_per_object: 150,
            arc: 40f64.to_radians(),
            radius: 4.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects == 0 || self.objects > 12 {
            return Err(Error::InvalidInput(format!("objects must be in 1..=12, got {}", self.objects)));
        }
        if self.occluding && self.objects < 2 {
            return Err(Error::InvalidInput("occluding layout needs >= 2 objects".into()));
        }
        if self.train_views + self.test_views < 1 || self.gaussians_per_object == 0 {
            return Err(Error::InvalidInput("need >= 1 view and >= 1 Gaussian per object".into()));
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) || !(self.radius > 0.0) {
            return Err(Error::InvalidInput("invalid image size, focal or radius".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub scene: GaussianScene,
    pub bundle: SceneBundle,
    /// Object centers, index `k - 1` for label `k`.
    pub centers: Vec<Vector3<f64>>,
}

const PALETTE: [[f64; 3]; 12] = [
    [0.85, 0.25, 0.20],
    [0.20, 0.75, 0.30],
    [0.25, 0.35, 0.90],
    [0.90, 0.80, 0.20],
    [0.70, 0.30, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
    [0.55, 0.55, 0.55],
    [0.60, 0.85, 0.45],
    [0.90, 0.45, 0.65],
    [0.40, 0.25, 0.15],
    [0.30, 0.55, 0.95],
];

/// Object centers and ellipsoid semi-axes. Without occlusion objects are
/// spaced along x far enough apart that their silhouettes never touch
/// anywhere on the arc.
fn layout(spec: &SynthSpec) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let k = spec.objects;
    let blob = Vector3::new(0.3, 0.34, 0.26);
    if spec.occluding {
        // 1 is a thin pole in front of 2; parallax sweeps the strip it
        // hides across 2 and off it at both ends of the arc
        let mut c = vec![
            (Vector3::new(0.3, 0.05, 0.35), Vector3::new(0.09, 0.4, 0.09)),
            (Vector3::new(0.3, -0.05, -0.45), blob),
        ];
        // the rest alternate left and right, clear of both
        for i in 2..k {
            let step = 1.2 * (i / 2) as f64;
            let x = if i % 2 == 0 { 0.3 - step } else { 0.3 + step };
            c.push((Vector3::new(x, 0.0, -0.2), blob));
        }
        c
    } else {
        let spacing = 1.2;
        (0..k).map(|i| (Vector3::new((i as f64 - (k - 1) as f64 / 2.0) * spacing, 0.0, 0.0), blob)).collect()
    }
}

fn object_gaussians(
    center: Vector3<f64>,
    radii: Vector3<f64>,
    label: Label,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<Gaussian3D> {
    let base = PALETTE[(label as usize - 1) % PALETTE.len()];
    let mut out = Vec::with_capacity(spec.gaussians_per_object);
    while out.len() < spec.gaussians_per_object {
        let u = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if u.norm_squared() > 1.0 {
            continue;
        }
        let offset = u.component_mul(&radii);
        let shade = 0.9 + 0.1 * (u.y * 0.5 + 0.5);
        let color = Vector3::from_fn(|i, _| (base[i] * shade + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0));
        let rotation = Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let log_scale = Vector3::from_fn(|_, _| rng.gen_range(0.05f64..0.09).ln());
        out.push(Gaussian3D::new(center + offset, log_scale, rotation, 0.95, color).with_label(label));
    }
    out
}

/// Arc cameras; every `(n / test)`-th slot is a held-out view.
pub fn arc_cameras(spec: &SynthSpec) -> Result<Vec<(Camera, Split)>> {
    let n = spec.train_views + spec.test_views;
    let test_every = n.checked_div(spec.test_views).map_or(usize::MAX, |k| k.max(1));
    let mut tests_placed = 0;
    let mut cams = Vec::with_capacity(n);
    for i in 0..n {
        let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
        let theta = -spec.arc + 2.0 * spec.arc * t;
        let eye = Vector3::new(
            spec.radius * theta.sin(),
            0.8 + 0.3 * (3.0 * theta + PI / 4.0).sin(),
            spec.radius * theta.cos(),
        );
        let cam = Camera::look_at(eye, Vector3::zeros(), Vector3::y(), spec.focal, spec.width, spec.height)?;
        let is_test = tests_placed < spec.test_views && i % test_every == test_every / 2;
        if is_test {
            tests_placed += 1;
        }
        cams.push((cam, if is_test { Split::Test } else { Split::Train }));
    }
    // fewer slots matched than requested: take the remaining tests from the end
    let mut i = n;
    while tests_placed < spec.test_views && i > 0 {
        i -= 1;
        if cams[i].1 == Split::Train {
            cams[i].1 = Split::Test;
            tests_placed += 1;
        }
    }
    Ok(cams)
}

/// Label map of the main contributors at covered pixels.
pub fn ground_truth_labels(scene: &GaussianScene, cam: &Camera) -> LabelMap {
    let out = render(scene, cam, None);
    let mut lm = out.labels;
    for (id, &a) in lm.ids.iter_mut().zip(&out.alpha) {
        if a < COVERAGE {
            *id = 0;
        }
    }
    lm
}

/// Coverage mask of the label-`k` Gaussians rendered alone.
pub fn isolated_silhouette(scene: &GaussianScene, cam: &Camera, label: Label) -> Mask {
    let subset = std::collections::BTreeSet::from([label]);
    let out = render(scene, cam, Some(&subset));
    let (w, h) = cam.dims();
    Mask { width: w, height: h, data: out.alpha.iter().map(|&a| a >= COVERAGE).collect() }
}

pub fn make_synthetic_scene(spec: &SynthSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = layout(spec);
    let mut gaussians = Vec::new();
    for (i, (c, r)) in centers.iter().enumerate() {
        gaussians.extend(object_gaussians(*c, *r, i as Label + 1, spec, &mut rng));
    }
    let centers = centers.into_iter().map(|(c, _)| c).collect();
    let scene = GaussianScene::new(gaussians, Vector3::zeros());
    let settings = RenderSettings::default();

    let mut views = Vec::new();
    for (i, (cam, split)) in arc_cameras(spec)?.into_iter().enumerate() {
        let out = render_with(&scene, &cam, &RenderOptions::default(), &settings);
        let mut label_map = out.labels.clone();
        for (id, &a) in label_map.ids.iter_mut().zip(&out.alpha) {
            if a < COVERAGE {
                *id = 0;
            }
        }
        let mut depth = depth_from_output(&out, FAR_DEPTH);
        for (d, &a) in depth.depth.iter_mut().zip(&out.alpha) {
            if a < COVERAGE {
                *d = FAR_DEPTH;
            }
        }
        let image = out.image.quantize_u8();
        let mut view = ViewRecord::new(format!("view_{i:03}"), cam, image, label_map)?;
        view.depth_map = Some(depth);
        views.push(BundleView { view, split, extra: Map::new() });
    }
    let mut bundle = SceneBundle::new(views, scene.background);
    bundle.label_count = spec.objects as Label;
    Ok(SyntheticScene { scene, bundle, centers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occlusion::{analyze, OcclusionSettings};

    fn small(objects: usize, occluding: bool) -> SynthSpec {
        SynthSpec {
            objects,
            occluding,
            width: 64,
            height: 64,
            focal: 75.0,
            train_views: 6,
            test_views: 2,
            gaussians_per_object: 80,
            ..Default::default()
        }
    }

    #[test]
    fn single_object_single_label() {
        let s = make_synthetic_scene(&small(1, false)).unwrap();
        for v in &s.bundle.views {
            let labels = v.view.label_map.labels();
            assert!(labels.iter().all(|&l| l == 1));
            assert!(labels.contains(&1));
        }
    }

    #[test]
    fn separated_objects_have_no_occlusion() {
        let s = make_synthetic_scene(&small(2, false)).unwrap();
        for v in &s.bundle.views {
            let r =
                analyze(&v.view.label_map, v.view.depth_map.as_ref().unwrap(), &OcclusionSettings::default()).unwrap();
            assert!(r.occluders.values().all(|o| o.is_empty()), "view {}", v.view.id);
        }
    }

    #[test]
    fn forced_overlap_matches_construction() {
        let s = make_synthetic_scene(&small(3, true)).unwrap();
        let mut hits = 0;
        for v in &s.bundle.views {
            let r =
                analyze(&v.view.label_map, v.view.depth_map.as_ref().unwrap(), &OcclusionSettings::default()).unwrap();
            if r.occluders.get(&2).is_some_and(|o| o.contains(&1)) {
                hits += 1;
            }
            // object 1 is nearer than object 2 from every camera on the arc
            assert!(!r.occluders.get(&1).is_some_and(|o| o.contains(&2)), "view {}", v.view.id);
        }
        assert!(hits > 0);
    }

    #[test]
    fn split_counts() {
        let spec = small(2, false);
        let s = make_synthetic_scene(&spec).unwrap();
        assert_eq!(s.bundle.train_views().len(), spec.train_views);
        assert_eq!(s.bundle.test_views().len(), spec.test_views);
    }

    #[test]
    fn deterministic() {
        let a = make_synthetic_scene(&small(3, true)).unwrap();
        let b = make_synthetic_scene(&small(3, true)).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.bundle, b.bundle);
    }
}
