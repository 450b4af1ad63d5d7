//! Shared oracles and generators for the integration tests.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet};

use labelgs_core::render::render_with;
use labelgs_core::trainer::GradientBuffer;
use labelgs_core::{
    Camera, DepthMap, Gaussian3D, GaussianScene, Image, Label, LabelMap, Mask, RenderOptions, RenderSettings,
    ViewRecord,
};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;

/// Per-pixel blend of every Gaussian, written without tiles, bins or the
/// crate's projection code.
pub struct NaiveRender {
    pub image: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Index of the Gaussian with the largest `αT`, first on ties.
    pub argmax: Vec<Option<usize>>,
}

struct NaiveSplat {
    index: usize,
    depth: f64,
    u: f64,
    v: f64,
    inv: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
}

fn naive_project(i: usize, g: &Gaussian3D, cam: &Camera, s: &RenderSettings) -> Option<NaiveSplat> {
    let p = cam.rotation * g.mean + cam.translation;
    if p.z <= s.near {
        return None;
    }
    let r = UnitQuaternion::from_quaternion(g.rotation).to_rotation_matrix().into_inner();
    let d = Matrix3::from_diagonal(&g.log_scale.map(|l| l.exp() * l.exp()));
    let sigma = r * d * r.transpose();
    let z2 = p.z * p.z;
    let j = Matrix2x3::new(cam.fx / p.z, 0.0, -cam.fx * p.x / z2, 0.0, cam.fy / p.z, -cam.fy * p.y / z2);
    let m = j * cam.rotation;
    let mut cov = m * sigma * m.transpose();
    cov = (cov + cov.transpose()) / 2.0;
    cov += Matrix2::identity() * s.low_pass;
    let inv = cov.try_inverse()?;
    if !(cov.determinant() > 0.0) {
        return None;
    }
    Some(NaiveSplat {
        index: i,
        depth: p.z,
        u: cam.fx * p.x / p.z + cam.cx,
        v: cam.fy * p.y / p.z + cam.cy,
        inv,
        opacity: 1.0 / (1.0 + (-g.opacity_logit).exp()),
        color: g.color,
    })
}

pub fn naive_render(
    scene: &GaussianScene,
    cam: &Camera,
    subset: Option<&BTreeSet<Label>>,
    background: Vector3<f64>,
) -> NaiveRender {
    let s = RenderSettings::default();
    let mut splats: Vec<NaiveSplat> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter(|(_, g)| subset.is_none_or(|set| set.contains(&g.label)))
        .filter_map(|(i, g)| naive_project(i, g, cam, &s))
        .collect();
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    let (w, h) = cam.dims();
    let mut out = NaiveRender { image: vec![0.0; w * h * 3], alpha: vec![0.0; w * h], argmax: vec![None; w * h] };
    let limit = s.extent_sigma * s.extent_sigma;
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = Vector3::zeros();
            let mut best = 0.0;
            for sp in &splats {
                let d = nalgebra::Vector2::new(px - sp.u, py - sp.v);
                let q = (d.transpose() * sp.inv * d)[0];
                if q > limit || q < 0.0 {
                    continue;
                }
                let a = (sp.opacity * (-0.5 * q).exp()).min(s.alpha_max);
                if a < s.alpha_min {
                    continue;
                }
                c += sp.color * a * t;
                if a * t > best {
                    best = a * t;
                    out.argmax[y * w + x] = Some(sp.index);
                }
                t *= 1.0 - a;
                if t < s.transmittance_min {
                    break;
                }
            }
            let p = y * w + x;
            for ch in 0..3 {
                out.image[p * 3 + ch] = c[ch] + t * background[ch];
            }
            out.alpha[p] = 1.0 - t;
        }
    }
    out
}

fn random_quat<R: Rng>(rng: &mut R) -> Quaternion<f64> {
    loop {
        let q = Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if q.norm() > 0.2 {
            return q.normalize();
        }
    }
}

pub fn random_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi))
}

/// Camera at the origin looking down +z.
pub fn axis_camera(focal: f64, w: usize, h: usize) -> Camera {
    Camera::new(focal, focal, w as f64 / 2.0, h as f64 / 2.0, w, h, Matrix3::identity(), Vector3::zeros()).unwrap()
}

/// Unconstrained scene: up to `max_n` Gaussians anywhere in front of (and a
/// few behind) a random-size camera, with arbitrary opacities including
/// clamped ones.
pub fn random_scene<R: Rng>(rng: &mut R, max_n: usize, max_dim: usize) -> (GaussianScene, Camera) {
    let w = rng.gen_range(1..=max_dim);
    let h = rng.gen_range(1..=max_dim);
    let focal = rng.gen_range(0.5..1.5) * max_dim as f64;
    let cam = Camera::new(
        focal,
        focal * rng.gen_range(0.8..1.2),
        w as f64 * rng.gen_range(0.3..0.7),
        h as f64 * rng.gen_range(0.3..0.7),
        w,
        h,
        UnitQuaternion::from_euler_angles(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-3.0..3.0))
            .to_rotation_matrix()
            .into_inner(),
        Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)),
    )
    .unwrap();
    let n = rng.gen_range(0..=max_n);
    let gaussians = (0..n)
        .map(|_| {
            let z: f64 = rng.gen_range(-0.5..6.0);
            let mean_cam = Vector3::new(rng.gen_range(-1.0..1.0) * z.abs(), rng.gen_range(-1.0..1.0) * z.abs(), z);
            let mean = cam.rotation.transpose() * (mean_cam - cam.translation);
            let mut g = Gaussian3D::new(
                mean,
                Vector3::new(rng.gen_range(-4.0..-0.5), rng.gen_range(-4.0..-0.5), rng.gen_range(-4.0..-0.5)),
                random_quat(rng),
                rng.gen_range(0.01..1.0),
                random_color(rng, 0.0, 1.0),
            );
            g.label = rng.gen_range(0..4);
            g
        })
        .collect();
    let scene = GaussianScene::new(gaussians, random_color(rng, 0.0, 1.0));
    (scene, cam)
}

/// Five Gaussians, wide enough that every pixel of a 16×16 image lies well
/// inside every support ellipse with alpha far from both clamps, so the
/// render is a smooth function of every parameter.
pub fn smooth_scene<R: Rng>(rng: &mut R) -> (GaussianScene, Camera) {
    let focal = 20.0;
    let cam = axis_camera(focal, 16, 16);
    let mut depths: Vec<f64> = Vec::new();
    while depths.len() < 5 {
        let z = rng.gen_range(3.0..5.0);
        if depths.iter().all(|d: &f64| (d - z).abs() > 0.08) {
            depths.push(z);
        }
    }
    let gaussians = depths
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let sigma_px = rng.gen_range(8.0..11.0);
            let sigma = sigma_px * z / focal;
            let mean = Vector3::new(rng.gen_range(-1.5..1.5) * z / focal, rng.gen_range(-1.5..1.5) * z / focal, z);
            let log_scale = Vector3::from_fn(|_, _| sigma.ln() + rng.gen_range(-0.2..0.2));
            let mut g = Gaussian3D::new(
                mean,
                log_scale,
                random_quat(rng),
                rng.gen_range(0.2..0.8),
                random_color(rng, 0.1, 0.9),
            );
            g.label = (i % 2) as Label + 1;
            g
        })
        .collect();
    let scene = GaussianScene::new(gaussians, random_color(rng, 0.1, 0.9));
    (scene, cam)
}

/// Margins of a smooth-scene render: (max q over splat/pixel pairs, min
/// alpha, min final transmittance).
pub fn smooth_margins(scene: &GaussianScene, cam: &Camera) -> (f64, f64, f64) {
    let out = labelgs_core::render(scene, cam, None);
    let mut max_q: f64 = 0.0;
    let mut min_a: f64 = 1.0;
    for s in &out.splats {
        for y in 0..cam.height {
            for x in 0..cam.width {
                let dx = x as f64 + 0.5 - s.center.x;
                let dy = y as f64 + 0.5 - s.center.y;
                let q = s.conic[(0, 0)] * dx * dx + 2.0 * s.conic[(0, 1)] * dx * dy + s.conic[(1, 1)] * dy * dy;
                max_q = max_q.max(q);
                min_a = min_a.min(s.opacity * (-0.5 * q).exp());
            }
        }
    }
    let min_t = out.transmittance.iter().copied().fold(1.0, f64::min);
    (max_q, min_a, min_t)
}

/// Target that sits at least `0.05` away from `img` in every channel, on
/// the side that stays inside `[0, 1]`.
pub fn offset_target<R: Rng>(rng: &mut R, img: &Image) -> Image {
    let mut t = img.clone();
    for v in t.data.iter_mut() {
        let d = rng.gen_range(0.05..0.2);
        *v = if *v > 0.5 { *v - d } else { *v + d };
    }
    t
}

pub const PARAM_NAMES: [&str; 14] = [
    "mean.x",
    "mean.y",
    "mean.z",
    "log_scale.x",
    "log_scale.y",
    "log_scale.z",
    "rot.w",
    "rot.x",
    "rot.y",
    "rot.z",
    "opacity_logit",
    "color.r",
    "color.g",
    "color.b",
];

pub fn param_mut(g: &mut Gaussian3D, k: usize) -> &mut f64 {
    match k {
        0 => &mut g.mean.x,
        1 => &mut g.mean.y,
        2 => &mut g.mean.z,
        3 => &mut g.log_scale.x,
        4 => &mut g.log_scale.y,
        5 => &mut g.log_scale.z,
        6 => &mut g.rotation.w,
        7 => &mut g.rotation.i,
        8 => &mut g.rotation.j,
        9 => &mut g.rotation.k,
        10 => &mut g.opacity_logit,
        11 => &mut g.color.x,
        12 => &mut g.color.y,
        13 => &mut g.color.z,
        _ => unreachable!(),
    }
}

pub fn grad_of(buf: &GradientBuffer, i: usize, k: usize) -> f64 {
    let g = &buf.grads[i];
    match k {
        0..=2 => g.mean[k],
        3..=5 => g.log_scale[k - 3],
        6..=9 => g.rotation[k - 6],
        10 => g.opacity_logit,
        11..=13 => g.color[k - 11],
        _ => unreachable!(),
    }
}

#[derive(Debug)]
pub struct Mismatch {
    pub gaussian: usize,
    pub param: &'static str,
    pub analytic: f64,
    pub numeric: f64,
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL: f64 = 1e-3;
pub const FD_ABS: f64 = 1e-6;

pub fn agrees(a: f64, n: f64) -> bool {
    let err = (a - n).abs();
    err <= FD_REL * a.abs().max(n.abs()) || err <= FD_ABS
}

/// Central differences of `loss` for every parameter of every Gaussian.
pub fn finite_difference_check(
    scene: &GaussianScene,
    analytic: &GradientBuffer,
    loss: impl Fn(&GaussianScene) -> f64,
) -> (usize, Vec<Mismatch>) {
    let mut bad = Vec::new();
    let mut checked = 0;
    for i in 0..scene.len() {
        for (k, name) in PARAM_NAMES.iter().enumerate() {
            let mut plus = scene.clone();
            *param_mut(&mut plus.gaussians[i], k) += FD_STEP;
            let mut minus = scene.clone();
            *param_mut(&mut minus.gaussians[i], k) -= FD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            let a = grad_of(analytic, i, k);
            checked += 1;
            if !agrees(a, numeric) {
                bad.push(Mismatch { gaussian: i, param: name, analytic: a, numeric });
            }
        }
    }
    (checked, bad)
}

/// Label map of random axis-aligned blocks over labels `0..=max_label`,
/// later blocks painted over earlier ones.
pub fn blocky_labels<R: Rng>(rng: &mut R, w: usize, h: usize, max_label: Label) -> LabelMap {
    let mut lm = LabelMap::new(w, h);
    for _ in 0..rng.gen_range(1..6) {
        let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
        let (x1, y1) = (rng.gen_range(x0..w) + 1, rng.gen_range(y0..h) + 1);
        let id = rng.gen_range(0..=max_label);
        for y in y0..y1 {
            for x in x0..x1 {
                lm.set(x, y, id);
            }
        }
    }
    lm
}

/// Nearest pixel under the projected mean, computed directly from the pose.
pub fn center_pixel(g: &Gaussian3D, cam: &Camera) -> Option<(usize, usize)> {
    let p = cam.rotation * g.mean + cam.translation;
    if p.z <= 0.0 {
        return None;
    }
    let u = (cam.fx * p.x / p.z + cam.cx).floor();
    let v = (cam.fy * p.y / p.z + cam.cy).floor();
    if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
        return None;
    }
    Some((u as usize, v as usize))
}

/// One opaque Gaussian stretched along x over a label map split at a random
/// column: label 1 on the left, 2 on the right. The center projects into the
/// label-1 side within one long-axis sigma of the frontier, so its footprint
/// reaches label-2 pixels with weight above 0.6.
pub fn two_region_view<R: Rng>(rng: &mut R) -> (GaussianScene, ViewRecord) {
    let (w, h) = (32, 24);
    let focal = 30.0;
    let cam = axis_camera(focal, w, h);
    let split = rng.gen_range(10..22);
    let z = rng.gen_range(3.0..6.0);
    let sigma_px = rng.gen_range(5.0..9.0);
    let u = split as f64 - rng.gen_range(0.2..0.6) * sigma_px;
    let v = rng.gen_range(8.0..16.0);
    let mean = Vector3::new((u - cam.cx) * z / focal, (v - cam.cy) * z / focal, z);
    let long = sigma_px * z / focal;
    let short = rng.gen_range(0.8..1.5) * z / focal;
    let tilt = UnitQuaternion::from_euler_angles(0.0, 0.0, rng.gen_range(-0.15..0.15));
    let g = Gaussian3D::new(
        mean,
        Vector3::new(long.ln(), short.ln(), short.ln()),
        *tilt.quaternion(),
        0.99,
        random_color(rng, 0.2, 0.8),
    );
    let scene = GaussianScene::new(vec![g], Vector3::zeros());
    let mut lm = LabelMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            lm.set(x, y, if x < split { 1 } else { 2 });
        }
    }
    let image = labelgs_core::render(&scene, &cam, None).image;
    let view = ViewRecord::new("two-region", cam, image, lm).unwrap();
    (scene, view)
}

/// Randomized layered raster: up to five labelled rectangles at distinct
/// depths, painted back to front, on a far unlabeled background.
pub struct LayeredScene {
    pub labels: LabelMap,
    pub depth: DepthMap,
    /// Depth of each label's layer.
    pub layer_depth: BTreeMap<Label, f64>,
}

pub fn layered_scene<R: Rng>(rng: &mut R) -> LayeredScene {
    let (w, h) = (rng.gen_range(16..48), rng.gen_range(16..48));
    let n = rng.gen_range(2..=5);
    // distinct layer depths at least 0.5 apart; per-pixel noise stays below 0.1
    let mut order: Vec<Label> = (1..=n).collect();
    order.sort_by_key(|_| rng.gen::<u32>());
    let layer_depth: BTreeMap<Label, f64> = order.iter().enumerate().map(|(i, &k)| (k, 1.0 + i as f64 * 0.7)).collect();
    let mut labels = LabelMap::new(w, h);
    let mut depth = vec![100.0f32; w * h];
    let mut back_to_front: Vec<Label> = order.clone();
    back_to_front.reverse();
    for k in back_to_front {
        let (x0, y0) = (rng.gen_range(0..w - 4), rng.gen_range(0..h - 4));
        let (x1, y1) = (rng.gen_range(x0 + 4..=w), rng.gen_range(y0 + 4..=h));
        for y in y0..y1 {
            for x in x0..x1 {
                labels.set(x, y, k);
                depth[y * w + x] = (layer_depth[&k] + rng.gen_range(-0.1..0.1)) as f32;
            }
        }
    }
    LayeredScene { labels, depth: DepthMap::new(w, h, depth).unwrap(), layer_depth }
}

/// 4-adjacent pixel pairs between labels `a` and `b`, counted from `a`'s side
/// over all four directions.
pub fn shared_edges(labels: &LabelMap, a: Label, b: Label) -> usize {
    let (w, h) = labels.dims();
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if labels.get(x, y) != a {
                continue;
            }
            let nbrs = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
            n += nbrs.iter().filter(|&&(u, v)| u < w && v < h && labels.get(u, v) == b).count();
        }
    }
    n
}

/// Expected occluder sets: nearer layers sharing at least `min_boundary`
/// edges with the visible part of each label.
pub fn expected_occluders(scene: &LayeredScene, min_boundary: usize) -> BTreeMap<Label, BTreeSet<Label>> {
    let visible = scene.labels.labels();
    let mut out = BTreeMap::new();
    for &k in visible.iter().filter(|&&k| k != 0) {
        let occ = visible
            .iter()
            .filter(|&&j| j != 0 && j != k)
            .filter(|&&j| scene.layer_depth[&j] < scene.layer_depth[&k])
            .filter(|&&j| shared_edges(&scene.labels, k, j) >= min_boundary)
            .copied()
            .collect();
        out.insert(k, occ);
    }
    out
}

/// Split-label view whose image sits `>= 0.05` away from each label's
/// isolated render inside its mask, with random unocclusion masks.
pub fn label_view<R: Rng>(rng: &mut R, scene: &GaussianScene, cam: &Camera) -> ViewRecord {
    let (w, h) = cam.dims();
    let mut lm = LabelMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            lm.set(x, y, if x < w / 2 { 1 } else { 2 });
        }
    }
    let mut img = Image::new(w, h);
    for k in [1u32, 2] {
        let sub = BTreeSet::from([k]);
        let iso = render_with(
            scene,
            cam,
            &RenderOptions { subset: Some(&sub), background: Some(Vector3::zeros()) },
            &Default::default(),
        );
        let target = offset_target(rng, &iso.image);
        for p in 0..w * h {
            if lm.ids[p] == k {
                img.data[p * 3..p * 3 + 3].copy_from_slice(&target.data[p * 3..p * 3 + 3]);
            }
        }
    }
    let mut v = ViewRecord::new("g", cam.clone(), img, lm).unwrap();
    for k in [1u32, 2] {
        let mut m = Mask::new(w, h, true);
        for b in m.data.iter_mut() {
            *b = rng.gen_bool(0.8);
        }
        v.unocclusion.insert(k, m);
    }
    v
}
