//! Reverse pass of the tile rasterizer.
//!
//! Each pixel replays its front-to-back blend, then walks it back to front
//! to get per-splat partials of the composited color. Those 2D partials are
//! reduced over tiles in tile order (thread-count independent) and chained
//! through the projection to the 3D parameters.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::render::RenderOutput;
use crate::scene::{Camera, GaussianScene};

/// Partials for one Gaussian. Rotation is `(w, x, y, z)` on the raw quaternion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrad {
    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }

    fn add_scaled(&mut self, other: &GaussianGrad, s: f64) {
        self.mean += other.mean * s;
        self.log_scale += other.log_scale * s;
        self.rotation += other.rotation * s;
        self.opacity_logit += other.opacity_logit * s;
        self.color += other.color * s;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub grads: Vec<GaussianGrad>,
    /// Partial w.r.t. the projected center, in pixels.
    pub mean2d: Vec<Vector2<f64>>,
}

impl GradientBuffer {
    pub fn zeros(n: usize) -> Self {
        Self { grads: vec![GaussianGrad::default(); n], mean2d: vec![Vector2::zeros(); n] }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add_scaled(&mut self, other: &GradientBuffer, s: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_scaled(b, s);
        }
        for (a, b) in self.mean2d.iter_mut().zip(&other.mean2d) {
            *a += b * s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(GaussianGrad::is_finite) && self.mean2d.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(|g| *g == GaussianGrad::default()) && self.mean2d.iter().all(|v| *v == Vector2::zeros())
    }
}

/// Image-space partials of one splat.
#[derive(Clone, Copy, Debug, Default)]
struct SplatGrad2D {
    color: [f64; 3],
    opacity: f64,
    center: [f64; 2],
    /// w.r.t. conic entries a, b (off-diagonal, counted once), c
    conic: [f64; 3],
}

impl SplatGrad2D {
    fn add(&mut self, o: &SplatGrad2D) {
        for i in 0..3 {
            self.color[i] += o.color[i];
            self.conic[i] += o.conic[i];
        }
        self.opacity += o.opacity;
        self.center[0] += o.center[0];
        self.center[1] += o.center[1];
    }
}

struct Hit {
    pos: usize,
    alpha: f64,
    falloff: f64,
    clamped: bool,
    t: f64,
}

fn backward_tile(fwd: &RenderOutput, tile: usize, upstream: &[f64]) -> Vec<SplatGrad2D> {
    let list = &fwd.bins.lists[tile];
    let mut acc = vec![SplatGrad2D::default(); list.len()];
    if list.is_empty() {
        return acc;
    }
    let (width, height) = (fwd.width(), fwd.height());
    let (x0, y0, x1, y1) = fwd.bins.tile_rect(tile, width, height);
    let settings = &fwd.settings;
    let bg = fwd.background;
    let mut hits: Vec<Hit> = Vec::with_capacity(list.len());
    for y in y0..y1 {
        for x in x0..x1 {
            let p = y * width + x;
            let g = Vector3::new(upstream[p * 3], upstream[p * 3 + 1], upstream[p * 3 + 2]);
            if g == Vector3::zeros() {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            hits.clear();
            let mut t = 1.0;
            for (pos, &si) in list.iter().enumerate() {
                let s = &fwd.splats[si as usize];
                let Some((alpha, falloff, clamped)) = s.alpha_at(px, py, settings) else {
                    continue;
                };
                hits.push(Hit { pos, alpha, falloff, clamped, t });
                t *= 1.0 - alpha;
                if t < settings.transmittance_min {
                    break;
                }
            }
            // suffix: Σ_{m>j} (g·c_m) α_m T_m + T_final (g·bg)
            let mut suffix = t * g.dot(&bg);
            for h in hits.iter().rev() {
                let s = &fwd.splats[list[h.pos] as usize];
                let gc = g.dot(&s.color);
                let w = h.alpha * h.t;
                let d_alpha = h.t * gc - suffix / (1.0 - h.alpha);
                suffix += gc * w;
                let a = &mut acc[h.pos];
                a.color[0] += g.x * w;
                a.color[1] += g.y * w;
                a.color[2] += g.z * w;
                if h.clamped {
                    continue;
                }
                a.opacity += d_alpha * h.falloff;
                let d_q = -0.5 * h.falloff * d_alpha * s.opacity;
                let dx = px - s.center.x;
                let dy = py - s.center.y;
                a.conic[0] += d_q * dx * dx;
                a.conic[1] += d_q * 2.0 * dx * dy;
                a.conic[2] += d_q * dy * dy;
                let (ca, cb, cc) = (s.conic[(0, 0)], s.conic[(0, 1)], s.conic[(1, 1)]);
                a.center[0] += d_q * -2.0 * (ca * dx + cb * dy);
                a.center[1] += d_q * -2.0 * (cb * dx + cc * dy);
            }
        }
    }
    acc
}

/// d R(q̂) / d q̂ contracted with `g_r`, for `q̂ = (w, x, y, z)`.
fn rotation_grad(q: &Vector4<f64>, g_r: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    Vector4::new(
        g_r.component_mul(&dw).sum(),
        g_r.component_mul(&dx).sum(),
        g_r.component_mul(&dy).sum(),
        g_r.component_mul(&dz).sum(),
    )
}

fn chain_to_3d(
    scene: &GaussianScene,
    cam: &Camera,
    s: &crate::render::Splat2D,
    g2: &SplatGrad2D,
) -> (GaussianGrad, Vector2<f64>) {
    let gauss = &scene.gaussians[s.source_index];
    let o = s.opacity;

    // conic = Σ2⁻¹  ⇒  dL/dΣ2 = -A (dL/dA) A
    let g_conic = Matrix2::new(g2.conic[0], 0.5 * g2.conic[1], 0.5 * g2.conic[1], g2.conic[2]);
    let g_cov2 = -(s.conic * g_conic * s.conic);

    // Σ2 = M Σ Mᵀ + low-pass, M = J W
    let m: &Matrix2x3<f64> = &s.jw;
    let g_cov3: Matrix3<f64> = m.transpose() * g_cov2 * m;
    let g_m: Matrix2x3<f64> = 2.0 * g_cov2 * m * s.cov3d;
    let g_j: Matrix2x3<f64> = g_m * cam.rotation.transpose();

    let (x, y, z) = (s.cam_point.x, s.cam_point.y, s.cam_point.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let (z2, z3) = (z * z, z * z * z);
    let mut g_p = Vector3::new(
        g_j[(0, 2)] * (-fx / z2),
        g_j[(1, 2)] * (-fy / z2),
        g_j[(0, 0)] * (-fx / z2)
            + g_j[(0, 2)] * (2.0 * fx * x / z3)
            + g_j[(1, 1)] * (-fy / z2)
            + g_j[(1, 2)] * (2.0 * fy * y / z3),
    );
    let (gu, gv) = (g2.center[0], g2.center[1]);
    g_p.x += gu * fx / z;
    g_p.y += gv * fy / z;
    g_p.z += -gu * fx * x / z2 - gv * fy * y / z2;
    let g_mean = cam.rotation.transpose() * g_p;

    // Σ = (R S)(R S)ᵀ
    let r = gauss.rotation_matrix();
    let scale = gauss.scale();
    let rs = r * Matrix3::from_diagonal(&scale);
    let g_rs = 2.0 * g_cov3 * rs;
    let mut g_log_scale = Vector3::zeros();
    let mut g_r = Matrix3::zeros();
    for i in 0..3 {
        let mut d = 0.0;
        for row in 0..3 {
            d += g_rs[(row, i)] * r[(row, i)];
            g_r[(row, i)] = g_rs[(row, i)] * scale[i];
        }
        g_log_scale[i] = d * scale[i];
    }
    let q = gauss.rotation;
    let norm = q.norm();
    let qn = Vector4::new(q.w, q.i, q.j, q.k) / norm;
    let g_qn = rotation_grad(&qn, &g_r);
    let g_q = (g_qn - qn * qn.dot(&g_qn)) / norm;

    (
        GaussianGrad {
            mean: g_mean,
            log_scale: g_log_scale,
            rotation: g_q,
            opacity_logit: g2.opacity * o * (1.0 - o),
            color: Vector3::from(g2.color),
        },
        Vector2::new(gu, gv),
    )
}

/// Gradient of a scalar loss w.r.t. every Gaussian parameter, given the loss
/// gradient w.r.t. the rendered color (`upstream`, RGB row-major).
pub fn backward(scene: &GaussianScene, cam: &Camera, fwd: &RenderOutput, upstream: &[f64]) -> GradientBuffer {
    assert_eq!(upstream.len(), fwd.width() * fwd.height() * 3, "upstream gradient size");
    let per_tile: Vec<Vec<SplatGrad2D>> =
        (0..fwd.bins.lists.len()).into_par_iter().map(|t| backward_tile(fwd, t, upstream)).collect();

    let mut per_splat = vec![SplatGrad2D::default(); fwd.splats.len()];
    for (t, acc) in per_tile.iter().enumerate() {
        for (pos, g) in acc.iter().enumerate() {
            per_splat[fwd.bins.lists[t][pos] as usize].add(g);
        }
    }

    let chained: Vec<(GaussianGrad, Vector2<f64>)> =
        fwd.splats.par_iter().zip(per_splat.par_iter()).map(|(s, g)| chain_to_3d(scene, cam, s, g)).collect();

    let mut out = GradientBuffer::zeros(scene.len());
    for (s, (g, g2)) in fwd.splats.iter().zip(chained) {
        out.grads[s.source_index] = g;
        out.mean2d[s.source_index] = g2;
    }
    out
}
