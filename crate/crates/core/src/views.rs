//! Pseudo-view synthesis between adjacent training cameras, and the inverse
//! selection that keeps only the tracked masks of the real training frames.

use nalgebra::{Rotation3, UnitQuaternion};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::render::render;
use crate::scene::{Camera, GaussianScene, Image, LabelMap};

pub const DEFAULT_INSERTS_PER_GAP: usize = 3;

/// A camera in the densified sequence. `original` is `Some(i)` for the i-th input camera.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceCamera {
    pub camera: Camera,
    pub original: Option<usize>,
}

fn same_intrinsics(a: &Camera, b: &Camera) -> bool {
    a.fx == b.fx && a.fy == b.fy && a.cx == b.cx && a.cy == b.cy && a.width == b.width && a.height == b.height
}

/// Slerp (shortest arc) on rotation, linear on translation, intrinsics of `a`.
pub fn interpolate_pose(a: &Camera, b: &Camera, t: f64) -> Result<Camera> {
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return a.with_pose(b.rotation, b.translation);
    }
    let qa = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(a.rotation));
    let mut qb = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(b.rotation));
    if qa.coords.dot(&qb.coords) < 0.0 {
        qb = UnitQuaternion::new_unchecked(-qb.into_inner());
    }
    let q = qa.try_slerp(&qb, t, 1e-12).unwrap_or(qa);
    let translation = a.translation * (1.0 - t) + b.translation * t;
    a.with_pose(q.to_rotation_matrix().into_inner(), translation)
}

/// Inserts `inserts_per_gap` cameras at `t = m / (inserts + 1)` between each
/// consecutive pair. Originals keep their input index.
pub fn interpolate_cameras(cams: &[Camera], inserts_per_gap: usize) -> Result<Vec<SequenceCamera>> {
    if cams.len() < 2 {
        return Err(Error::InvalidInput(format!("need >= 2 cameras, got {}", cams.len())));
    }
    if let Some(i) = cams.iter().position(|c| !same_intrinsics(c, &cams[0])) {
        return Err(Error::InvalidInput(format!("camera {i} has different intrinsics")));
    }
    let mut out = Vec::with_capacity(cams.len() + (cams.len() - 1) * inserts_per_gap);
    for (i, pair) in cams.windows(2).enumerate() {
        out.push(SequenceCamera { camera: pair[0].clone(), original: Some(i) });
        for m in 1..=inserts_per_gap {
            let t = m as f64 / (inserts_per_gap + 1) as f64;
            out.push(SequenceCamera { camera: interpolate_pose(&pair[0], &pair[1], t)?, original: None });
        }
    }
    out.push(SequenceCamera { camera: cams[cams.len() - 1].clone(), original: Some(cams.len() - 1) });
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub camera: Camera,
    pub image: Image,
    pub original: Option<usize>,
}

/// Renders the full densified camera sequence from a (label-free) scene.
pub fn densify_views(scene: &GaussianScene, cams: &[Camera], inserts_per_gap: usize) -> Result<Vec<Frame>> {
    let seq = interpolate_cameras(cams, inserts_per_gap)?;
    Ok(seq
        .into_par_iter()
        .map(|s| Frame { image: render(scene, &s.camera, None).image, camera: s.camera, original: s.original })
        .collect())
}

/// Keeps the tracked label maps at original positions, in order.
pub fn retain_training_masks(tracked: Vec<LabelMap>, original_flags: &[bool]) -> Result<Vec<LabelMap>> {
    if tracked.len() != original_flags.len() {
        return Err(Error::InvalidInput(format!(
            "tracked sequence has {} frames, expected {}",
            tracked.len(),
            original_flags.len()
        )));
    }
    Ok(tracked.into_iter().zip(original_flags).filter_map(|(m, &keep)| keep.then_some(m)).collect())
}
