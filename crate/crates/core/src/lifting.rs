//! Lifting 2D pixel labels onto 3D Gaussians, and label-based extraction.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::render::{render, RenderOutput};
use crate::scene::{Camera, GaussianScene, Label, LabelMap, Mask, ViewRecord, UNLABELED};

/// Contribution threshold on `αT` for a pixel to label its main Gaussian.
pub const DEFAULT_CONTRIBUTION_THRESHOLD: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVote {
    pub gaussian_index: usize,
    pub proposed_label: Label,
    /// The `αT` that made this Gaussian the pixel's main contributor.
    pub weight: f64,
    pub view_id: usize,
}

/// Render the view and collect one vote per qualifying pixel.
pub fn lift_view(
    scene: &GaussianScene,
    view: &ViewRecord,
    view_id: usize,
    threshold: f64,
    gpf_enabled: bool,
) -> Result<Vec<LabelVote>> {
    if view.label_map.dims() != view.camera.dims() {
        return Err(Error::dims("label map", view.camera.dims(), view.label_map.dims()));
    }
    let out = render(scene, &view.camera, None);
    Ok(votes_from_render(&out, &view.label_map, view_id, threshold, gpf_enabled))
}

/// Votes from an existing full render of the view.
///
/// A pixel votes when it carries a nonzero label and its main contributor's
/// weight exceeds `threshold`. With the projection filter on, the pixel under
/// the contributor's projected center must carry the same label; centers
/// outside the image reject the vote.
pub fn votes_from_render(
    out: &RenderOutput,
    labels: &LabelMap,
    view_id: usize,
    threshold: f64,
    gpf_enabled: bool,
) -> Vec<LabelVote> {
    let cb = &out.contributions;
    let mut votes = Vec::new();
    for (p, &label) in labels.ids.iter().enumerate() {
        if label == UNLABELED {
            continue;
        }
        let Some(g) = cb.best_index[p] else {
            continue;
        };
        let w = cb.best_weight[p];
        if !(w > threshold) {
            continue;
        }
        if gpf_enabled {
            match cb.best_center_pixel[p] {
                Some((cx, cy)) if labels.get(cx, cy) == label => {}
                _ => continue,
            }
        }
        votes.push(LabelVote { gaussian_index: g, proposed_label: label, weight: w, view_id });
    }
    votes
}

/// Heaviest vote per Gaussian; equal weights go to the lower label.
fn heaviest(votes: &[LabelVote]) -> BTreeMap<usize, (f64, Label)> {
    let mut best: BTreeMap<usize, (f64, Label)> = BTreeMap::new();
    for v in votes.iter().filter(|v| v.proposed_label != UNLABELED) {
        let e = best.entry(v.gaussian_index).or_insert((v.weight, v.proposed_label));
        if v.weight > e.0 || (v.weight == e.0 && v.proposed_label < e.1) {
            *e = (v.weight, v.proposed_label);
        }
    }
    best
}

/// Assign each voted Gaussian the label of its heaviest vote. Gaussians
/// without votes keep their label. Returns the number of labels changed.
pub fn commit_votes(scene: &mut GaussianScene, votes: &[LabelVote]) -> Result<usize> {
    let best = heaviest(votes);
    check_indices(scene, &best)?;
    let mut changed = 0;
    for (g, (_, label)) in best {
        let gauss = &mut scene.gaussians[g];
        if gauss.label != label {
            gauss.label = label;
            changed += 1;
        }
        scene.label_count = scene.label_count.max(label);
    }
    Ok(changed)
}

/// Like [`commit_votes`], but a vote only replaces a label committed earlier
/// when it is strictly heavier than the weight stored in `ledger`.
pub fn commit_votes_weighted(scene: &mut GaussianScene, votes: &[LabelVote], ledger: &mut [f64]) -> Result<usize> {
    if ledger.len() != scene.len() {
        return Err(Error::InvalidInput(format!("ledger has {} entries for {} gaussians", ledger.len(), scene.len())));
    }
    let best = heaviest(votes);
    check_indices(scene, &best)?;
    let mut changed = 0;
    for (g, (w, label)) in best {
        if w > ledger[g] {
            ledger[g] = w;
            let gauss = &mut scene.gaussians[g];
            if gauss.label != label {
                gauss.label = label;
                changed += 1;
            }
            scene.label_count = scene.label_count.max(label);
        }
    }
    Ok(changed)
}

fn check_indices(scene: &GaussianScene, best: &BTreeMap<usize, (f64, Label)>) -> Result<()> {
    if let Some((&g, _)) = best.iter().next_back() {
        if g >= scene.len() {
            return Err(Error::InvalidInput(format!("vote references gaussian {g} but scene has {}", scene.len())));
        }
    }
    Ok(())
}

/// `H(G, l)`: the Gaussians whose label is in `labels`, in scene order.
pub fn extract(scene: &GaussianScene, labels: &BTreeSet<Label>) -> GaussianScene {
    GaussianScene {
        gaussians: scene.gaussians.iter().filter(|g| labels.contains(&g.label)).cloned().collect(),
        background: scene.background,
        label_count: scene.label_count,
    }
}

/// Nonzero labels of the rendered label map inside `region`, with pixel counts.
pub fn pick_labels(scene: &GaussianScene, cam: &Camera, region: &Mask) -> Result<BTreeMap<Label, usize>> {
    if region.dims() != cam.dims() {
        return Err(Error::dims("pick region", cam.dims(), region.dims()));
    }
    if region.is_empty() {
        return Ok(BTreeMap::new());
    }
    let labels = render(scene, cam, None).labels;
    Ok(count_labels(&labels, region))
}

pub fn count_labels(labels: &LabelMap, region: &Mask) -> BTreeMap<Label, usize> {
    let mut counts = BTreeMap::new();
    for (&l, &on) in labels.ids.iter().zip(&region.data) {
        if on && l != UNLABELED {
            *counts.entry(l).or_insert(0) += 1;
        }
    }
    counts
}

/// Drop labels covering less than `fraction` of the picked pixels.
pub fn drop_stragglers(counts: &BTreeMap<Label, usize>, fraction: f64) -> BTreeSet<Label> {
    let total: usize = counts.values().sum();
    counts.iter().filter(|(_, &c)| c as f64 >= fraction * total as f64).map(|(&l, _)| l).collect()
}

/// Rasterize a polygon (pixel coordinates) with the even-odd rule, sampling
/// pixel centers.
pub fn polygon_mask(width: usize, height: usize, polygon: &[(f64, f64)]) -> Mask {
    let mut mask = Mask::new(width, height, false);
    if polygon.len() < 3 {
        return mask;
    }
    for y in 0..height {
        let py = y as f64 + 0.5;
        for x in 0..width {
            let px = x as f64 + 0.5;
            let mut inside = false;
            let mut j = polygon.len() - 1;
            for i in 0..polygon.len() {
                let (xi, yi) = polygon[i];
                let (xj, yj) = polygon[j];
                if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            if inside {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Mask with the listed pixels set; out-of-range pixels are ignored.
pub fn pixel_list_mask(width: usize, height: usize, pixels: &[(usize, usize)]) -> Mask {
    let mut mask = Mask::new(width, height, false);
    for &(x, y) in pixels {
        if x < width && y < height {
            mask.set(x, y, true);
        }
    }
    mask
}
