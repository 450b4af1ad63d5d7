//! Occlusion analysis from a label map and a depth map.
//!
//! Two masks are adjacent when enough 4-neighbour pixel pairs straddle their
//! shared frontier. The side whose frontier is nearer on average occludes the
//! other. Each mask's unocclusion mask is the complement of the union of its
//! occluders.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::scene::{DepthMap, Label, LabelMap, Mask, ViewRecord, UNLABELED};

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionSettings {
    /// Minimum number of 4-adjacent pixel pairs for two masks to count as adjacent.
    pub min_boundary: usize,
    /// Relative depth margin required before an occlusion edge is recorded.
    pub relative_tolerance: f64,
}

impl Default for OcclusionSettings {
    fn default() -> Self {
        Self { min_boundary: 8, relative_tolerance: 0.0 }
    }
}

/// Shared frontier between two masks, `label_a < label_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyPair {
    pub label_a: Label,
    pub label_b: Label,
    /// Pixels of `a` that touch `b` (row-major indices, ascending).
    pub boundary_a: Vec<usize>,
    pub boundary_b: Vec<usize>,
    pub mean_depth_a: f64,
    pub mean_depth_b: f64,
    /// Number of 4-adjacent (a, b) pixel pairs.
    pub shared_edges: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OcclusionReport {
    /// `O_k`: labels whose masks occlude `k`.
    pub occluders: BTreeMap<Label, BTreeSet<Label>>,
    /// `U_k`: pixels of the view not covered by any occluder of `k`.
    pub unocclusion: BTreeMap<Label, Mask>,
}

#[derive(Default)]
struct Frontier {
    edges: usize,
    a: BTreeSet<usize>,
    b: BTreeSet<usize>,
}

pub fn find_adjacencies(
    labels: &LabelMap,
    depth: &DepthMap,
    settings: &OcclusionSettings,
) -> Result<Vec<AdjacencyPair>> {
    if labels.dims() != depth.dims() {
        return Err(Error::dims("depth map", labels.dims(), depth.dims()));
    }
    let (w, h) = labels.dims();
    let mut frontiers: BTreeMap<(Label, Label), Frontier> = BTreeMap::new();
    let mut visit = |p: usize, q: usize| {
        let (lp, lq) = (labels.ids[p], labels.ids[q]);
        if lp == lq || lp == UNLABELED || lq == UNLABELED {
            return;
        }
        let (a, pa, b, pb) = if lp < lq { (lp, p, lq, q) } else { (lq, q, lp, p) };
        let f = frontiers.entry((a, b)).or_default();
        f.edges += 1;
        f.a.insert(pa);
        f.b.insert(pb);
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                visit(p, p + 1);
            }
            if y + 1 < h {
                visit(p, p + w);
            }
        }
    }
    let mean = |set: &BTreeSet<usize>| set.iter().map(|&p| depth.depth[p] as f64).sum::<f64>() / set.len() as f64;
    Ok(frontiers
        .into_iter()
        .filter(|(_, f)| f.edges >= settings.min_boundary.max(1))
        .map(|((a, b), f)| AdjacencyPair {
            label_a: a,
            label_b: b,
            mean_depth_a: mean(&f.a),
            mean_depth_b: mean(&f.b),
            boundary_a: f.a.into_iter().collect(),
            boundary_b: f.b.into_iter().collect(),
            shared_edges: f.edges,
        })
        .collect())
}

fn nearer(front: f64, back: f64, tolerance: f64) -> bool {
    front < back && (back - front) > tolerance * front.abs().max(back.abs())
}

/// Pairwise occluder sets. Only directly adjacent masks enter `O_k`; equal
/// mean depths record nothing.
pub fn occlusion_lists(pairs: &[AdjacencyPair], settings: &OcclusionSettings) -> OcclusionReport {
    let mut occluders: BTreeMap<Label, BTreeSet<Label>> = BTreeMap::new();
    for p in pairs {
        occluders.entry(p.label_a).or_default();
        occluders.entry(p.label_b).or_default();
        if nearer(p.mean_depth_b, p.mean_depth_a, settings.relative_tolerance) {
            occluders.get_mut(&p.label_a).unwrap().insert(p.label_b);
        } else if nearer(p.mean_depth_a, p.mean_depth_b, settings.relative_tolerance) {
            occluders.get_mut(&p.label_b).unwrap().insert(p.label_a);
        }
    }
    OcclusionReport { occluders, unocclusion: BTreeMap::new() }
}

/// Fill `U_k = ¬(∨_{j ∈ O_k} M_j)` for every label in `masks`.
pub fn unocclusion_masks(mut report: OcclusionReport, masks: &BTreeMap<Label, Mask>) -> Result<OcclusionReport> {
    let Some(first) = masks.values().next() else {
        return Ok(report);
    };
    let (w, h) = first.dims();
    for (k, m) in masks {
        if m.dims() != (w, h) {
            return Err(Error::dims(format!("mask {k}"), (w, h), m.dims()));
        }
    }
    let mut out = BTreeMap::new();
    for &k in masks.keys() {
        let mut covered = Mask::new(w, h, false);
        if let Some(occ) = report.occluders.get(&k) {
            for j in occ {
                if let Some(mj) = masks.get(j) {
                    covered = covered.or(mj);
                }
            }
        }
        out.insert(k, covered.not());
    }
    report.unocclusion = out;
    Ok(report)
}

/// Full analysis of one view's label and depth maps.
pub fn analyze(labels: &LabelMap, depth: &DepthMap, settings: &OcclusionSettings) -> Result<OcclusionReport> {
    let pairs = find_adjacencies(labels, depth, settings)?;
    let report = occlusion_lists(&pairs, settings);
    let masks: BTreeMap<Label, Mask> = labels.labels().into_iter().map(|k| (k, labels.mask_of(k))).collect();
    let mut report = unocclusion_masks(report, &masks)?;
    for k in masks.keys() {
        report.occluders.entry(*k).or_default();
    }
    Ok(report)
}

/// Store unocclusion masks on a view. Views without depth keep all-ones masks.
pub fn annotate_view(view: &mut ViewRecord, settings: &OcclusionSettings) -> Result<Option<OcclusionReport>> {
    let Some(depth) = &view.depth_map else {
        view.unocclusion.clear();
        return Ok(None);
    };
    let report = analyze(&view.label_map, depth, settings)?;
    view.unocclusion = report.unocclusion.clone();
    Ok(Some(report))
}
