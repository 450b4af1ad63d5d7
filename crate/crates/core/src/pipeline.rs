//! End-to-end steps shared by the command line and the test suites:
//! view preparation, scene seeding, training and object-level evaluation.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::metrics::{miou, pooled_psnr, squared_error};
use crate::io::synth::{COVERAGE, FAR_DEPTH};
use crate::lifting::extract;
use crate::occlusion::{annotate_view, OcclusionSettings};
use crate::render::{render, render_with, RenderOptions, RenderSettings};
use crate::scene::{GaussianScene, Label, Mask, ViewRecord};
use crate::trainer::{seed_from_depth, train_with_progress, MetricRecord, TrainConfig, TrainResult};

#[derive(Clone, Debug, PartialEq)]
pub struct SeedConfig {
    /// Number of depth-seeded Gaussians to start training from.
    pub points: usize,
    pub opacity: f64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { points: 1000, opacity: 0.9 }
    }
}

/// Computes unocclusion masks for views that have depth but no masks yet.
pub fn prepare_views(views: &mut [ViewRecord], settings: &OcclusionSettings) -> Result<()> {
    views.par_iter_mut().try_for_each(|v| {
        if v.unocclusion.is_empty() && v.depth_map.is_some() {
            annotate_view(v, settings)?;
        }
        Ok(())
    })
}

/// Seed, annotate and train. With OAM on, views with depth get their
/// unocclusion masks computed first.
pub fn train_views(
    mut views: Vec<ViewRecord>,
    config: &TrainConfig,
    seeding: &SeedConfig,
    progress: impl FnMut(&MetricRecord),
) -> Result<TrainResult> {
    if config.oam_enabled {
        prepare_views(&mut views, &OcclusionSettings::default())?;
    }
    let initial = seed_from_depth(&views, seeding.points, FAR_DEPTH, seeding.opacity, config.seed)?;
    train_with_progress(&views, initial, config, progress)
}

fn coverage_mask(alpha: &[f64], w: usize, h: usize) -> Mask {
    Mask { width: w, height: h, data: alpha.iter().map(|&a| a >= COVERAGE).collect() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectScore {
    pub label: Label,
    /// Mean IoU over views.
    pub miou: f64,
    /// PSNR pooled over the union of predicted and true silhouettes.
    pub psnr: Option<f64>,
}

/// Scores each object extracted from `trained` against the same object
/// rendered alone from the ground-truth scene, over black.
pub fn evaluate_against_reference(
    trained: &GaussianScene,
    reference: &GaussianScene,
    views: &[ViewRecord],
    labels: &BTreeSet<Label>,
) -> Result<Vec<ObjectScore>> {
    if views.is_empty() {
        return Err(Error::InvalidInput("no evaluation views".into()));
    }
    let settings = RenderSettings::default();
    labels
        .iter()
        .map(|&k| {
            let subset = BTreeSet::from([k]);
            let pred_scene = extract(trained, &subset);
            let opts = RenderOptions { subset: None, background: Some(nalgebra::Vector3::zeros()) };
            let ref_opts = RenderOptions { subset: Some(&subset), background: Some(nalgebra::Vector3::zeros()) };
            let mut ious = Vec::new();
            let mut parts = Vec::new();
            for v in views {
                let (w, h) = v.dims();
                let pred = render_with(&pred_scene, &v.camera, &opts, &settings);
                let gt = render_with(reference, &v.camera, &ref_opts, &settings);
                let pm = coverage_mask(&pred.alpha, w, h);
                let gm = coverage_mask(&gt.alpha, w, h);
                ious.push(miou(&pm, &gm)?);
                parts.push(squared_error(&pred.image, &gt.image, &pm.or(&gm)));
            }
            Ok(ObjectScore { label: k, miou: ious.iter().sum::<f64>() / ious.len() as f64, psnr: pooled_psnr(&parts) })
        })
        .collect()
}

/// Scores each object of the views' label maps using only the views:
/// IoU of the rendered main-contributor label (at covered pixels) against
/// the view's mask, and PSNR of the full render inside that mask.
pub fn evaluate_against_views(trained: &GaussianScene, views: &[ViewRecord]) -> Result<Vec<ObjectScore>> {
    if views.is_empty() {
        return Err(Error::InvalidInput("no evaluation views".into()));
    }
    let labels: BTreeSet<Label> = views.iter().flat_map(|v| v.label_map.labels()).collect();
    let renders: Vec<_> = views.iter().map(|v| render(trained, &v.camera, None)).collect();
    labels
        .iter()
        .map(|&k| {
            let mut ious = Vec::new();
            let mut parts = Vec::new();
            for (v, out) in views.iter().zip(&renders) {
                let (w, h) = v.dims();
                let covered = coverage_mask(&out.alpha, w, h);
                let pm = out.labels.mask_of(k).and(&covered);
                let gm = v.label_map.mask_of(k);
                ious.push(miou(&pm, &gm)?);
                parts.push(squared_error(&out.image, &v.image, &gm));
            }
            Ok(ObjectScore { label: k, miou: ious.iter().sum::<f64>() / ious.len() as f64, psnr: pooled_psnr(&parts) })
        })
        .collect()
}

/// PSNR of object `k` extracted from `trained` against the reference
/// object alone, restricted to the part of the object hidden by other
/// objects in each view: reference silhouette pixels that the view labels
/// as some other object.
pub fn occluded_region_psnr(
    trained: &GaussianScene,
    reference: &GaussianScene,
    views: &[ViewRecord],
    k: Label,
) -> Result<Option<f64>> {
    let subset = BTreeSet::from([k]);
    let pred_scene = extract(trained, &subset);
    let settings = RenderSettings::default();
    let black = Some(nalgebra::Vector3::zeros());
    let mut parts = Vec::new();
    for v in views {
        let (w, h) = v.dims();
        let pred = render_with(&pred_scene, &v.camera, &RenderOptions { subset: None, background: black }, &settings);
        let gt =
            render_with(reference, &v.camera, &RenderOptions { subset: Some(&subset), background: black }, &settings);
        let hidden =
            coverage_mask(&gt.alpha, w, h).and(&v.label_map.mask_of(k).not()).and(&v.label_map.mask_of(0).not());
        parts.push(squared_error(&pred.image, &gt.image, &hidden));
    }
    Ok(pooled_psnr(&parts))
}
