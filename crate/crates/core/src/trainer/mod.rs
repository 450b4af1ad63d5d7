//! Scene optimization with the image loss and the per-object label loss.
//!
//! Per iteration: render one training view, apply `(1-λ1)·L1 + λ1·(1-SSIM)`,
//! and from `label_loss_start` on, lift the view's labels onto the Gaussians
//! and add `λ2·L_label` over a random sample of the view's objects.

pub mod adam;
pub mod backward;
pub mod densify;
pub mod loss;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use nalgebra::Vector3;
use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, LearningRates};
pub use backward::{backward, GaussianGrad, GradientBuffer};
pub use densify::{densify_and_prune, DensifyConfig, DensifyOutcome, DensifyStats};
pub use loss::{l1_loss, ssim, ssim_loss};

use crate::error::{Error, Result};
use crate::lifting::{commit_votes_weighted, votes_from_render, DEFAULT_CONTRIBUTION_THRESHOLD};
use crate::render::{render_with, RenderOptions, RenderSettings};
use crate::scene::{Gaussian3D, GaussianScene, Image, Label, Mask, ViewRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// First (1-based) iteration at which labels are lifted and the label loss applies.
    pub label_loss_start: usize,
    pub masks_per_iter: usize,
    pub contribution_threshold: f64,
    /// SSIM weight.
    pub lambda1: f64,
    /// Label loss weight.
    pub lambda2: f64,
    pub lr: LearningRates,
    pub gpf_enabled: bool,
    pub oam_enabled: bool,
    pub dov_enabled: bool,
    pub densify: DensifyConfig,
    pub seed: u64,
    /// Evaluate PSNR on all training views every this many iterations (0 = never).
    pub eval_every: usize,
    /// Where to write the scene when a non-finite loss aborts training.
    pub dump_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 15_000,
            label_loss_start: 1000,
            masks_per_iter: 10,
            contribution_threshold: DEFAULT_CONTRIBUTION_THRESHOLD,
            lambda1: 0.2,
            lambda2: 0.1,
            lr: LearningRates::default(),
            gpf_enabled: true,
            oam_enabled: true,
            dov_enabled: true,
            densify: DensifyConfig::default(),
            seed: 0,
            eval_every: 500,
            dump_path: None,
        }
    }
}

impl TrainConfig {
    /// Shortens the default schedule to `iterations`, moving the label-loss
    /// start by the same factor. Densification keeps its absolute window.
    pub fn scaled_to(iterations: usize) -> Self {
        let base = Self::default();
        let f = iterations as f64 / base.iterations as f64;
        let start = ((base.label_loss_start as f64 * f).round() as usize).max(1);
        Self { iterations, label_loss_start: start.min(iterations.max(1)), ..base }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(Error::InvalidInput(format!("lambda1 {} outside [0, 1]", self.lambda1)));
        }
        if !(self.lambda2 >= 0.0) {
            return Err(Error::InvalidInput(format!("lambda2 {} must be >= 0", self.lambda2)));
        }
        if self.label_loss_start > self.iterations && self.iterations > 0 {
            return Err(Error::InvalidInput(format!(
                "label_loss_start {} exceeds iterations {}",
                self.label_loss_start, self.iterations
            )));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub view: String,
    pub l1: f64,
    pub ssim: f64,
    pub label_loss: f64,
    pub total: f64,
    pub gaussians: usize,
    pub labeled_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub scene: GaussianScene,
    pub log: Vec<MetricRecord>,
    /// Labels that were sampled but had no Gaussians, with the iteration.
    pub absent_labels: Vec<(usize, Label)>,
}

impl TrainResult {
    /// Line-delimited JSON.
    pub fn log_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.log {
            s.push_str(&serde_json::to_string(r).expect("metric record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Uniform sample without replacement of up to `count` labels present in the view.
pub fn sample_masks<R: Rng>(view: &ViewRecord, count: usize, rng: &mut R) -> BTreeSet<Label> {
    let labels = view.label_map.labels();
    let mut picked = labels.into_iter().choose_multiple(rng, count);
    picked.sort_unstable();
    picked.into_iter().collect()
}

#[derive(Clone, Debug)]
pub struct LabelLossOutput {
    pub loss: f64,
    pub grads: GradientBuffer,
    pub per_label: BTreeMap<Label, f64>,
    /// Sampled labels with no Gaussians in the scene.
    pub absent: Vec<Label>,
}

/// Sum over sampled labels `k` of `L1(R_k ⊙ U_k, I ⊙ M_k ⊙ U_k)`, where `R_k`
/// renders only label-`k` Gaussians over black. Gradients reach only those
/// Gaussians. With `use_unocclusion` off every `U_k` is all ones.
pub fn label_loss(
    scene: &GaussianScene,
    view: &ViewRecord,
    sampled: &BTreeSet<Label>,
    use_unocclusion: bool,
) -> Result<LabelLossOutput> {
    label_loss_with(scene, view, sampled, use_unocclusion, &RenderSettings::default())
}

pub fn label_loss_with(
    scene: &GaussianScene,
    view: &ViewRecord,
    sampled: &BTreeSet<Label>,
    use_unocclusion: bool,
    settings: &RenderSettings,
) -> Result<LabelLossOutput> {
    if sampled.is_empty() {
        return Err(Error::InvalidInput("label loss needs at least one sampled label".into()));
    }
    let (w, h) = view.dims();
    let present = scene.labels_present();
    let mut total = 0.0;
    let mut grads = GradientBuffer::zeros(scene.len());
    let mut per_label = BTreeMap::new();
    let mut absent = Vec::new();
    for &k in sampled {
        if !present.contains(&k) {
            absent.push(k);
        }
        let unocc = if use_unocclusion { view.unocclusion_mask(k) } else { Mask::new(w, h, true) };
        let target_mask = view.label_map.mask_of(k).and(&unocc);
        let target = view.image.masked(&target_mask);
        let subset = BTreeSet::from([k]);
        let out = render_with(
            scene,
            &view.camera,
            &RenderOptions { subset: Some(&subset), background: Some(Vector3::zeros()) },
            settings,
        );
        let pred = out.image.masked(&unocc);
        let (l, mut g) = l1_loss(&pred, &target)?;
        for (p, &on) in unocc.data.iter().enumerate() {
            if !on {
                g[p * 3..p * 3 + 3].fill(0.0);
            }
        }
        total += l;
        per_label.insert(k, l);
        if !out.splats.is_empty() {
            let gb = backward(scene, &view.camera, &out, &g);
            grads.add_scaled(&gb, 1.0);
        }
    }
    Ok(LabelLossOutput { loss: total, grads, per_label, absent })
}

/// Image-loss value, its components, and the gradient w.r.t. the render.
pub fn image_loss(render: &Image, target: &Image, lambda1: f64) -> Result<(f64, f64, f64, Vec<f64>)> {
    let (l1, g1) = l1_loss(render, target)?;
    let (ls, gs) = ssim_loss(render, target)?;
    let total = (1.0 - lambda1) * l1 + lambda1 * ls;
    let grad = g1.iter().zip(&gs).map(|(a, b)| (1.0 - lambda1) * a + lambda1 * b).collect();
    Ok((total, l1, 1.0 - ls, grad))
}

/// Radius of the camera rig around its centroid, times 1.1.
pub fn scene_extent(views: &[ViewRecord]) -> f64 {
    if views.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vector3<f64>> = views.iter().map(|v| v.camera.center()).collect();
    let centroid = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - centroid).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Initial unlabeled scene from points unprojected through the views' depth
/// maps (pixels nearer than `far`), colored by the image, sized from the
/// mean distance to the three nearest neighbours.
pub fn seed_from_depth(views: &[ViewRecord], count: usize, far: f32, opacity: f64, seed: u64) -> Result<GaussianScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates = Vec::new();
    for (vi, v) in views.iter().enumerate() {
        let Some(d) = &v.depth_map else { continue };
        for (p, &z) in d.depth.iter().enumerate() {
            if z < far && z > 0.0 {
                candidates.push((vi, p));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no depth pixels to seed from".into()));
    }
    let picks: Vec<(usize, usize)> = (0..count).map(|_| candidates[rng.gen_range(0..candidates.len())]).collect();
    let mut points = Vec::with_capacity(picks.len());
    for &(vi, p) in &picks {
        let v = &views[vi];
        let cam = &v.camera;
        let (x, y) = (p % cam.width, p / cam.width);
        let z = v.depth_map.as_ref().unwrap().depth[p] as f64;
        let ray = Vector3::new((x as f64 + 0.5 - cam.cx) / cam.fx, (y as f64 + 0.5 - cam.cy) / cam.fy, 1.0);
        let pc = ray * z;
        let pw = cam.rotation.transpose() * (pc - cam.translation);
        let c = v.image.pixel(x, y);
        points.push((pw, Vector3::new(c[0], c[1], c[2])));
    }
    let mut gaussians = Vec::with_capacity(points.len());
    for (i, (p, c)) in points.iter().enumerate() {
        let mut best = [f64::INFINITY; 3];
        for (j, (q, _)) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d2 = (p - q).norm_squared();
            if d2 < best[2] {
                best[2] = d2;
                best.sort_by(f64::total_cmp);
            }
        }
        let finite: Vec<f64> = best.iter().copied().filter(|d| d.is_finite()).collect();
        let mean_d2 = if finite.is_empty() { 1e-4 } else { finite.iter().sum::<f64>() / finite.len() as f64 };
        let sigma = mean_d2.max(1e-7).sqrt();
        gaussians.push(Gaussian3D::isotropic(*p, sigma, opacity, *c));
    }
    let background = Vector3::zeros();
    Ok(GaussianScene::new(gaussians, background))
}

pub fn psnr_over_views(scene: &GaussianScene, views: &[ViewRecord]) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for v in views {
        let out = crate::render::render(scene, &v.camera, None);
        for (a, b) in out.image.data.iter().zip(&v.image.data) {
            se += (a - b) * (a - b);
        }
        n += out.image.data.len();
    }
    let mse = se / n.max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Optimize `initial` against the training views.
pub fn train(views: &[ViewRecord], initial: GaussianScene, config: &TrainConfig) -> Result<TrainResult> {
    train_with_progress(views, initial, config, |_| {})
}

pub fn train_with_progress(
    views: &[ViewRecord],
    initial: GaussianScene,
    config: &TrainConfig,
    mut progress: impl FnMut(&MetricRecord),
) -> Result<TrainResult> {
    config.validate()?;
    let mut scene = initial;
    let mut result = TrainResult { scene: GaussianScene::default(), log: Vec::new(), absent_labels: Vec::new() };
    if config.iterations == 0 {
        result.scene = scene;
        return Ok(result);
    }
    if views.len() < 2 {
        return Err(Error::InvalidInput(format!("training needs >= 2 views, got {}", views.len())));
    }
    for v in views {
        v.validate()?;
    }
    scene.label_count = scene.label_count.max(views.iter().map(|v| v.label_map.max_label()).max().unwrap_or(0));

    let settings = RenderSettings::default();
    let extent = scene_extent(views);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(scene.len());
    let mut stats = DensifyStats::new(scene.len());
    let mut ledger = vec![0.0; scene.len()];
    let mut order: Vec<usize> = Vec::new();

    for it in 1..=config.iterations {
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
            ledger.iter_mut().for_each(|w| *w = 0.0);
        }
        let vi = order.pop().expect("nonempty epoch");
        let view = &views[vi];
        let cam = &view.camera;

        let full = render_with(&scene, cam, &RenderOptions::default(), &settings);
        let (img_loss, l1, ssim_value, upstream) = image_loss(&full.image, &view.image, config.lambda1)?;
        let mut grads = backward(&scene, cam, &full, &upstream);

        let mut label_term = 0.0;
        if it >= config.label_loss_start {
            let votes =
                votes_from_render(&full, &view.label_map, vi, config.contribution_threshold, config.gpf_enabled);
            commit_votes_weighted(&mut scene, &votes, &mut ledger)?;
            if config.lambda2 > 0.0 {
                let sampled = sample_masks(view, config.masks_per_iter, &mut rng);
                if !sampled.is_empty() {
                    let ll = label_loss_with(&scene, view, &sampled, config.oam_enabled, &settings)?;
                    label_term = ll.loss;
                    result.absent_labels.extend(ll.absent.iter().map(|&k| (it, k)));
                    grads.add_scaled(&ll.grads, config.lambda2);
                }
            }
        }

        let total = img_loss + config.lambda2 * label_term;
        if !total.is_finite() || !grads.is_finite() {
            let detail = format!(
                "view {} loss {total} (l1 {l1}, ssim {ssim_value}, label {label_term}), {} gaussians",
                view.id,
                scene.len()
            );
            if let Some(path) = &config.dump_path {
                crate::io::checkpoint::save_checkpoint(&scene, path)?;
            }
            return Err(Error::NonFiniteLoss { iteration: it, detail });
        }

        for s in &full.splats {
            stats.record(s.source_index, grads.mean2d[s.source_index], cam.width, cam.height);
        }

        let lr = adam::lr_vector(&config.lr, config.lr.position_at(it, config.iterations, extent));
        adam.step(&mut scene, &grads, &lr);

        let d = &config.densify;
        if d.enabled && it >= d.from_iter && it <= d.until_iter && d.interval > 0 && it % d.interval == 0 {
            let outcome = densify_and_prune(&mut scene, &stats, d, extent, &mut rng);
            adam.remap(&outcome.sources);
            ledger = outcome.parents.iter().map(|&p| ledger[p]).collect();
            stats = DensifyStats::new(scene.len());
        }

        let train_psnr = (config.eval_every > 0 && it % config.eval_every == 0).then(|| psnr_over_views(&scene, views));
        let record = MetricRecord {
            iteration: it,
            view: view.id.clone(),
            l1,
            ssim: ssim_value,
            label_loss: label_term,
            total,
            gaussians: scene.len(),
            labeled_fraction: scene.labeled_fraction(),
            train_psnr,
        };
        progress(&record);
        result.log.push(record);
    }
    result.scene = scene;
    Ok(result)
}
