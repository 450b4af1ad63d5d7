//! Clone/split/prune on accumulated screen-space positional gradients.
//! Children always keep their parent's label.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scene::{sigmoid, GaussianScene};

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub interval: usize,
    pub from_iter: usize,
    pub until_iter: usize,
    /// Threshold on the mean NDC-space positional gradient norm.
    pub grad_threshold: f64,
    /// Gaussians larger than this fraction of the scene extent are split, smaller ones cloned.
    pub percent_dense: f64,
    pub min_opacity: f64,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 200,
            from_iter: 500,
            until_iter: 10_000,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            min_opacity: 0.005,
            max_gaussians: 20_000,
        }
    }
}

/// Running screen-space gradient statistics.
#[derive(Clone, Debug, Default)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self { grad_sum: vec![0.0; n], count: vec![0; n] }
    }

    /// `g` is in pixels; scaled by half the image size to NDC units.
    pub fn record(&mut self, index: usize, g: Vector2<f64>, width: usize, height: usize) {
        let ndc = Vector2::new(g.x * width as f64 * 0.5, g.y * height as f64 * 0.5);
        self.grad_sum[index] += ndc.norm();
        self.count[index] += 1;
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

/// Result of one densification pass: for every new Gaussian, the old index
/// whose optimizer state it keeps (`None` for freshly spawned children).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyOutcome {
    pub sources: Vec<Option<usize>>,
    /// Parent of every new Gaussian (for per-Gaussian side tables).
    pub parents: Vec<usize>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

pub fn densify_and_prune<R: Rng>(
    scene: &mut GaussianScene,
    stats: &DensifyStats,
    config: &DensifyConfig,
    extent: f64,
    rng: &mut R,
) -> DensifyOutcome {
    let n = scene.len();
    let mut out = DensifyOutcome::default();
    let mut next = Vec::with_capacity(n);
    let budget = config.max_gaussians.saturating_sub(n);
    let mut grown = 0usize;
    for i in 0..n {
        let g = &scene.gaussians[i];
        if sigmoid(g.opacity_logit) < config.min_opacity {
            out.pruned += 1;
            continue;
        }
        let hot = stats.mean(i) >= config.grad_threshold && grown < budget;
        let big = g.scale().max() > config.percent_dense * extent;
        if hot && !big {
            next.push(g.clone());
            out.sources.push(Some(i));
            out.parents.push(i);
            next.push(g.clone());
            out.sources.push(None);
            out.parents.push(i);
            out.cloned += 1;
            grown += 1;
        } else if hot && big {
            let r = g.rotation_matrix();
            let s = g.scale();
            for _ in 0..2 {
                let xi = Vector3::<f64>::from_fn(|_, _| rng.sample(StandardNormal));
                let mut child = g.clone();
                child.mean = g.mean + r * s.component_mul(&xi);
                child.log_scale = g.log_scale.map(|v| v - 1.6f64.ln());
                next.push(child);
                out.sources.push(None);
                out.parents.push(i);
            }
            out.split += 1;
            grown += 1;
        } else {
            next.push(g.clone());
            out.sources.push(Some(i));
            out.parents.push(i);
        }
    }
    scene.gaussians = next;
    out
}
