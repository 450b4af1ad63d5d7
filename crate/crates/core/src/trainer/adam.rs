use nalgebra::Quaternion;

use super::backward::GradientBuffer;
use crate::scene::GaussianScene;

pub(crate) const PARAMS: usize = 14;

/// Learning rates per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the scene extent.
    pub position_init: f64,
    /// Final position rate after exponential decay, multiplied by the scene extent.
    pub position_final: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            color: 2.5e-3,
            opacity: 0.05,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

impl LearningRates {
    /// Log-linear decay of the position rate over `max_steps`.
    pub fn position_at(&self, step: usize, max_steps: usize, extent: f64) -> f64 {
        let t = if max_steps == 0 { 0.0 } else { (step as f64 / max_steps as f64).clamp(0.0, 1.0) };
        let ln = self.position_init.ln() * (1.0 - t) + self.position_final.ln() * t;
        ln.exp() * extent
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<[f64; PARAMS]>,
    v: Vec<[f64; PARAMS]>,
}

fn flatten(g: &super::backward::GaussianGrad) -> [f64; PARAMS] {
    [
        g.mean.x,
        g.mean.y,
        g.mean.z,
        g.log_scale.x,
        g.log_scale.y,
        g.log_scale.z,
        g.rotation[0],
        g.rotation[1],
        g.rotation[2],
        g.rotation[3],
        g.opacity_logit,
        g.color.x,
        g.color.y,
        g.color.z,
    ]
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15, step: 0, m: vec![[0.0; PARAMS]; n], v: vec![[0.0; PARAMS]; n] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Rebuild state after densification: `sources[i]` is the old index whose
    /// moments the new Gaussian `i` inherits, or `None` for fresh zeros.
    pub fn remap(&mut self, sources: &[Option<usize>]) {
        let pick = |v: &Vec<[f64; PARAMS]>| -> Vec<[f64; PARAMS]> {
            sources.iter().map(|s| s.map_or([0.0; PARAMS], |i| v[i])).collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    /// One update. Rotations are re-normalized and colors clamped to `[0, 1]`.
    pub fn step(&mut self, scene: &mut GaussianScene, grads: &GradientBuffer, lr: &[f64; PARAMS]) {
        assert_eq!(self.m.len(), scene.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            let grad = flatten(&grads.grads[i]);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut delta = [0.0; PARAMS];
            for k in 0..PARAMS {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * grad[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                delta[k] = lr[k] * mh / (vh.sqrt() + self.eps);
            }
            g.mean.x -= delta[0];
            g.mean.y -= delta[1];
            g.mean.z -= delta[2];
            g.log_scale.x -= delta[3];
            g.log_scale.y -= delta[4];
            g.log_scale.z -= delta[5];
            g.rotation = Quaternion::new(
                g.rotation.w - delta[6],
                g.rotation.i - delta[7],
                g.rotation.j - delta[8],
                g.rotation.k - delta[9],
            );
            g.opacity_logit -= delta[10];
            g.color.x = (g.color.x - delta[11]).clamp(0.0, 1.0);
            g.color.y = (g.color.y - delta[12]).clamp(0.0, 1.0);
            g.color.z = (g.color.z - delta[13]).clamp(0.0, 1.0);
            g.normalize_rotation();
        }
    }
}

pub(crate) fn lr_vector(rates: &LearningRates, position: f64) -> [f64; PARAMS] {
    let mut lr = [0.0; PARAMS];
    lr[0..3].fill(position);
    lr[3..6].fill(rates.scale);
    lr[6..10].fill(rates.rotation);
    lr[10] = rates.opacity;
    lr[11..14].fill(rates.color);
    lr
}
