//! Evaluation metrics.

use crate::error::{Error, Result};
use crate::scene::{Image, Mask};

pub use crate::trainer::loss::ssim;

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 1.
pub fn miou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::dims("mask", gt.dims(), pred.dims()));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean IoU over pairs.
pub fn mean_iou(pairs: &[(Mask, Mask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no mask pairs".into()));
    }
    let mut s = 0.0;
    for (p, g) in pairs {
        s += miou(p, g)?;
    }
    Ok(s / pairs.len() as f64)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// `10·log10(1/MSE)` on `[0, 1]` images; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::dims("image", b.dims(), a.dims()));
    }
    let se: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(psnr_from_mse(se / a.data.len().max(1) as f64))
}

/// PSNR over the pixels of `mask` only. `None` for an empty mask.
pub fn masked_psnr(a: &Image, b: &Image, mask: &Mask) -> Result<Option<f64>> {
    if a.dims() != b.dims() {
        return Err(Error::dims("image", b.dims(), a.dims()));
    }
    if mask.dims() != a.dims() {
        return Err(Error::dims("mask", a.dims(), mask.dims()));
    }
    let (se, n) = squared_error(a, b, mask);
    Ok((n > 0).then(|| psnr_from_mse(se / n as f64)))
}

/// Sum of squared channel errors over `mask` and the channel count.
pub fn squared_error(a: &Image, b: &Image, mask: &Mask) -> (f64, usize) {
    let mut se = 0.0;
    let mut n = 0;
    for (p, &on) in mask.data.iter().enumerate() {
        if on {
            for c in 0..3 {
                let d = a.data[p * 3 + c] - b.data[p * 3 + c];
                se += d * d;
            }
            n += 3;
        }
    }
    (se, n)
}

/// PSNR of pooled squared errors, e.g. over several views.
pub fn pooled_psnr(parts: &[(f64, usize)]) -> Option<f64> {
    let se: f64 = parts.iter().map(|p| p.0).sum();
    let n: usize = parts.iter().map(|p| p.1).sum();
    (n > 0).then(|| psnr_from_mse(se / n as f64))
}
