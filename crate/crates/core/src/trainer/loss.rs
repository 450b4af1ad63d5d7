//! Image losses with gradients with respect to the first argument.

use crate::error::{Error, Result};
use crate::scene::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dims("image", a.dims(), b.dims()));
    }
    Ok(())
}

/// Mean absolute difference over all channels, with subgradient `sign(a - b) / count`.
pub fn l1_loss(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    same_dims(a, b)?;
    let n = a.data.len().max(1) as f64;
    let mut sum = 0.0;
    let grad = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x - y;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "same" filtering with zero padding. The kernel is symmetric,
/// so this is also its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Returns (mean SSIM, optional gradient of mean SSIM w.r.t. `a`).
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    same_dims(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let k = gaussian_window();
    let n = (w * h * 3) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; w * h * 3]);
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = blur(&x, w, h, &k);
        let mu_y = blur(&y, w, h, &k);
        let e_xx = blur(&xx, w, h, &k);
        let e_yy = blur(&yy, w, h, &k);
        let e_xy = blur(&xy, w, h, &k);
        let mut d_mu = vec![0.0; w * h];
        let mut d_exx = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for p in 0..w * h {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * (e_xy[p] - mx * my) + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = (e_xx[p] - mx * mx) + (e_yy[p] - my * my) + C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                let bb = b1 * b2;
                d_mu[p] = (2.0 * my * a2 - 2.0 * my * a1) / bb - s * (2.0 * mx / b1 - 2.0 * mx / b2);
                d_exx[p] = -s / b2;
                d_exy[p] = 2.0 * a1 / bb;
            }
        }
        if let Some(g) = grad.as_mut() {
            let f_mu = blur(&d_mu, w, h, &k);
            let f_xx = blur(&d_exx, w, h, &k);
            let f_xy = blur(&d_exy, w, h, &k);
            for p in 0..w * h {
                g[p * 3 + c] = (f_mu[p] + 2.0 * x[p] * f_xx[p] + y[p] * f_xy[p]) / n;
            }
        }
    }
    Ok((total / n, grad))
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, zero padding) over all channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// `1 - SSIM(a, b)` and its gradient w.r.t. `a`.
pub fn ssim_loss(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    let (s, g) = ssim_impl(a, b, true)?;
    let g = g.unwrap_or_default().into_iter().map(|v| -v).collect();
    Ok((1.0 - s, g))
}
