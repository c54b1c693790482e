//! Image and regularization losses with gradients.

use crate::error::{Error, Result};
use crate::io::Image;
use crate::scene::{DomainSphere, Gaussian, ALPHA};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const LAMBDA_SSIM: f64 = 0.2;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_shape(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

fn window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian blur of one plane with zero padding. The kernel is
/// symmetric, so this is also its own adjoint.
fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = window();
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * src[y * w + xx as usize];
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

fn plane(im: &Image, c: usize) -> Vec<f64> {
    im.data.iter().skip(c).step_by(im.channels).map(|v| *v as f64).collect()
}

/// Mean SSIM over pixels and channels, and optionally its gradient with
/// respect to `x`.
fn ssim_impl(x: &Image, y: &Image, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (w, h, ch) = (x.width, x.height, x.channels);
    let n = (w * h * ch) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; x.data.len()]);
    for c in 0..ch {
        let xp = plane(x, c);
        let yp = plane(y, c);
        let xx: Vec<f64> = xp.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yp.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xp.iter().zip(&yp).map(|(a, b)| a * b).collect();
        let mx = blur(&xp, w, h);
        let my = blur(&yp, w, h);
        let exx = blur(&xx, w, h);
        let eyy = blur(&yy, w, h);
        let exy = blur(&xy, w, h);
        let mut d_m = vec![0.0; w * h];
        let mut d_xx = vec![0.0; w * h];
        let mut d_xy = vec![0.0; w * h];
        for p in 0..w * h {
            let (m1, m2) = (mx[p], my[p]);
            let sx = exx[p] - m1 * m1;
            let sy = eyy[p] - m2 * m2;
            let sxy = exy[p] - m1 * m2;
            let a1 = 2.0 * m1 * m2 + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = m1 * m1 + m2 * m2 + C1;
            let b2 = sx + sy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                d_m[p] = (2.0 * m2 * a2 - 2.0 * m2 * a1) / (b1 * b2) - s * (2.0 * m1 / b1 - 2.0 * m1 / b2);
                d_xx[p] = -s / b2;
                d_xy[p] = 2.0 * a1 / (b1 * b2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let bm = blur(&d_m, w, h);
            let bxx = blur(&d_xx, w, h);
            let bxy = blur(&d_xy, w, h);
            for p in 0..w * h {
                g[p * ch + c] = (bm[p] + 2.0 * xp[p] * bxx[p] + yp[p] * bxy[p]) / n;
            }
        }
    }
    (total / n, grad)
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, zero padding), averaged over
/// channels.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    check_shape(x, y)?;
    Ok(ssim_impl(x, y, false).0)
}

/// Mean absolute difference over all values.
pub fn l1(x: &Image, y: &Image) -> Result<f64> {
    check_shape(x, y)?;
    let s: f64 = x.data.iter().zip(&y.data).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
    Ok(s / x.data.len() as f64)
}

/// `0.8 * L1 + 0.2 * (1 - SSIM)`.
pub fn loss_rgb(pred: &Image, gt: &Image) -> Result<f64> {
    check_shape(pred, gt)?;
    Ok((1.0 - LAMBDA_SSIM) * l1(pred, gt)? + LAMBDA_SSIM * (1.0 - ssim_impl(pred, gt, false).0))
}

/// [`loss_rgb`] and its gradient with respect to `pred`.
pub fn loss_rgb_grad(pred: &Image, gt: &Image) -> Result<(f64, Vec<f64>)> {
    check_shape(pred, gt)?;
    let n = pred.data.len() as f64;
    let (s, gs) = ssim_impl(pred, gt, true);
    let gs = gs.unwrap_or_default();
    let mut l = 0.0;
    let mut grad = vec![0.0; pred.data.len()];
    for (i, (a, b)) in pred.data.iter().zip(&gt.data).enumerate() {
        let d = *a as f64 - *b as f64;
        l += d.abs();
        let sgn = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[i] = (1.0 - LAMBDA_SSIM) * sgn / n - LAMBDA_SSIM * gs[i];
    }
    Ok(((1.0 - LAMBDA_SSIM) * l / n + LAMBDA_SSIM * (1.0 - s), grad))
}

fn mse_grad(a: &[f64], target: impl Fn(usize) -> f64) -> (f64, Vec<f64>) {
    let n = a.len().max(1) as f64;
    let mut l = 0.0;
    let mut g = vec![0.0; a.len()];
    for (i, v) in a.iter().enumerate() {
        let d = v - target(i);
        l += d * d;
        g[i] = 2.0 * d / n;
    }
    (l / n, g)
}

/// Mean squared error between the alpha map and an object mask over all
/// pixels (or only mask pixels when `object_only`), with gradient.
pub fn loss_alpha_masked_grad(alpha: &[f64], mask: &[f64], object_only: bool) -> Result<(f64, Vec<f64>)> {
    if alpha.len() != mask.len() {
        return Err(Error::invalid(format!(
            "alpha map has {} pixels, mask has {}",
            alpha.len(),
            mask.len()
        )));
    }
    if !object_only {
        return Ok(mse_grad(alpha, |i| mask[i]));
    }
    let n = mask.iter().filter(|m| **m > 0.5).count().max(1) as f64;
    let mut l = 0.0;
    let mut g = vec![0.0; alpha.len()];
    for i in 0..alpha.len() {
        if mask[i] > 0.5 {
            let d = alpha[i] - 1.0;
            l += d * d;
            g[i] = 2.0 * d / n;
        }
    }
    Ok((l / n, g))
}

/// Mean squared error between an alpha map and an object mask.
pub fn loss_alpha_masked(alpha: &Image, mask: &Image) -> Result<f64> {
    check_shape(alpha, mask)?;
    let a: Vec<f64> = alpha.data.iter().map(|v| *v as f64).collect();
    let m: Vec<f64> = mask.data.iter().map(|v| *v as f64).collect();
    Ok(loss_alpha_masked_grad(&a, &m, false)?.0)
}

/// Mean of `(1 - alpha)^2` and its gradient.
pub fn loss_alpha_full_grad(alpha: &[f64]) -> (f64, Vec<f64>) {
    mse_grad(alpha, |_| 1.0)
}

pub fn loss_alpha_full(alpha: &Image) -> f64 {
    let a: Vec<f64> = alpha.data.iter().map(|v| *v as f64).collect();
    loss_alpha_full_grad(&a).0
}

/// Which per-Gaussian alpha terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerGaussianTerms {
    /// `sum |1 - alpha|` over Gaussians inside the domain.
    pub inside: bool,
    /// `sum alpha^2` over Gaussians outside the domain.
    pub outside: bool,
}

/// Per-Gaussian alpha loss and its gradient with respect to each raw alpha.
pub fn loss_alpha_per_gaussian_grad(
    gaussians: &[Gaussian],
    domain: &DomainSphere,
    terms: PerGaussianTerms,
) -> (f64, Vec<f64>) {
    let mut l = 0.0;
    let mut g = vec![0.0; gaussians.len()];
    for (i, ga) in gaussians.iter().enumerate() {
        let a = ga.alpha();
        let da = a * (1.0 - a);
        if domain.contains(&ga.position()) {
            if terms.inside {
                l += (1.0 - a).abs();
                g[i] = if a < 1.0 { -da } else { 0.0 };
            }
        } else if terms.outside {
            l += a * a;
            g[i] = 2.0 * a * da;
        }
        // Raw alpha far below the logistic range has no useful slope.
        if ga.raw[ALPHA] <= -50.0 {
            g[i] = 0.0;
        }
    }
    (l, g)
}

/// Inside term plus background term over all Gaussians.
pub fn loss_alpha_per_gaussian(gaussians: &[Gaussian], domain: &DomainSphere) -> f64 {
    loss_alpha_per_gaussian_grad(
        gaussians,
        domain,
        PerGaussianTerms {
            inside: true,
            outside: true,
        },
    )
    .0
}
