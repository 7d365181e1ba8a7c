//! Structural similarity with an 11x11 Gaussian window (sigma 1.5), computed
//! over the valid region only, plus its exact gradient.

use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub(crate) fn window_1d() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of a `h x w` plane.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - WINDOW + 1, h - WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * rows[(y + j) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter`]: scatters an `(h-10) x (w-10)` map back to `h x w`.
fn filter_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - WINDOW + 1, h - WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for (j, kv) in k.iter().enumerate() {
                rows[(y + j) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

fn check(a: &[f64], b: &[f64], w: usize, h: usize, channels: usize) -> Result<()> {
    if a.len() != w * h * channels || b.len() != a.len() {
        return Err(Error::ShapeMismatch(format!(
            "SSIM inputs must both be {w}x{h}x{channels}"
        )));
    }
    if w < WINDOW || h < WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs images of at least {WINDOW}x{WINDOW}, got {w}x{h}"
        )));
    }
    Ok(())
}

fn plane(img: &[f64], channels: usize, c: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(channels).copied().collect()
}

/// Mean SSIM of two interleaved `h x w x channels` images, and optionally its
/// gradient with respect to `a`.
pub(crate) fn ssim_with_grad(
    a: &[f64],
    b: &[f64],
    w: usize,
    h: usize,
    channels: usize,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check(a, b, w, h, channels)?;
    let k = window_1d();
    let n_map = (w - WINDOW + 1) * (h - WINDOW + 1);
    let norm = 1.0 / (n_map * channels) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.len()]);
    for c in 0..channels {
        let x = plane(a, channels, c);
        let y = plane(b, channels, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = filter(&x, w, h, &k);
        let mu_y = filter(&y, w, h, &k);
        let e_xx = filter(&xx, w, h, &k);
        let e_yy = filter(&yy, w, h, &k);
        let e_xy = filter(&xy, w, h, &k);

        let mut d_mu = vec![0.0; n_map];
        let mut d_var = vec![0.0; n_map];
        let mut d_cov = vec![0.0; n_map];
        for i in 0..n_map {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = e_xx[i] - mx * mx;
            let var_y = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            let n1 = 2.0 * mx * my + C1;
            let n2 = 2.0 * cov + C2;
            let d1 = mx * mx + my * my + C1;
            let d2 = var_x + var_y + C2;
            let s = (n1 * n2) / (d1 * d2);
            total += s;
            if want_grad {
                // partials of s w.r.t. mu_x, var_x and cov, scaled by the mean
                d_mu[i] = norm * ((2.0 * my * n2) / (d1 * d2) - s * 2.0 * mx / d1);
                d_var[i] = norm * (-s / d2);
                d_cov[i] = norm * (2.0 * n1 / (d1 * d2));
            }
        }
        if let Some(g) = grad.as_mut() {
            // ds/dx_q = w [dmu - 2 dvar mu_x - dcov mu_y] + 2 dvar w x_q + dcov w y_q
            let base: Vec<f64> = (0..n_map)
                .map(|i| d_mu[i] - 2.0 * d_var[i] * mu_x[i] - d_cov[i] * mu_y[i])
                .collect();
            let t0 = filter_adjoint(&base, w, h, &k);
            let t1 = filter_adjoint(&d_var, w, h, &k);
            let t2 = filter_adjoint(&d_cov, w, h, &k);
            for q in 0..w * h {
                g[q * channels + c] = t0[q] + 2.0 * t1[q] * x[q] + t2[q] * y[q];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean SSIM over all valid window positions and channels.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    Ok(ssim_with_grad(a, b, width, height, channels, false)?.0)
}
