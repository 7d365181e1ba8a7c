use nalgebra::Vector2;

use crate::error::Result;
use crate::gaussians::{eval_color, GaussianCloud, RenderSettings};
use crate::geometry::{project_covariance, project_point, Camera};

use super::{sh_degree_in_use, MAX_ALPHA};

/// Brute-force reference for one pixel: every visible Gaussian, no footprint
/// or alpha cutoffs, only the 0.99 clamp. Returns `(color, alpha, depth)`.
pub fn render_pixel_oracle(
    cloud: &GaussianCloud,
    cam: &Camera,
    settings: &RenderSettings,
    pixel: (usize, usize),
) -> Result<([f64; 3], f64, f64)> {
    cloud.validate()?;
    let center = cam.center();
    let p = Vector2::new(pixel.0 as f64 + 0.5, pixel.1 as f64 + 0.5);
    let degree = sh_degree_in_use(cloud, settings);

    let mut layers = Vec::new();
    for i in 0..cloud.len() {
        let mu = cloud.position(i);
        let Ok(proj) = project_point(cam, &mu) else {
            continue;
        };
        let cov = project_covariance(cam, &mu, &cloud.covariance(i))?;
        let Some(inv) = cov.try_inverse() else {
            continue;
        };
        let d = p - proj.uv();
        let g = (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp();
        let a = (cloud.opacity(i) * g).min(MAX_ALPHA);
        let dir = (mu - center).normalize();
        let c = eval_color(cloud.sh_coeffs(i), &dir, degree)?;
        layers.push((proj.z, i, a, c));
    }
    layers.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut transmittance = 1.0;
    for (z, _, a, c) in layers {
        for ch in 0..3 {
            color[ch] += c[ch] * a * transmittance;
        }
        depth += z * a * transmittance;
        transmittance *= 1.0 - a;
    }
    for ch in 0..3 {
        color[ch] += transmittance * settings.background[ch];
    }
    Ok((color, 1.0 - transmittance, depth))
}
