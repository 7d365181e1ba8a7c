//! Differentiable front-to-back splatting of color, accumulated alpha and
//! accumulated depth.
//!
//! Per pixel, visible Gaussians are blended in ascending camera-space depth
//! of their means (ties broken by index):
//!
//! ```text
//! a_i   = min(0.99, opacity_i * exp(-0.5 d^T Sigma'^-1 d))
//! T_i   = prod_{j<i} (1 - a_j)
//! C     = sum_i c_i a_i T_i + T_N * background
//! A     = 1 - T_N
//! D     = sum_i z_i a_i T_i
//! ```
//!
//! Work is split into 16x16 pixel tiles. Each tile produces its own buffer
//! and the buffers are merged in tile order, so results do not depend on how
//! many threads rayon uses.

mod backward;
mod oracle;

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::Result;
use crate::gaussians::{sh, sigmoid, GaussianCloud, RenderSettings};
use crate::geometry::{perspective_jacobian, rotation_from_unit, Camera, LOW_PASS_VARIANCE, Z_NEAR};

pub use backward::{render_backward, OutputGradients, ParamGradients};
pub use oracle::render_pixel_oracle;

pub(crate) const TILE: usize = 8;
pub(crate) const MAX_ALPHA: f64 = 0.99;

/// Rendered buffers, row-major. `color` is `H * W * 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RenderOutput {
    pub fn pixel(&self, x: usize, y: usize) -> ([f64; 3], f64, f64) {
        let i = y * self.width + x;
        (
            [self.color[3 * i], self.color[3 * i + 1], self.color[3 * i + 2]],
            self.alpha[i],
            self.depth[i],
        )
    }
}

/// Everything computed for one visible Gaussian that the forward and
/// backward passes share.
#[derive(Clone, Debug)]
pub(crate) struct Projected {
    pub index: usize,
    pub p_cam: Vector3<f64>,
    pub mean: [f64; 2],
    /// Inverse screen covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub jac: Matrix2x3<f64>,
    pub view_cov: Matrix3<f64>,
    pub rot: Matrix3<f64>,
    pub unit_q: [f64; 4],
    pub sigmas: Vector3<f64>,
    pub opacity: f64,
    /// Unclamped SH color.
    pub raw_color: [f64; 3],
    pub color: [f64; 3],
    pub view_dir: Vector3<f64>,
    pub view_dist: f64,
    /// Inclusive-exclusive pixel rectangle `[x0, x1) x [y0, y1)`.
    pub rect: [usize; 4],
}

/// Splat data read in the per-pixel loops.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SplatLite {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
    pub rect: [usize; 4],
}

impl SplatLite {
    #[inline]
    pub(crate) fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.rect[0] && x < self.rect[1] && y >= self.rect[2] && y < self.rect[3]
    }
}

pub(crate) struct Prepared {
    /// Visible Gaussians, sorted front to back.
    pub projected: Vec<Projected>,
    pub splats: Vec<SplatLite>,
    /// Per tile, indices into `splats` in front-to-back order.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub extent2: f64,
}

pub(crate) fn sh_degree_in_use(cloud: &GaussianCloud, settings: &RenderSettings) -> usize {
    settings.sh_degree.min(cloud.sh_degree)
}

fn project_one(
    cloud: &GaussianCloud,
    cam: &Camera,
    settings: &RenderSettings,
    i: usize,
    cam_center: &Vector3<f64>,
) -> Option<Projected> {
    let mu = cloud.position(i);
    let p_cam = cam.world_to_camera(&mu);
    if !(p_cam.z > Z_NEAR) {
        return None;
    }
    let unit_q = cloud.unit_rotation(i);
    let rot = rotation_from_unit(unit_q[0], unit_q[1], unit_q[2], unit_q[3]);
    let sigmas = cloud.log_scale(i).sigmas();
    let sigma = rot * Matrix3::from_diagonal(&sigmas.component_mul(&sigmas)) * rot.transpose();
    let jac = perspective_jacobian(cam, &p_cam);
    let view_cov = cam.rotation * sigma * cam.rotation.transpose();
    let mut cov2d = jac * view_cov * jac.transpose();
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    cov2d[(0, 0)] += LOW_PASS_VARIANCE;
    cov2d[(1, 1)] += LOW_PASS_VARIANCE;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - off * off;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [cov2d[(1, 1)] / det, -off / det, cov2d[(0, 0)] / det];
    let mean = [
        cam.fx * p_cam.x / p_cam.z + cam.cx,
        cam.fy * p_cam.y / p_cam.z + cam.cy,
    ];

    let (x0, x1, y0, y1) = if settings.extent_sigmas.is_finite() {
        let rx = settings.extent_sigmas * cov2d[(0, 0)].sqrt();
        let ry = settings.extent_sigmas * cov2d[(1, 1)].sqrt();
        // pixel centers i + 0.5 inside [mean - r, mean + r]
        let lo = |m: f64, r: f64| (m - r - 0.5).ceil().max(0.0);
        let hi = |m: f64, r: f64, n: usize| ((m + r - 0.5).floor() + 1.0).min(n as f64);
        (
            lo(mean[0], rx),
            hi(mean[0], rx, cam.width),
            lo(mean[1], ry),
            hi(mean[1], ry, cam.height),
        )
    } else {
        (0.0, cam.width as f64, 0.0, cam.height as f64)
    };
    if !(x1 > x0 && y1 > y0) {
        return None;
    }
    let rect = [x0 as usize, x1 as usize, y0 as usize, y1 as usize];

    let diff = mu - cam_center;
    let view_dist = diff.norm();
    let view_dir = if view_dist > 0.0 { diff / view_dist } else { Vector3::z() };
    let raw_color = sh::eval_raw(cloud.sh_coeffs(i), &view_dir, sh_degree_in_use(cloud, settings));
    Some(Projected {
        index: i,
        p_cam,
        mean,
        conic,
        jac,
        view_cov,
        rot,
        unit_q,
        sigmas,
        opacity: sigmoid(cloud.opacity_logits[i]),
        raw_color,
        color: raw_color.map(|c| c.clamp(0.0, 1.0)),
        view_dir,
        view_dist,
        rect,
    })
}

pub(crate) fn prepare(
    cloud: &GaussianCloud,
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<Prepared> {
    cam.validate()?;
    settings.validate()?;
    cloud.validate()?;
    let center = cam.center();
    let mut projected: Vec<Projected> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| project_one(cloud, cam, settings, i, &center))
        .collect();
    // stable: equal depths keep ascending index order
    projected.sort_by(|a, b| a.p_cam.z.total_cmp(&b.p_cam.z));

    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    let mut splats = Vec::with_capacity(projected.len());
    for (k, p) in projected.iter().enumerate() {
        splats.push(SplatLite {
            mean: p.mean,
            conic: p.conic,
            opacity: p.opacity,
            color: p.color,
            depth: p.p_cam.z,
            rect: p.rect,
        });
        let [x0, x1, y0, y1] = p.rect;
        for ty in y0 / TILE..=(y1 - 1) / TILE {
            for tx in x0 / TILE..=(x1 - 1) / TILE {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    let extent2 = settings.extent_sigmas * settings.extent_sigmas;
    Ok(Prepared {
        projected,
        splats,
        tiles,
        tiles_x,
        extent2,
    })
}

/// Weight of splat `s` at pixel center `(px, py)` before the opacity
/// multiply, or `None` outside the footprint. Returns `(g, dx, dy)` with
/// `d = pixel - mean`.
#[inline]
pub(crate) fn footprint(s: &SplatLite, px: f64, py: f64, extent2: f64) -> Option<(f64, f64, f64)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let m = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    if m > extent2 {
        return None;
    }
    Some(((-0.5 * m).exp(), dx, dy))
}

pub(crate) fn tile_pixels(
    tile: usize,
    tiles_x: usize,
    width: usize,
    height: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let tx = tile % tiles_x;
    let ty = tile / tiles_x;
    let x0 = tx * TILE;
    let y0 = ty * TILE;
    let x1 = (x0 + TILE).min(width);
    let y1 = (y0 + TILE).min(height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Renders color, alpha and depth for `cloud` seen from `cam`.
pub fn render(cloud: &GaussianCloud, cam: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    let prep = prepare(cloud, cam, settings)?;
    let (w, h) = (cam.width, cam.height);
    let bg = settings.background;
    let max_blend = settings.max_blend.unwrap_or(usize::MAX);
    let cutoff = settings.alpha_cutoff;
    let min_t = settings.min_transmittance;

    let tile_results: Vec<Vec<(usize, [f64; 5])>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &prep.tiles[t];
            tile_pixels(t, prep.tiles_x, w, h)
                .map(|(x, y)| {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t_acc = 1.0;
                    let mut c = [0.0; 3];
                    let mut d = 0.0;
                    let mut used = 0;
                    for &k in list {
                        if used >= max_blend {
                            break;
                        }
                        let s = &prep.splats[k as usize];
                        if !s.covers(x, y) {
                            continue;
                        }
                        let Some((g, _, _)) = footprint(s, px, py, prep.extent2) else {
                            continue;
                        };
                        let a = (s.opacity * g).min(MAX_ALPHA);
                        if a < cutoff {
                            continue;
                        }
                        let wgt = a * t_acc;
                        c[0] += s.color[0] * wgt;
                        c[1] += s.color[1] * wgt;
                        c[2] += s.color[2] * wgt;
                        d += s.depth * wgt;
                        t_acc *= 1.0 - a;
                        used += 1;
                        if t_acc < min_t {
                            break;
                        }
                    }
                    let px_out = [
                        c[0] + t_acc * bg[0],
                        c[1] + t_acc * bg[1],
                        c[2] + t_acc * bg[2],
                        1.0 - t_acc,
                        d,
                    ];
                    (y * w + x, px_out)
                })
                .collect()
        })
        .collect();

    let mut out = RenderOutput {
        width: w,
        height: h,
        color: vec![0.0; w * h * 3],
        alpha: vec![0.0; w * h],
        depth: vec![0.0; w * h],
    };
    for tile in tile_results {
        for (i, v) in tile {
            out.color[3 * i..3 * i + 3].copy_from_slice(&v[..3]);
            out.alpha[i] = v[3];
            out.depth[i] = v[4];
        }
    }
    Ok(out)
}
