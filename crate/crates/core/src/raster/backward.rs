//! Analytic gradients of `render` with respect to every learnable field.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::{footprint, prepare, sh_degree_in_use, tile_pixels, Projected, MAX_ALPHA};
use crate::error::{Error, Result};
use crate::gaussians::{coeff_count, sh, GaussianCloud, RenderSettings};
use crate::geometry::Camera;

/// Gradients of a scalar loss with respect to the render outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGradients {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

impl OutputGradients {
    pub fn zeros(width: usize, height: usize) -> Self {
        OutputGradients {
            color: vec![0.0; width * height * 3],
            alpha: vec![0.0; width * height],
            depth: vec![0.0; width * height],
        }
    }
}

/// Gradients laid out exactly like the fields of [`GaussianCloud`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub positions: Vec<f64>,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros_like(cloud: &GaussianCloud) -> Self {
        ParamGradients {
            positions: vec![0.0; cloud.positions.len()],
            rotations: vec![0.0; cloud.rotations.len()],
            log_scales: vec![0.0; cloud.log_scales.len()],
            opacity_logits: vec![0.0; cloud.opacity_logits.len()],
            sh: vec![0.0; cloud.sh.len()],
        }
    }

    /// Keeps the entries of the Gaussians whose `keep` flag is set.
    pub fn retain_mask(&mut self, keep: &[bool], sh_stride: usize) {
        use crate::gaussians::retain_strided;
        retain_strided(&mut self.positions, 3, keep);
        retain_strided(&mut self.rotations, 4, keep);
        retain_strided(&mut self.log_scales, 3, keep);
        retain_strided(&mut self.opacity_logits, 1, keep);
        retain_strided(&mut self.sh, sh_stride, keep);
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.positions
            .iter()
            .chain(&self.rotations)
            .chain(&self.log_scales)
            .chain(&self.opacity_logits)
            .chain(&self.sh)
    }
}

// Screen-space gradient slots accumulated per (tile, splat) pair.
const G_U: usize = 0;
const G_V: usize = 1;
const G_QA: usize = 2;
const G_QB: usize = 3;
const G_QC: usize = 4;
const G_OPACITY: usize = 5;
const G_COLOR: usize = 6;
const G_DEPTH: usize = 9;
const SLOTS: usize = 10;

struct Contribution {
    k: usize,
    a: f64,
    t: f64,
    g: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

/// Back-propagates `upstream` through the forward map of [`super::render`]
/// with the same scene, camera and settings.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    settings: &RenderSettings,
    upstream: &OutputGradients,
) -> Result<ParamGradients> {
    let (w, h) = (cam.width, cam.height);
    if upstream.color.len() != w * h * 3 || upstream.alpha.len() != w * h || upstream.depth.len() != w * h {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradients do not match a {w}x{h} image"
        )));
    }
    let prep = prepare(cloud, cam, settings)?;
    let bg = settings.background;
    let max_blend = settings.max_blend.unwrap_or(usize::MAX);
    let cutoff = settings.alpha_cutoff;
    let min_t = settings.min_transmittance;

    let per_tile: Vec<Vec<[f64; SLOTS]>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &prep.tiles[t];
            let mut acc = vec![[0.0; SLOTS]; list.len()];
            if list.is_empty() {
                return acc;
            }
            let mut contribs: Vec<Contribution> = Vec::new();
            for (x, y) in tile_pixels(t, prep.tiles_x, w, h) {
                let i = y * w + x;
                let gc = [upstream.color[3 * i], upstream.color[3 * i + 1], upstream.color[3 * i + 2]];
                let ga = upstream.alpha[i];
                let gd = upstream.depth[i];
                if gc == [0.0; 3] && ga == 0.0 && gd == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                contribs.clear();
                let mut t_acc = 1.0;
                for (pos, &k) in list.iter().enumerate() {
                    if contribs.len() >= max_blend {
                        break;
                    }
                    let s = &prep.splats[k as usize];
                    if !s.covers(x, y) {
                        continue;
                    }
                    let Some((g, dx, dy)) = footprint(s, px, py, prep.extent2) else {
                        continue;
                    };
                    let raw = s.opacity * g;
                    let a = raw.min(MAX_ALPHA);
                    if a < cutoff {
                        continue;
                    }
                    contribs.push(Contribution {
                        k: pos,
                        a,
                        t: t_acc,
                        g,
                        dx,
                        dy,
                        clamped: raw > MAX_ALPHA,
                    });
                    t_acc *= 1.0 - a;
                    if t_acc < min_t {
                        break;
                    }
                }
                let t_final = t_acc;
                // color and depth still to be composited behind the current splat
                let mut rest_c = [t_final * bg[0], t_final * bg[1], t_final * bg[2]];
                let mut rest_d = 0.0;
                for c in contribs.iter().rev() {
                    let s = &prep.splats[list[c.k] as usize];
                    let slot = &mut acc[c.k];
                    let wgt = c.a * c.t;
                    for ch in 0..3 {
                        slot[G_COLOR + ch] += wgt * gc[ch];
                    }
                    slot[G_DEPTH] += wgt * gd;
                    let inv = 1.0 / (1.0 - c.a);
                    let mut g_a = ga * t_final * inv + gd * (s.depth * c.t - rest_d * inv);
                    for ch in 0..3 {
                        g_a += gc[ch] * (s.color[ch] * c.t - rest_c[ch] * inv);
                    }
                    for ch in 0..3 {
                        rest_c[ch] += s.color[ch] * wgt;
                    }
                    rest_d += s.depth * wgt;

                    if c.clamped {
                        continue;
                    }
                    slot[G_OPACITY] += g_a * c.g;
                    let g_power = g_a * s.opacity * c.g;
                    slot[G_U] += g_power * (s.conic[0] * c.dx + s.conic[1] * c.dy);
                    slot[G_V] += g_power * (s.conic[1] * c.dx + s.conic[2] * c.dy);
                    slot[G_QA] += g_power * (-0.5 * c.dx * c.dx);
                    slot[G_QB] += g_power * (-c.dx * c.dy);
                    slot[G_QC] += g_power * (-0.5 * c.dy * c.dy);
                }
            }
            acc
        })
        .collect();

    // fixed-order reduction into per-splat screen gradients
    let mut screen = vec![[0.0; SLOTS]; prep.splats.len()];
    for (list, acc) in prep.tiles.iter().zip(&per_tile) {
        for (&k, a) in list.iter().zip(acc) {
            let dst = &mut screen[k as usize];
            for s in 0..SLOTS {
                dst[s] += a[s];
            }
        }
    }

    let degree = sh_degree_in_use(cloud, settings);
    let per_gaussian: Vec<GaussianGrad> = prep
        .projected
        .par_iter()
        .zip(screen.par_iter())
        .map(|(p, g)| chain_to_params(cloud, cam, p, g, degree))
        .collect();

    let mut out = ParamGradients::zeros_like(cloud);
    let stride = cloud.sh_stride();
    for (p, g) in prep.projected.iter().zip(per_gaussian) {
        let i = p.index;
        out.positions[3 * i..3 * i + 3].copy_from_slice(g.position.as_slice());
        out.rotations[4 * i..4 * i + 4].copy_from_slice(&g.rotation);
        out.log_scales[3 * i..3 * i + 3].copy_from_slice(g.log_scale.as_slice());
        out.opacity_logits[i] = g.opacity_logit;
        out.sh[stride * i..stride * (i + 1)].copy_from_slice(&g.sh);
    }
    Ok(out)
}

struct GaussianGrad {
    position: Vector3<f64>,
    rotation: [f64; 4],
    log_scale: Vector3<f64>,
    opacity_logit: f64,
    sh: Vec<f64>,
}

fn chain_to_params(
    cloud: &GaussianCloud,
    cam: &Camera,
    p: &Projected,
    g: &[f64; SLOTS],
    degree: usize,
) -> GaussianGrad {
    let i = p.index;
    let stride = cloud.sh_stride();
    let mut g_sh = vec![0.0; stride];
    let mut g_mu = Vector3::zeros();

    // color: clamp to [0, 1] passes gradient only strictly inside
    let g_col: [f64; 3] = std::array::from_fn(|ch| {
        let raw = p.raw_color[ch];
        if (0.0..=1.0).contains(&raw) {
            g[G_COLOR + ch]
        } else {
            0.0
        }
    });
    let mut basis = [0.0; 16];
    let mut basis_jac = [Vector3::zeros(); 16];
    sh::basis(degree, &p.view_dir, &mut basis, (degree > 0).then_some(&mut basis_jac));
    let coeffs = cloud.sh_coeffs(i);
    let mut g_dir = Vector3::zeros();
    for k in 0..coeff_count(degree) {
        for ch in 0..3 {
            g_sh[k * 3 + ch] = basis[k] * g_col[ch];
            if degree > 0 {
                g_dir += basis_jac[k] * (coeffs[k * 3 + ch] * g_col[ch]);
            }
        }
    }
    if degree > 0 && p.view_dist > 0.0 {
        g_mu += (g_dir - p.view_dir * p.view_dir.dot(&g_dir)) / p.view_dist;
    }

    // opacity = sigmoid(logit)
    let g_logit = g[G_OPACITY] * p.opacity * (1.0 - p.opacity);

    // conic -> screen covariance: dL/dSigma' = -Q G_Q Q
    let q = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let g_q = Matrix2::new(g[G_QA], 0.5 * g[G_QB], 0.5 * g[G_QB], g[G_QC]);
    let g_cov2d = -(q * g_q * q);

    // Sigma' = J M J^T + floor, M = W Sigma W^T
    let j = &p.jac;
    let g_view = j.transpose() * g_cov2d * j;
    let g_jac = 2.0 * g_cov2d * j * p.view_cov;
    let w = &cam.rotation;
    let g_sigma = w.transpose() * g_view * w;

    // Sigma = R diag(s^2) R^T
    let s2 = p.sigmas.component_mul(&p.sigmas);
    let g_rot = 2.0 * g_sigma * p.rot * Matrix3::from_diagonal(&s2);
    let rgr = p.rot.transpose() * g_sigma * p.rot;
    let g_log_scale = Vector3::new(
        2.0 * s2.x * rgr[(0, 0)],
        2.0 * s2.y * rgr[(1, 1)],
        2.0 * s2.z * rgr[(2, 2)],
    );
    let g_unit_q = quat_matrix_backward(&p.unit_q, &g_rot);
    let raw_q = &cloud.rotations[4 * i..4 * i + 4];
    let norm = raw_q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = (0..4).map(|k| p.unit_q[k] * g_unit_q[k]).sum();
    let g_quat: [f64; 4] = std::array::from_fn(|k| (g_unit_q[k] - p.unit_q[k] * dot) / norm);

    // camera-space mean
    let pc = &p.p_cam;
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (fx, fy) = (cam.fx, cam.fy);
    let mut g_p = Vector3::new(
        g[G_U] * fx * iz,
        g[G_V] * fy * iz,
        -g[G_U] * fx * pc.x * iz2 - g[G_V] * fy * pc.y * iz2 + g[G_DEPTH],
    );
    g_p.x += g_jac[(0, 2)] * (-fx * iz2);
    g_p.y += g_jac[(1, 2)] * (-fy * iz2);
    g_p.z += g_jac[(0, 0)] * (-fx * iz2)
        + g_jac[(0, 2)] * (2.0 * fx * pc.x * iz3)
        + g_jac[(1, 1)] * (-fy * iz2)
        + g_jac[(1, 2)] * (2.0 * fy * pc.y * iz3);
    g_mu += w.transpose() * g_p;

    GaussianGrad {
        position: g_mu,
        rotation: g_quat,
        log_scale: g_log_scale,
        opacity_logit: g_logit,
        sh: g_sh,
    }
}

/// Gradient with respect to a unit quaternion `(w, x, y, z)` given the
/// gradient with respect to its rotation matrix.
fn quat_matrix_backward(q: &[f64; 4], gm: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| gm[(r, c)];
    [
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2)),
        2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2)),
        2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1)),
    ]
}
