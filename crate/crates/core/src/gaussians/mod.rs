//! The scene representation: a set of anisotropic 3D Gaussians.

mod ply;
pub mod sh;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{covariance_from, rotation_from_unit, LogScale, Rotation};

pub use ply::{load_ply, save_ply, save_ply_with, PlyScalar};
pub use sh::{coeff_count, eval_color, rgb_to_dc};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One Gaussian's learnable parameters, used to build clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub rotation: Rotation,
    pub log_scale: LogScale,
    pub opacity_logit: f64,
    /// `[k][channel]`, `coeff_count(degree) * 3` values.
    pub sh: Vec<f64>,
}

/// Structure-of-arrays storage for N Gaussians.
///
/// Per-Gaussian strides: positions 3, rotations 4 (`w, x, y, z`),
/// log-scales 3, opacity logits 1, SH `3 * coeff_count(sh_degree)` laid out
/// `[k][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub sh_degree: usize,
    pub positions: Vec<f64>,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Result<Self> {
        sh::check_degree(sh_degree)?;
        Ok(GaussianCloud {
            sh_degree,
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn sh_stride(&self) -> usize {
        3 * coeff_count(self.sh_degree)
    }

    pub fn push(&mut self, g: Gaussian) -> Result<()> {
        if g.sh.len() != self.sh_stride() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} SH values, got {}",
                self.sh_stride(),
                g.sh.len()
            )));
        }
        self.positions.extend_from_slice(g.position.as_slice());
        self.rotations.extend_from_slice(&g.rotation.0);
        self.log_scales.extend_from_slice(&g.log_scale.0);
        self.opacity_logits.push(g.opacity_logit);
        self.sh.extend_from_slice(&g.sh);
        Ok(())
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.position(i),
            rotation: self.rotation(i),
            log_scale: self.log_scale(i),
            opacity_logit: self.opacity_logits[i],
            sh: self.sh_coeffs(i).to_vec(),
        }
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.positions[3 * i..3 * i + 3])
    }

    pub fn rotation(&self, i: usize) -> Rotation {
        let r = &self.rotations[4 * i..4 * i + 4];
        Rotation([r[0], r[1], r[2], r[3]])
    }

    pub fn log_scale(&self, i: usize) -> LogScale {
        let s = &self.log_scales[3 * i..3 * i + 3];
        LogScale([s[0], s[1], s[2]])
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn sh_coeffs(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[s * i..s * (i + 1)]
    }

    /// World-space covariance. Assumes `validate` passed.
    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        let r = self.unit_rotation(i);
        covariance_from(&rotation_from_unit(r[0], r[1], r[2], r[3]), &self.log_scale(i).sigmas())
    }

    pub(crate) fn unit_rotation(&self, i: usize) -> [f64; 4] {
        let q = &self.rotations[4 * i..4 * i + 4];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }

    /// Checks array shapes and that every value is finite, naming the first
    /// offending Gaussian.
    pub fn validate(&self) -> Result<()> {
        sh::check_degree(self.sh_degree)?;
        let n = self.len();
        if self.positions.len() != 3 * n
            || self.rotations.len() != 4 * n
            || self.log_scales.len() != 3 * n
            || self.sh.len() != self.sh_stride() * n
        {
            return Err(Error::ShapeMismatch("gaussian cloud arrays disagree on N".into()));
        }
        let s = self.sh_stride();
        for i in 0..n {
            let bad = |xs: &[f64]| xs.iter().any(|v| !v.is_finite());
            if bad(&self.positions[3 * i..3 * i + 3]) {
                return Err(Error::NonFinite { index: i, field: "position" });
            }
            let q = &self.rotations[4 * i..4 * i + 4];
            if bad(q) || q.iter().map(|v| v * v).sum::<f64>() < 1e-24 {
                return Err(Error::NonFinite { index: i, field: "rotation" });
            }
            let ls = &self.log_scales[3 * i..3 * i + 3];
            if bad(ls) || ls.iter().any(|v| !v.exp().is_finite() || v.exp() <= 0.0) {
                return Err(Error::NonFinite { index: i, field: "scale" });
            }
            if !self.opacity_logits[i].is_finite() {
                return Err(Error::NonFinite { index: i, field: "opacity" });
            }
            if bad(&self.sh[s * i..s * (i + 1)]) {
                return Err(Error::NonFinite { index: i, field: "color" });
            }
        }
        Ok(())
    }

    pub fn normalize_rotations(&mut self) {
        for q in self.rotations.chunks_exact_mut(4) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    /// Keeps the Gaussians for which `keep[i]` is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let s = self.sh_stride();
        let filter = retain_strided;
        filter(&mut self.positions, 3, keep);
        filter(&mut self.rotations, 4, keep);
        filter(&mut self.log_scales, 3, keep);
        filter(&mut self.opacity_logits, 1, keep);
        filter(&mut self.sh, s, keep);
    }
}

/// Keeps the `stride`-sized records of `v` whose `keep` flag is set.
pub(crate) fn retain_strided(v: &mut Vec<f64>, stride: usize, keep: &[bool]) {
    let mut w = 0;
    for (i, &k) in keep.iter().enumerate() {
        if k {
            v.copy_within(i * stride..(i + 1) * stride, w * stride);
            w += 1;
        }
    }
    v.truncate(w * stride);
}

/// Options controlling how a cloud is rasterized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// SH degree used for color; clamped to the cloud's stored degree.
    pub sh_degree: usize,
    /// Per-pixel contributions with weight below this are skipped.
    pub alpha_cutoff: f64,
    /// Splat footprint radius in standard deviations.
    pub extent_sigmas: f64,
    /// Stop blending a pixel after this many contributions.
    pub max_blend: Option<usize>,
    /// Stop blending a pixel once its transmittance drops below this.
    pub min_transmittance: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: [0.0; 3],
            sh_degree: 0,
            alpha_cutoff: 1.0 / 255.0,
            extent_sigmas: 3.0,
            max_blend: None,
            min_transmittance: 1e-4,
        }
    }
}

impl RenderSettings {
    /// Settings with every cutoff disabled: every visible Gaussian
    /// contributes to every pixel.
    pub fn exact() -> Self {
        RenderSettings {
            alpha_cutoff: 0.0,
            extent_sigmas: f64::INFINITY,
            min_transmittance: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_cutoff >= 0.0) || !(self.extent_sigmas > 0.0) || !(0.0..1.0).contains(&self.min_transmittance) {
            return Err(Error::InvalidInput("render cutoffs must be positive".into()));
        }
        if self.background.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("background must lie in [0,1]".into()));
        }
        sh::check_degree(self.sh_degree)
    }
}
