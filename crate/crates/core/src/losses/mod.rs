//! Training losses and their gradients with respect to the rendered buffers.

mod ssim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::OutputGradients;

pub use ssim::{ssim, C1, C2, WINDOW, WINDOW_SIGMA};

/// Clamp applied to rendered alpha inside the mask BCE.
pub const MASK_EPS: f64 = 1e-6;

/// A scalar loss and its gradient with respect to its first argument.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossTerm {
    fn zero(len: usize) -> Self {
        LossTerm {
            value: 0.0,
            grad: vec![0.0; len],
        }
    }
}

/// Weights of the composite objective
/// `(1 - ssim) L1 + ssim D-SSIM + mask L_mask + depth L_depth`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ssim: f64,
    pub mask: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ssim: 0.2,
            mask: 0.1,
            depth: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ssim) || !(self.mask >= 0.0) || !(self.depth >= 0.0) {
            return Err(Error::InvalidInput(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: empty input")));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss(img: &[f64], reference: &[f64]) -> Result<LossTerm> {
    same_len(img, reference, "l1")?;
    let n = img.len() as f64;
    let mut value = 0.0;
    let grad = img
        .iter()
        .zip(reference)
        .map(|(a, b)| {
            let d = a - b;
            value += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossTerm { value: value / n, grad })
}

/// `1 - SSIM` over interleaved RGB images.
pub fn dssim_loss(img: &[f64], reference: &[f64], width: usize, height: usize) -> Result<LossTerm> {
    let (s, g) = ssim::ssim_with_grad(img, reference, width, height, 3, true)?;
    Ok(LossTerm {
        value: 1.0 - s,
        grad: g.unwrap().into_iter().map(|v| -v).collect(),
    })
}

/// Binary cross-entropy between rendered alpha and a {0,1} silhouette.
pub fn mask_loss(alpha: &[f64], silhouette: &[f64]) -> Result<LossTerm> {
    same_len(alpha, silhouette, "mask")?;
    let n = alpha.len() as f64;
    let mut value = 0.0;
    let grad = alpha
        .iter()
        .zip(silhouette)
        .map(|(&m, &r)| {
            let mc = m.clamp(MASK_EPS, 1.0 - MASK_EPS);
            value -= r * mc.ln() + (1.0 - r) * (1.0 - mc).ln();
            if m > MASK_EPS && m < 1.0 - MASK_EPS {
                (-r / mc + (1.0 - r) / (1.0 - mc)) / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossTerm { value: value / n, grad })
}

/// Depth loss value, gradient and the affine alignment that was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthLoss {
    pub term: LossTerm,
    pub scale: f64,
    pub shift: f64,
}

/// Mean squared difference between rendered depth and a prior over the
/// valid pixels. With `align`, the rendered depth is first mapped through
/// the least-squares `scale * rendered + shift` that best fits the prior, so
/// only the shape of the depth map is supervised; the fit is treated as
/// constant when differentiating (exact, since the fit is optimal).
///
/// Fitting in this direction matters: fitting the prior to the rendering
/// instead would be minimized by any flat depth map.
pub fn depth_loss(
    rendered: &[f64],
    prior: &[f64],
    valid: Option<&[bool]>,
    align: bool,
) -> Result<DepthLoss> {
    same_len(rendered, prior, "depth")?;
    if let Some(v) = valid {
        if v.len() != rendered.len() {
            return Err(Error::ShapeMismatch("depth: valid mask size".into()));
        }
    }
    let is_valid = |i: usize| valid.map_or(true, |v| v[i]);
    let idx: Vec<usize> = (0..rendered.len()).filter(|&i| is_valid(i)).collect();
    if idx.is_empty() {
        return Err(Error::InvalidInput("depth loss: no valid pixels".into()));
    }
    let n = idx.len() as f64;

    let (scale, shift) = if align {
        let mx = idx.iter().map(|&i| rendered[i]).sum::<f64>() / n;
        let my = idx.iter().map(|&i| prior[i]).sum::<f64>() / n;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for &i in &idx {
            let dx = rendered[i] - mx;
            sxx += dx * dx;
            sxy += dx * (prior[i] - my);
        }
        if sxx > 0.0 {
            let a = sxy / sxx;
            (a, my - a * mx)
        } else {
            (0.0, my)
        }
    } else {
        (1.0, 0.0)
    };

    let mut term = LossTerm::zero(rendered.len());
    for &i in &idx {
        let r = scale * rendered[i] + shift - prior[i];
        term.value += r * r;
        term.grad[i] = 2.0 * scale * r / n;
    }
    term.value /= n;
    Ok(DepthLoss { term, scale, shift })
}

/// Individual loss terms of one training view. Absent terms count as zero.
#[derive(Clone, Debug, Default)]
pub struct LossParts {
    pub l1: Option<LossTerm>,
    pub dssim: Option<LossTerm>,
    pub mask: Option<LossTerm>,
    pub depth: Option<LossTerm>,
}

impl LossParts {
    pub fn values(&self) -> [f64; 4] {
        let v = |t: &Option<LossTerm>| t.as_ref().map_or(0.0, |t| t.value);
        [v(&self.l1), v(&self.dssim), v(&self.mask), v(&self.depth)]
    }
}

/// The weighted total and its gradients with respect to the render outputs.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub value: f64,
    pub grad: OutputGradients,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights, width: usize, height: usize) -> Result<TotalLoss> {
    weights.validate()?;
    let mut grad = OutputGradients::zeros(width, height);
    let mut value = 0.0;
    let mut add = |term: &Option<LossTerm>, w: f64, dst: &mut Vec<f64>| -> Result<()> {
        if let Some(t) = term {
            if t.grad.len() != dst.len() {
                return Err(Error::ShapeMismatch("loss gradient does not match the image".into()));
            }
            value += w * t.value;
            for (d, g) in dst.iter_mut().zip(&t.grad) {
                *d += w * g;
            }
        }
        Ok(())
    };
    add(&parts.l1, 1.0 - weights.ssim, &mut grad.color)?;
    add(&parts.dssim, weights.ssim, &mut grad.color)?;
    add(&parts.mask, weights.mask, &mut grad.alpha)?;
    add(&parts.depth, weights.depth, &mut grad.depth)?;
    Ok(TotalLoss { value, grad })
}

#[cfg(test)]
mod tests;
