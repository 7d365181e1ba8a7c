//! Relevance-aware latent editing: forward noising, the differential-noise
//! relevance map, thresholding, and masked blending of edited latents.
//!
//! A diffusion backend plugs in through [`Denoiser`]. Real backends run out
//! of process and exchange latents through `LTNT` files: magic `LTNT`, then
//! `u32` LE channels, height, width, then `C * H * W` `f32` LE values,
//! channel-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `C x H x W` latent tensor, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput("latent dimensions must be >= 1".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "latent {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("latent values must be finite".into()));
        }
        Ok(LatentGrid {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        LatentGrid::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn same_shape(&self, other: &LatentGrid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Cumulative signal fractions `alpha_bar_t`, indexed `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `alpha_bar` must be strictly decreasing within `(0, 1]`.
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::InvalidInput("noise schedule needs at least one step".into()));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidInput("alpha_bar must lie in (0, 1]".into()));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidInput("alpha_bar must be strictly decreasing".into()));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    fn from_betas(betas: impl Iterator<Item = f64>) -> Result<Self> {
        let mut acc = 1.0;
        NoiseSchedule::new(
            betas
                .map(|b| {
                    acc *= 1.0 - b;
                    acc
                })
                .collect(),
        )
    }

    /// Betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        NoiseSchedule::from_betas((0..steps).map(|i| lerp(beta_start, beta_end, i, steps)))
    }

    /// Betas whose square roots are spaced linearly, as used by latent
    /// diffusion models.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        NoiseSchedule::from_betas((0..steps).map(|i| lerp(a, b, i, steps).powi(2)))
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// `alpha_bar_t` for `t` in `1..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidInput(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(self.alpha_bar[t - 1])
    }

    /// Default noising step for relevance estimation, `round(0.6 T)`.
    pub fn default_step(&self) -> usize {
        ((0.6 * self.steps() as f64).round() as usize).max(1)
    }
}

impl Default for NoiseSchedule {
    /// 1000 scaled-linear steps from 0.00085 to 0.012.
    fn default() -> Self {
        NoiseSchedule::scaled_linear(1000, 0.00085, 0.012).unwrap()
    }
}

fn lerp(a: f64, b: f64, i: usize, n: usize) -> f64 {
    if n <= 1 {
        a
    } else {
        a + (b - a) * i as f64 / (n - 1) as f64
    }
}

/// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(z0: &LatentGrid, t: usize, eps: &LatentGrid, sched: &NoiseSchedule) -> Result<LatentGrid> {
    z0.same_shape(eps, "forward_noise")?;
    let ab = sched.alpha_bar(t)?;
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data.iter().zip(&eps.data).map(|(z, e)| s * z + n * e).collect();
    LatentGrid::new(z0.channels, z0.height, z0.width, data)
}

/// Image conditioning handed to the backend.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCondition {
    pub latent: Option<LatentGrid>,
    pub guidance: f64,
}

impl Default for ImageCondition {
    fn default() -> Self {
        ImageCondition {
            latent: None,
            guidance: 1.5,
        }
    }
}

/// Text conditioning handed to the backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextCondition {
    pub prompt: String,
    pub guidance: f64,
}

impl TextCondition {
    pub fn new(prompt: impl Into<String>) -> Self {
        TextCondition {
            prompt: prompt.into(),
            guidance: 7.5,
        }
    }
}

/// Noise predictor of a latent diffusion model. Must return a grid of the
/// same shape as `z_t` and be deterministic for fixed inputs.
pub trait Denoiser {
    fn predict_noise(
        &self,
        z_t: &LatentGrid,
        t: usize,
        image: &ImageCondition,
        text: Option<&TextCondition>,
    ) -> Result<LatentGrid>;
}

/// Half-open latent-cell rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Test double: predicts `baseline` everywhere, plus `amplitude` inside
/// `region` when a text condition is present.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    pub region: Region,
    pub amplitude: f64,
    pub baseline: f64,
}

impl Denoiser for ToyDenoiser {
    fn predict_noise(
        &self,
        z_t: &LatentGrid,
        _t: usize,
        _image: &ImageCondition,
        text: Option<&TextCondition>,
    ) -> Result<LatentGrid> {
        let (c, h, w) = z_t.shape();
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let bump = if text.is_some() && self.region.contains(x, y) {
                        self.amplitude
                    } else {
                        0.0
                    };
                    data.push(self.baseline + bump);
                }
            }
        }
        LatentGrid::new(c, h, w, data)
    }
}

/// Replays two predictions computed offline by an external backend.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedDenoiser {
    pub with_text: LatentGrid,
    pub without_text: LatentGrid,
}

impl PrecomputedDenoiser {
    pub fn load(with_text: impl AsRef<Path>, without_text: impl AsRef<Path>) -> Result<Self> {
        Ok(PrecomputedDenoiser {
            with_text: read_latent(with_text)?,
            without_text: read_latent(without_text)?,
        })
    }
}

impl Denoiser for PrecomputedDenoiser {
    fn predict_noise(
        &self,
        z_t: &LatentGrid,
        _t: usize,
        _image: &ImageCondition,
        text: Option<&TextCondition>,
    ) -> Result<LatentGrid> {
        let out = if text.is_some() {
            &self.with_text
        } else {
            &self.without_text
        };
        z_t.same_shape(out, "precomputed prediction")?;
        Ok(out.clone())
    }
}

/// Spatial map with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Channel mean of `|eps(text) - eps(null)|`, min-max normalized over the
/// grid. A constant map normalizes to zeros.
pub fn relevance_from_predictions(with_text: &LatentGrid, without_text: &LatentGrid) -> Result<RelevanceMap> {
    with_text.same_shape(without_text, "relevance")?;
    let (c, h, w) = with_text.shape();
    let mut values = vec![0.0; h * w];
    for ch in 0..c {
        for (i, v) in values.iter_mut().enumerate() {
            let k = ch * h * w + i;
            *v += (with_text.data[k] - without_text.data[k]).abs();
        }
    }
    values.iter_mut().for_each(|v| *v /= c as f64);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut values {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
    Ok(RelevanceMap {
        height: h,
        width: w,
        values,
    })
}

/// Queries the denoiser with and without the text condition at `z_t`.
pub fn relevance_map(
    denoiser: &dyn Denoiser,
    z_t: &LatentGrid,
    t: usize,
    image: &ImageCondition,
    text: &TextCondition,
) -> Result<RelevanceMap> {
    let with_text = denoiser.predict_noise(z_t, t, image, Some(text))?;
    let without_text = denoiser.predict_noise(z_t, t, image, None)?;
    if with_text.shape() != z_t.shape() || without_text.shape() != z_t.shape() {
        return Err(Error::ShapeMismatch("denoiser changed the latent shape".into()));
    }
    relevance_from_predictions(&with_text, &without_text)
}

/// Binary `{0, 1}` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }

    /// Intersection over union with another mask of the same size.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::ShapeMismatch("iou: mask sizes differ".into()));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.values.iter().zip(&other.values) {
            inter += usize::from(*a == 1 && *b == 1);
            union += usize::from(*a == 1 || *b == 1);
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}

/// Default relevance threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.35;

/// `1` where the (optionally 3x3-blurred) relevance exceeds `tau`.
pub fn threshold_mask(r: &RelevanceMap, tau: f64, blur: bool) -> Mask {
    let values = if blur { blur3(r) } else { r.values.clone() };
    Mask {
        height: r.height,
        width: r.width,
        values: values.iter().map(|v| u8::from(*v > tau)).collect(),
    }
}

// separable [1 2 1] / 4 kernel with clamped borders
fn blur3(r: &RelevanceMap) -> Vec<f64> {
    let (h, w) = (r.height, r.width);
    let at = |v: &[f64], x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        v[y * w + x]
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            tmp[y as usize * w + x as usize] =
                0.25 * at(&r.values, x - 1, y) + 0.5 * at(&r.values, x, y) + 0.25 * at(&r.values, x + 1, y);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] = 0.25 * at(&tmp, x, y - 1) + 0.5 * at(&tmp, x, y) + 0.25 * at(&tmp, x, y + 1);
        }
    }
    out
}

/// Nearest-neighbor resampling to `width x height`, sampling at cell centers.
pub fn resample_mask(mask: &Mask, width: usize, height: usize) -> Result<Mask> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("mask size must be >= 1".into()));
    }
    let src = |i: usize, n: usize, m: usize| (((i as f64 + 0.5) * m as f64 / n as f64) as usize).min(m - 1);
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = src(y, height, mask.height);
        for x in 0..width {
            values.push(mask.values[sy * mask.width + src(x, width, mask.width)]);
        }
    }
    Ok(Mask {
        height,
        width,
        values,
    })
}

/// Latent-resolution mask to pixel resolution.
pub fn upsample_mask(mask: &Mask, width: usize, height: usize) -> Result<Mask> {
    resample_mask(mask, width, height)
}

/// `M z_edit + (1 - M) z_orig` with `M` broadcast over channels. Cells with
/// `M = 0` copy `z_orig` bit for bit.
pub fn blend_latents(z_edit: &LatentGrid, z_orig: &LatentGrid, mask: &Mask) -> Result<LatentGrid> {
    z_edit.same_shape(z_orig, "blend")?;
    let (c, h, w) = z_orig.shape();
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} does not match latent {h}x{w}",
            mask.width, mask.height
        )));
    }
    let mut data = z_orig.data.clone();
    for ch in 0..c {
        for (i, m) in mask.values.iter().enumerate() {
            if *m == 1 {
                let k = ch * h * w + i;
                data[k] = z_edit.data[k];
            }
        }
    }
    LatentGrid::new(c, h, w, data)
}

const LATENT_MAGIC: &[u8; 4] = b"LTNT";

pub fn write_latent(path: impl AsRef<Path>, z: &LatentGrid) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + 4 * z.data.len());
    buf.extend_from_slice(LATENT_MAGIC);
    for d in [z.channels, z.height, z.width] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &z.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<LatentGrid> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..4] != LATENT_MAGIC {
        return Err(Error::format(path, "missing LTNT header"));
    }
    let dim = |k: usize| u32::from_le_bytes(buf[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if buf.len() != 16 + 4 * c * h * w {
        return Err(Error::format(path, format!("expected {} latent values", c * h * w)));
    }
    let data = buf[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    LatentGrid::new(c, h, w, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a mask as an 8-bit PNG with values 0 and 255.
pub fn save_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let v: Vec<f64> = mask.values.iter().map(|m| *m as f64).collect();
    crate::imaging::save_png_gray(&v, mask.width, mask.height, path)
}
