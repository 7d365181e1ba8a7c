//! Real spherical-harmonic color evaluation, degrees 0 through 3.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Number of coefficients per color channel for `degree`.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn check_degree(degree: usize) -> Result<()> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::InvalidInput(format!(
            "SH degree {degree} outside 0..={MAX_SH_DEGREE}"
        )));
    }
    Ok(())
}

/// Basis values `Y_k(dir)` for k < coeff_count(degree), written into `out`.
/// When `jac` is given, also writes `dY_k/d dir` (treating dir as a free
/// 3-vector).
pub fn basis(
    degree: usize,
    dir: &Vector3<f64>,
    out: &mut [f64; 16],
    mut jac: Option<&mut [Vector3<f64>; 16]>,
) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = SH_C0;
    if let Some(j) = jac.as_deref_mut() {
        j.iter_mut().for_each(|v| *v = Vector3::zeros());
    }
    if degree == 0 {
        return;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if let Some(j) = jac.as_deref_mut() {
        j[1] = Vector3::new(0.0, -SH_C1, 0.0);
        j[2] = Vector3::new(0.0, 0.0, SH_C1);
        j[3] = Vector3::new(-SH_C1, 0.0, 0.0);
    }
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = SH_C2[0] * x * y;
    out[5] = SH_C2[1] * y * z;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * x * z;
    out[8] = SH_C2[4] * (xx - yy);
    if let Some(j) = jac.as_deref_mut() {
        j[4] = Vector3::new(SH_C2[0] * y, SH_C2[0] * x, 0.0);
        j[5] = Vector3::new(0.0, SH_C2[1] * z, SH_C2[1] * y);
        j[6] = Vector3::new(-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z);
        j[7] = Vector3::new(SH_C2[3] * z, 0.0, SH_C2[3] * x);
        j[8] = Vector3::new(2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0);
    }
    if degree == 2 {
        return;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * x * y * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    if let Some(j) = jac {
        j[9] = Vector3::new(
            SH_C3[0] * 6.0 * x * y,
            SH_C3[0] * (3.0 * xx - 3.0 * yy),
            0.0,
        );
        j[10] = Vector3::new(SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y);
        j[11] = Vector3::new(
            -2.0 * SH_C3[2] * x * y,
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * SH_C3[2] * y * z,
        );
        j[12] = Vector3::new(
            -6.0 * SH_C3[3] * x * z,
            -6.0 * SH_C3[3] * y * z,
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        );
        j[13] = Vector3::new(
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * SH_C3[4] * x * y,
            8.0 * SH_C3[4] * x * z,
        );
        j[14] = Vector3::new(
            2.0 * SH_C3[5] * x * z,
            -2.0 * SH_C3[5] * y * z,
            SH_C3[5] * (xx - yy),
        );
        j[15] = Vector3::new(
            SH_C3[6] * (3.0 * xx - 3.0 * yy),
            -6.0 * SH_C3[6] * x * y,
            0.0,
        );
    }
}

/// RGB color for one Gaussian. `coeffs` is laid out `[k][channel]` with
/// `coeff_count(degree)` rows. Colors carry a +0.5 offset so that all-zero
/// coefficients give mid gray, and are clamped to `[0, 1]`.
pub fn eval_color(coeffs: &[f64], view_dir: &Vector3<f64>, degree: usize) -> Result<[f64; 3]> {
    check_degree(degree)?;
    let n = coeff_count(degree);
    if coeffs.len() < n * 3 {
        return Err(Error::ShapeMismatch(format!(
            "need {} SH coefficients, got {}",
            n * 3,
            coeffs.len()
        )));
    }
    if degree > 0 && (view_dir.norm() - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidInput("view direction must be unit length".into()));
    }
    Ok(eval_raw(coeffs, view_dir, degree).map(|c| c.clamp(0.0, 1.0)))
}

/// Unclamped `sum_k Y_k c_k + 0.5`.
pub(crate) fn eval_raw(coeffs: &[f64], view_dir: &Vector3<f64>, degree: usize) -> [f64; 3] {
    let mut b = [0.0; 16];
    basis(degree, view_dir, &mut b, None);
    let mut rgb = [0.5; 3];
    for (k, y) in b.iter().enumerate().take(coeff_count(degree)) {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += y * coeffs[k * 3 + c];
        }
    }
    rgb
}

/// SH coefficient for a DC-only color that reproduces `rgb`.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}
