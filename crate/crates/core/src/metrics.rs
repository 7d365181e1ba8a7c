//! Image quality metrics on `[0, 1]` RGB images.

use crate::error::{Error, Result};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("mse: {} vs {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP)
    })
}

/// Mean SSIM of two interleaved RGB images.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    crate::losses::ssim(a, b, width, height, 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = vec![0.3; 300];
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b[..3]).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let a: Vec<f64> = (0..120).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let b: Vec<f64> = (0..120).map(|i| ((i * 53) % 97) as f64 / 96.0).collect();
        let mut s = 0.0;
        for i in 0..120 {
            s += (a[i] - b[i]).powi(2);
        }
        let direct = 10.0 * (120.0 / s).log10();
        assert!((psnr(&a, &b).unwrap() - direct).abs() < 1e-6);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a: Vec<f64> = (0..16 * 16 * 3).map(|i| (i % 7) as f64 / 7.0).collect();
        assert!((ssim(&a, &a, 16, 16).unwrap() - 1.0).abs() < 1e-12);
    }
}
