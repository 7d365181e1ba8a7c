use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_image(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// Direct two-dimensional SSIM with centered second moments.
fn ssim_oracle(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let half = 5i64;
    let weight = |d: i64| (-(d * d) as f64 / (2.0 * 1.5 * 1.5)).exp();
    let norm: f64 = (-half..=half).map(weight).sum::<f64>().powi(2);
    let mut total = 0.0;
    let mut count = 0;
    for c in 0..3 {
        for cy in 5..h - 5 {
            for cx in 5..w - 5 {
                let at = |img: &[f64], dx: i64, dy: i64| {
                    img[((cy as i64 + dy) as usize * w + (cx as i64 + dx) as usize) * 3 + c]
                };
                let (mut mx, mut my) = (0.0, 0.0);
                for dy in -half..=half {
                    for dx in -half..=half {
                        let k = weight(dx) * weight(dy) / norm;
                        mx += k * at(a, dx, dy);
                        my += k * at(b, dx, dy);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for dy in -half..=half {
                    for dx in -half..=half {
                        let k = weight(dx) * weight(dy) / norm;
                        let (p, q) = (at(a, dx, dy) - mx, at(b, dx, dy) - my);
                        vx += k * p * p;
                        vy += k * q * q;
                        cxy += k * p * q;
                    }
                }
                total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
                count += 1;
            }
        }
    }
    total / count as f64
}

fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], step: f64) {
    for k in 0..x.len() {
        let mut p = x.to_vec();
        p[k] += step;
        let mut m = x.to_vec();
        m[k] -= step;
        let fd = (f(&p) - f(&m)) / (2.0 * step);
        let tol = 1e-3 * fd.abs().max(grad[k].abs()) + 1e-8;
        assert!((fd - grad[k]).abs() <= tol, "index {k}: analytic {} vs fd {fd}", grad[k]);
    }
}

#[test]
fn l1_examples() {
    let a = vec![0.1, 0.5, 0.9, 0.3];
    assert_eq!(l1_loss(&a, &a).unwrap().value, 0.0);
    let b: Vec<f64> = a.iter().map(|v| v + 0.25).collect();
    assert_relative_eq!(l1_loss(&b, &a).unwrap().value, 0.25, epsilon = 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_image(&mut rng, 300);
    let y = random_image(&mut rng, 300);
    let oracle = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / 300.0;
    let t = l1_loss(&x, &y).unwrap();
    assert!((t.value - oracle).abs() < 1e-7);
    fd_check(|v| l1_loss(v, &y).unwrap().value, &x, &t.grad, 1e-6);
    assert!(l1_loss(&x, &y[..10]).is_err());
}

#[test]
fn ssim_identities_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, h) = (19, 14);
    let x = random_image(&mut rng, w * h * 3);
    let y: Vec<f64> = x.iter().map(|v| (0.7 * v + 0.2 * rng.gen_range(0.0..1.0f64)).min(1.0)).collect();
    assert_eq!(dssim_loss(&x, &x, w, h).unwrap().value, 0.0);
    let s = ssim(&x, &y, w, h, 3).unwrap();
    assert!((s - ssim_oracle(&x, &y, w, h)).abs() < 1e-10);
    let swapped = dssim_loss(&y, &x, w, h).unwrap().value;
    assert!((swapped - dssim_loss(&x, &y, w, h).unwrap().value).abs() < 1e-9);
}

#[test]
fn inverted_checkerboard_is_dissimilar() {
    let (w, h) = (16, 16);
    let mut a = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let v = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
            a[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(v);
        }
    }
    let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
    let d = dssim_loss(&a, &b, w, h).unwrap().value;
    assert!(d > 0.5, "{d}");
    assert!((1.0 - ssim_oracle(&a, &b, w, h) - d).abs() < 1e-10);
}

#[test]
fn ssim_rejects_small_images() {
    let a = vec![0.5; 10 * 10 * 3];
    assert!(matches!(dssim_loss(&a, &a, 10, 10), Err(Error::InvalidInput(_))));
}

#[test]
fn dssim_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (w, h) = (16, 16);
    let x = random_image(&mut rng, w * h * 3);
    let y = random_image(&mut rng, w * h * 3);
    let t = dssim_loss(&x, &y, w, h).unwrap();
    fd_check(|v| dssim_loss(v, &y, w, h).unwrap().value, &x, &t.grad, 1e-5);
}

#[test]
fn mask_examples() {
    let r = vec![0.0, 1.0, 1.0, 0.0];
    let m: Vec<f64> = r.iter().map(|v: &f64| v.clamp(MASK_EPS, 1.0 - MASK_EPS)).collect();
    assert!(mask_loss(&m, &r).unwrap().value <= 1e-5);
    let half = vec![0.5; 4];
    assert_relative_eq!(mask_loss(&half, &r).unwrap().value, 2f64.ln(), epsilon = 1e-12);
    assert_relative_eq!(mask_loss(&half, &[0.0; 4]).unwrap().value, 2f64.ln(), epsilon = 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a: Vec<f64> = (0..200).map(|_| rng.gen_range(0.01..0.99)).collect();
    let s: Vec<f64> = (0..200).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let oracle = -a
        .iter()
        .zip(&s)
        .map(|(m, r)| if *r == 1.0 { m.ln() } else { (1.0 - m).ln() })
        .sum::<f64>()
        / 200.0;
    let t = mask_loss(&a, &s).unwrap();
    assert!((t.value - oracle).abs() < 1e-7);
    fd_check(|v| mask_loss(v, &s).unwrap().value, &a, &t.grad, 1e-6);
}

#[test]
fn depth_examples() {
    let prior = vec![1.0, 2.5, 3.0, 0.5, 4.0];
    assert_eq!(depth_loss(&prior, &prior, None, false).unwrap().term.value, 0.0);
    let shifted: Vec<f64> = prior.iter().map(|v| v + 0.3).collect();
    assert_relative_eq!(depth_loss(&shifted, &prior, None, false).unwrap().term.value, 0.09, epsilon = 1e-12);
    let affine: Vec<f64> = prior.iter().map(|v| 2.0 * v + 1.0).collect();
    let d = depth_loss(&affine, &prior, None, true).unwrap();
    assert!(d.term.value < 1e-9);
    assert_relative_eq!(d.scale, 0.5, epsilon = 1e-12);
    assert_relative_eq!(d.shift, -0.5, epsilon = 1e-12);
    // a flat rendering is not a minimizer: the loss is the prior's variance
    let flat = vec![2.0; 5];
    let mean = prior.iter().sum::<f64>() / 5.0;
    let var = prior.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / 5.0;
    assert_relative_eq!(depth_loss(&flat, &prior, None, true).unwrap().term.value, var, epsilon = 1e-12);

    let none = [false; 5];
    assert!(depth_loss(&prior, &prior, Some(&none), true).is_err());
}

#[test]
fn depth_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = random_image(&mut rng, 64);
    let p = random_image(&mut rng, 64);
    let valid: Vec<bool> = (0..64).map(|i| i % 5 != 0).collect();
    for align in [false, true] {
        let t = depth_loss(&d, &p, Some(&valid), align).unwrap();
        fd_check(|v| depth_loss(v, &p, Some(&valid), align).unwrap().term.value, &d, &t.term.grad, 1e-6);
        for (i, g) in t.term.grad.iter().enumerate() {
            if !valid[i] {
                assert_eq!(*g, 0.0);
            }
        }
    }
}

fn term(value: f64, grad: Vec<f64>) -> Option<LossTerm> {
    Some(LossTerm { value, grad })
}

#[test]
fn total_loss_weighting() {
    let w = LossWeights::default();
    let (width, height) = (2, 1);
    let zeros = LossParts::default();
    assert_eq!(total_loss(&zeros, &w, width, height).unwrap().value, 0.0);

    let only_l1 = LossParts {
        l1: term(1.0, vec![1.0; 6]),
        ..Default::default()
    };
    let t = total_loss(&only_l1, &w, width, height).unwrap();
    assert!((t.value - 0.8).abs() < 1e-12);
    assert!(t.grad.color.iter().all(|g| (g - 0.8).abs() < 1e-12));

    let parts = LossParts {
        l1: term(0.3, vec![0.1; 6]),
        dssim: term(0.4, vec![-0.2; 6]),
        mask: term(0.5, vec![0.3; 2]),
        depth: term(0.6, vec![0.7; 2]),
    };
    let doubled = LossParts {
        l1: term(0.6, vec![0.2; 6]),
        dssim: term(0.8, vec![-0.4; 6]),
        mask: term(1.0, vec![0.6; 2]),
        depth: term(1.2, vec![1.4; 2]),
    };
    let a = total_loss(&parts, &w, width, height).unwrap();
    let b = total_loss(&doubled, &w, width, height).unwrap();
    assert!((2.0 * a.value - b.value).abs() < 1e-12);
    assert!((a.value - (0.8 * 0.3 + 0.2 * 0.4 + 0.1 * 0.5 + 0.05 * 0.6)).abs() < 1e-12);
    assert!((a.grad.depth[0] - 0.05 * 0.7).abs() < 1e-12);
}

proptest! {
    #[test]
    fn losses_are_non_negative(v in proptest::collection::vec((0.0..1.0f64, 0.0..1.0f64), 121 * 3..=121 * 3)) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        prop_assert!(l1_loss(&a, &b).unwrap().value >= 0.0);
        prop_assert!(dssim_loss(&a, &b, 11, 11).unwrap().value >= 0.0);
        let s: Vec<f64> = b.iter().map(|x| x.round()).collect();
        prop_assert!(mask_loss(&a, &s).unwrap().value >= 0.0);
        prop_assert!(depth_loss(&a, &b, None, true).unwrap().term.value >= 0.0);
    }
}
