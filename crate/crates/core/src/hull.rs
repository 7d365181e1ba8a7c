//! Visual-hull carving from posed silhouettes and conversion of the carved
//! points into an initial Gaussian cloud.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussians::{logit, sh, Gaussian, GaussianCloud};
use crate::geometry::{Aabb, Camera, LogScale, Rotation, Z_NEAR};
use crate::imaging::RgbImage;

/// Binary foreground mask of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct Silhouette {
    pub camera: Camera,
    /// Row-major, `1` for foreground.
    pub mask: Vec<u8>,
}

impl Silhouette {
    pub fn new(camera: Camera, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != camera.width * camera.height {
            return Err(Error::ShapeMismatch(format!(
                "silhouette has {} pixels, camera is {}x{}",
                mask.len(),
                camera.width,
                camera.height
            )));
        }
        if mask.iter().any(|v| *v > 1) {
            return Err(Error::InvalidInput("silhouette values must be 0 or 1".into()));
        }
        Ok(Silhouette { camera, mask })
    }

    /// Binarizes 8-bit grayscale: foreground where the value exceeds 127.
    pub fn from_gray(camera: Camera, gray: &[u8]) -> Result<Self> {
        Silhouette::new(camera, gray.iter().map(|v| u8::from(*v > 127)).collect())
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|v| **v == 1).count()
    }

    /// Whether `p` is in front of the camera, projects inside the image and
    /// lands on a foreground pixel (nearest-pixel lookup).
    pub fn covers(&self, p: &Vector3<f64>) -> bool {
        match pixel_of(&self.camera, p) {
            Some((x, y)) => self.mask[y * self.camera.width + x] == 1,
            None => false,
        }
    }
}

/// Pixel containing the projection of `p`, if `p` is visible.
fn pixel_of(cam: &Camera, p: &Vector3<f64>) -> Option<(usize, usize)> {
    let (u, v) = image_point(cam, p)?;
    Some((u.floor() as usize, v.floor() as usize))
}

fn image_point(cam: &Camera, p: &Vector3<f64>) -> Option<(f64, f64)> {
    let c = cam.world_to_camera(p);
    if !(c.z > Z_NEAR) {
        return None;
    }
    let u = cam.fx * c.x / c.z + cam.cx;
    let v = cam.fy * c.y / c.z + cam.cy;
    let inside = u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64;
    inside.then_some((u, v))
}

/// Points kept by [`carve`], in sample order.
#[derive(Clone, Debug, PartialEq)]
pub struct Carved {
    pub points: Vec<Vector3<f64>>,
    pub samples: usize,
    /// Set when no sample survived.
    pub empty: bool,
}

impl Carved {
    pub fn retained_fraction(&self) -> f64 {
        self.points.len() as f64 / self.samples as f64
    }
}

/// Uniform samples in `bounds`, deterministic for a given seed.
pub fn uniform_samples(bounds: &Aabb, n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Vector3::from_fn(|i, _| bounds.min[i] + (bounds.max[i] - bounds.min[i]) * rng.gen::<f64>())
        })
        .collect()
}

/// Keeps the uniform samples that every silhouette covers.
pub fn carve(views: &[Silhouette], bounds: &Aabb, n_samples: usize, seed: u64) -> Result<Carved> {
    if views.is_empty() {
        return Err(Error::InvalidInput("carving needs at least one view".into()));
    }
    if n_samples == 0 {
        return Err(Error::InvalidInput("carving needs at least one sample".into()));
    }
    let samples = uniform_samples(bounds, n_samples, seed);
    let points: Vec<Vector3<f64>> = samples
        .into_par_iter()
        .filter(|p| views.iter().all(|s| s.covers(p)))
        .collect();
    let empty = points.is_empty();
    if empty {
        log::warn!("visual hull is empty after {n_samples} samples");
    }
    Ok(Carved {
        points,
        samples: n_samples,
        empty,
    })
}

/// Number of points that fall outside at least one silhouette.
pub fn containment_violations(points: &[Vector3<f64>], views: &[Silhouette]) -> usize {
    points
        .par_iter()
        .filter(|p| !views.iter().all(|s| s.covers(p)))
        .count()
}

/// A carved point with its averaged color.
#[derive(Clone, Debug, PartialEq)]
pub struct HullSample {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
}

/// Colored samples plus the number of points seen by no view.
#[derive(Clone, Debug, PartialEq)]
pub struct Colored {
    pub samples: Vec<HullSample>,
    pub excluded: usize,
}

/// Averages the bilinear color of every view in which each point is visible.
pub fn assign_colors(points: &[Vector3<f64>], views: &[(&Camera, &RgbImage)]) -> Result<Colored> {
    for (cam, img) in views {
        if cam.width != img.width || cam.height != img.height {
            return Err(Error::ShapeMismatch("image does not match its camera".into()));
        }
    }
    let colored: Vec<Option<HullSample>> = points
        .par_iter()
        .map(|p| {
            let mut sum = [0.0; 3];
            let mut n = 0usize;
            for (cam, img) in views {
                if let Some((u, v)) = image_point(cam, p) {
                    let c = img.bilinear(u, v);
                    (0..3).for_each(|k| sum[k] += c[k]);
                    n += 1;
                }
            }
            (n > 0).then(|| HullSample {
                position: *p,
                color: sum.map(|s| s / n as f64),
            })
        })
        .collect();
    let excluded = colored.iter().filter(|c| c.is_none()).count();
    if excluded > 0 {
        log::warn!("{excluded} hull points are visible in no view and were dropped");
    }
    Ok(Colored {
        samples: colored.into_iter().flatten().collect(),
        excluded,
    })
}

/// Mean distance from every point to its `k` nearest neighbors, using a
/// uniform hash grid.
pub fn knn_mean_distance(points: &[Vector3<f64>], k: usize) -> Result<Vec<f64>> {
    if k == 0 || points.len() < k + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least {} points for {k} neighbors, got {}",
            k + 1,
            points.len()
        )));
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max();
    let cell = if extent > 0.0 {
        extent / (points.len() as f64).cbrt()
    } else {
        1.0
    };
    let key = |p: &Vector3<f64>| -> [i64; 3] { std::array::from_fn(|i| ((p[i] - lo[i]) / cell).floor() as i64) };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let reach = (extent / cell).ceil() as i64 + 1;

    Ok(points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let home = key(p);
            // sorted k smallest squared distances
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            let mut r = 0i64;
            loop {
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                                continue;
                            }
                            let Some(list) = grid.get(&[home[0] + dx, home[1] + dy, home[2] + dz]) else {
                                continue;
                            };
                            for &j in list {
                                if j == i {
                                    continue;
                                }
                                let d = (points[j] - p).norm_squared();
                                if best.len() < k || d < best[k - 1] {
                                    let at = best.partition_point(|b| *b <= d);
                                    best.insert(at, d);
                                    best.truncate(k);
                                }
                            }
                        }
                    }
                }
                // everything outside the searched block is farther than r cells
                let bound = r as f64 * cell;
                if (best.len() == k && best[k - 1] <= bound * bound) || r > reach {
                    break;
                }
                r += 1;
            }
            best.iter().map(|d| d.sqrt()).sum::<f64>() / k as f64
        })
        .collect())
}

/// Initialization parameters for [`init_gaussians`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    pub opacity: f64,
    pub knn: usize,
    pub sh_degree: usize,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            opacity: 0.1,
            knn: 3,
            sh_degree: 0,
        }
    }
}

/// One isotropic Gaussian per sample, sized by its neighbor spacing.
pub fn init_gaussians(samples: &[HullSample], opts: &InitOptions) -> Result<GaussianCloud> {
    if !(opts.opacity > 0.0 && opts.opacity < 1.0) {
        return Err(Error::InvalidInput("initial opacity must lie in (0,1)".into()));
    }
    let positions: Vec<Vector3<f64>> = samples.iter().map(|s| s.position).collect();
    let dist = knn_mean_distance(&positions, opts.knn)?;
    // coincident points would otherwise get a zero scale
    let floor = dist.iter().copied().fold(0.0, f64::max).max(1.0) * 1e-9;
    let mut cloud = GaussianCloud::new(opts.sh_degree)?;
    let stride = cloud.sh_stride();
    for (s, d) in samples.iter().zip(dist) {
        let mut coeffs = vec![0.0; stride];
        for c in 0..3 {
            coeffs[c] = sh::rgb_to_dc(s.color[c]);
        }
        let ls = d.max(floor).ln();
        cloud.push(Gaussian {
            position: s.position,
            rotation: Rotation::IDENTITY,
            log_scale: LogScale([ls; 3]),
            opacity_logit: logit(opts.opacity),
            sh: coeffs,
        })?;
    }
    Ok(cloud)
}

/// Cloud of Gaussians at uniform random positions in `bounds`, the
/// no-hull baseline. Colors are mid-gray and scales follow the same
/// neighbor rule as the hull initialization.
pub fn random_init(bounds: &Aabb, n: usize, seed: u64, opts: &InitOptions) -> Result<GaussianCloud> {
    let samples: Vec<HullSample> = uniform_samples(bounds, n, seed)
        .into_iter()
        .map(|position| HullSample {
            position,
            color: [0.5; 3],
        })
        .collect();
    init_gaussians(&samples, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::{sigmoid, RenderSettings};
    use crate::raster::render;

    fn cam_at(eye: [f64; 3], up: [f64; 3], focal: f64, size: usize) -> Camera {
        Camera::look_at(Vector3::from(eye), Vector3::zeros(), Vector3::from(up), focal, size, size).unwrap()
    }

    fn ring(n: usize, size: usize) -> Vec<Camera> {
        (0..n)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / n as f64;
                cam_at([4.0 * a.cos(), 1.0, 4.0 * a.sin()], [0.0, 1.0, 0.0], size as f64, size)
            })
            .collect()
    }

    fn filled(cam: &Camera, v: u8) -> Silhouette {
        Silhouette::new(cam.clone(), vec![v; cam.width * cam.height]).unwrap()
    }

    /// Silhouette of the ball of radius `r` at the origin, by ray casting.
    fn ball_silhouette(cam: &Camera, r: f64) -> Silhouette {
        let o = cam.center();
        let mut mask = vec![0u8; cam.width * cam.height];
        for y in 0..cam.height {
            for x in 0..cam.width {
                let d = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
                let b = o.dot(&d);
                let disc = b * b - (o.norm_squared() - r * r);
                mask[y * cam.width + x] = u8::from(disc >= 0.0);
            }
        }
        Silhouette::new(cam.clone(), mask).unwrap()
    }

    #[test]
    fn white_and_black_silhouettes() {
        // small box well inside every frustum
        let bounds = Aabb::cube(0.3);
        let cams = ring(4, 32);
        let white: Vec<_> = cams.iter().map(|c| filled(c, 1)).collect();
        let all = carve(&white, &bounds, 2000, 1).unwrap();
        assert_eq!(all.points.len(), 2000);
        assert!(!all.empty);

        let mut one_black = white.clone();
        one_black[2] = filled(&cams[2], 0);
        let none = carve(&one_black, &bounds, 2000, 1).unwrap();
        assert!(none.points.is_empty() && none.empty);
    }

    #[test]
    fn points_outside_the_frustum_fail() {
        let cam = cam_at([0.0, 0.0, -4.0], [0.0, 1.0, 0.0], 32.0, 32);
        let s = filled(&cam, 1);
        assert!(s.covers(&Vector3::zeros()));
        assert!(!s.covers(&Vector3::new(100.0, 0.0, 0.0)));
        assert!(!s.covers(&Vector3::new(0.0, 0.0, -10.0)));
    }

    #[test]
    fn ball_hull_contains_ball_and_is_nested() {
        let bounds = Aabb::cube(1.0);
        let cams = ring(6, 48);
        let views: Vec<_> = cams.iter().map(|c| ball_silhouette(c, 0.5)).collect();
        let c3 = carve(&views[..3], &bounds, 20_000, 9).unwrap();
        let c6 = carve(&views, &bounds, 20_000, 9).unwrap();
        assert!(c6.points.iter().all(|p| c3.points.contains(p)));
        assert!(c6.points.len() <= c3.points.len());
        assert_eq!(containment_violations(&c6.points, &views), 0);
        // the hull contains the ball up to about one pixel (0.08 here) at the rim
        let inside_ball = uniform_samples(&bounds, 20_000, 9)
            .iter()
            .filter(|p| p.norm() < 0.4)
            .count();
        let kept_ball = c6.points.iter().filter(|p| p.norm() < 0.4).count();
        assert_eq!(inside_ball, kept_ball);
        assert_eq!(carve(&views, &bounds, 20_000, 9).unwrap(), c6);
    }

    #[test]
    fn colors_average_over_views() {
        let a = cam_at([0.0, 0.0, -4.0], [0.0, 1.0, 0.0], 16.0, 16);
        let b = cam_at([4.0, 0.0, 0.0], [0.0, 1.0, 0.0], 16.0, 16);
        let gray = RgbImage::filled(16, 16, [0.5; 3]);
        let c = assign_colors(&[Vector3::zeros()], &[(&a, &gray), (&b, &gray)]).unwrap();
        assert_eq!(c.samples[0].color, [0.5; 3]);

        let red = RgbImage::filled(16, 16, [1.0, 0.0, 0.0]);
        let blue = RgbImage::filled(16, 16, [0.0, 0.0, 1.0]);
        let pts = [Vector3::zeros(), Vector3::new(0.0, 0.0, -50.0)];
        let c = assign_colors(&pts, &[(&a, &red), (&b, &blue)]).unwrap();
        assert_eq!(c.samples[0].color, [0.5, 0.0, 0.5]);
        // the second point is behind camera a and outside b's frame
        assert_eq!(c.excluded, 1);
        assert_eq!(c.samples.len(), 1);
    }

    #[test]
    fn color_between_texels_is_interpolated() {
        // two-pixel image, black then white; the origin projects to u = 1.0
        let cam = Camera::new(
            2.0,
            2.0,
            1.0,
            0.5,
            2,
            1,
            nalgebra::Matrix3::identity(),
            Vector3::new(0.0, 0.0, 4.0),
        )
        .unwrap();
        let img = RgbImage::new(2, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let c = assign_colors(&[Vector3::zeros()], &[(&cam, &img)]).unwrap();
        assert!((c.samples[0].color[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn knn_matches_brute_force() {
        let pts = uniform_samples(&Aabb::cube(1.0), 500, 4);
        let fast = knn_mean_distance(&pts, 3).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let mut d: Vec<f64> = pts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (q - p).norm())
                .collect();
            d.sort_by(f64::total_cmp);
            let brute = (d[0] + d[1] + d[2]) / 3.0;
            assert!((brute - fast[i]).abs() < 1e-12);
        }
        assert!(knn_mean_distance(&pts[..3], 3).is_err());
    }

    #[test]
    fn grid_spacing_sets_scale() {
        let h = 0.05;
        let mut samples = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    samples.push(HullSample {
                        position: Vector3::new(i as f64, j as f64, k as f64) * h,
                        color: [0.2, 0.4, 0.6],
                    });
                }
            }
        }
        let cloud = init_gaussians(&samples, &InitOptions::default()).unwrap();
        for i in 0..cloud.len() {
            let ls = cloud.log_scale(i).0;
            assert!((ls[0] - h.ln()).abs() < 1e-9);
            assert_eq!(ls[0], ls[2]);
            assert!((cloud.opacity(i) - 0.1).abs() < 1e-9);
            assert_eq!(cloud.rotation(i), Rotation::IDENTITY);
            let rgb = crate::gaussians::eval_color(cloud.sh_coeffs(i), &Vector3::z(), 0).unwrap();
            assert!((rgb[1] - 0.4).abs() < 1e-12);
        }
        assert!((sigmoid(logit(0.1)) - 0.1).abs() < 1e-9);
        assert!(init_gaussians(&samples[..3], &InitOptions::default()).is_err());
    }

    #[test]
    fn initialized_cloud_renders_inside_silhouette() {
        let bounds = Aabb::cube(1.0);
        let cams = ring(6, 32);
        let views: Vec<_> = cams.iter().map(|c| ball_silhouette(c, 0.5)).collect();
        let carved = carve(&views, &bounds, 20_000, 2).unwrap();
        let img = RgbImage::filled(32, 32, [0.8, 0.3, 0.1]);
        let pairs: Vec<_> = cams.iter().map(|c| (c, &img)).collect();
        let colored = assign_colors(&carved.points, &pairs).unwrap();
        let cloud = init_gaussians(&colored.samples, &InitOptions::default()).unwrap();
        let out = render(&cloud, &cams[0], &RenderSettings::default()).unwrap();
        let inside = views[0]
            .mask
            .iter()
            .zip(&out.alpha)
            .filter(|(m, a)| **m == 1 && **a > 0.0)
            .count();
        assert!(inside > 0);
    }
}
