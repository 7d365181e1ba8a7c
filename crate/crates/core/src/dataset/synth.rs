//! Ray-traced synthetic scenes with exact silhouettes and depth.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{c2w_gl, load_blender, write_depth, BoundsJson, Dataset, FrameJson, Split, TransformsJson, View};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Camera};
use crate::imaging::{self, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: [f64; 3],
    },
    /// Axis-aligned box.
    Box {
        center: [f64; 3],
        half_size: [f64; 3],
        color: [f64; 3],
    },
}

impl Primitive {
    fn color(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { color, .. } | Primitive::Box { color, .. } => *color,
        }
    }

    fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Primitive::Sphere { center, radius, .. } => (center.map(|c| c - radius), center.map(|c| c + radius)),
            Primitive::Box { center, half_size, .. } => (
                std::array::from_fn(|i| center[i] - half_size[i]),
                std::array::from_fn(|i| center[i] + half_size[i]),
            ),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Sphere { radius, .. } => *radius > 0.0,
            Primitive::Box { half_size, .. } => half_size.iter().all(|h| *h > 0.0),
        };
        let color_ok = self.color().iter().all(|c| (0.0..=1.0).contains(c));
        if !ok || !color_ok {
            return Err(Error::InvalidInput(format!("invalid primitive {self:?}")));
        }
        Ok(())
    }

    /// Nearest hit distance along a unit ray and the outward normal there.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let c = Vector3::from(*center);
                let oc = o - c;
                let b = oc.dot(d);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > 0.0 { -b - s } else { -b + s };
                (t > 0.0).then(|| (t, (o + d * t - c) / *radius))
            }
            Primitive::Box { center, half_size, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                let mut sign = 1.0;
                for i in 0..3 {
                    let lo = center[i] - half_size[i];
                    let hi = center[i] + half_size[i];
                    if d[i].abs() < 1e-15 {
                        if o[i] < lo || o[i] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((lo - o[i]) / d[i], (hi - o[i]) / d[i]);
                    let (near, far) = if a < b { (a, b) } else { (b, a) };
                    if near > t0 {
                        t0 = near;
                        axis = i;
                        sign = -d[i].signum();
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis] = sign;
                Some((t0, n))
            }
        }
    }
}

/// Cameras on a circle around the origin, looking at it with world +y up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRing {
    pub count: usize,
    /// Extra held-out views placed halfway between consecutive ring cameras.
    pub heldout: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    /// Per-camera azimuth jitter drawn from the scene seed.
    pub jitter_deg: f64,
}

impl Default for CameraRing {
    fn default() -> Self {
        CameraRing {
            count: 6,
            heldout: 2,
            radius: 4.0,
            elevation_deg: 20.0,
            fov_deg: 30.0,
            jitter_deg: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub ring: CameraRing,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub background: [f64; 3],
    /// Direction toward the light, world space.
    pub light: [f64; 3],
    pub ambient: f64,
    /// Color samples per pixel along each axis.
    pub supersample: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::sphere_and_box()
    }
}

impl SceneSpec {
    fn base(primitives: Vec<Primitive>) -> Self {
        SceneSpec {
            primitives,
            ring: CameraRing::default(),
            width: 128,
            height: 128,
            seed: 0,
            background: [1.0; 3],
            light: [0.4, 0.8, 0.45],
            ambient: 0.35,
            supersample: 3,
        }
    }

    /// A sphere of radius 0.5 at the origin.
    pub fn sphere() -> Self {
        SceneSpec::base(vec![Primitive::Sphere {
            center: [0.0; 3],
            radius: 0.5,
            color: [0.85, 0.35, 0.25],
        }])
    }

    /// A sphere next to a box; the two leave concave gaps that silhouettes
    /// alone cannot carve away.
    pub fn sphere_and_box() -> Self {
        SceneSpec::base(vec![
            Primitive::Sphere {
                center: [0.28, 0.0, 0.1],
                radius: 0.42,
                color: [0.85, 0.35, 0.25],
            },
            Primitive::Box {
                center: [-0.38, -0.12, -0.18],
                half_size: [0.26, 0.3, 0.26],
                color: [0.2, 0.5, 0.8],
            },
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidInput("scene needs at least one primitive".into()));
        }
        self.primitives.iter().try_for_each(Primitive::validate)?;
        if self.ring.count < 2 {
            return Err(Error::InvalidInput("scene needs at least two cameras".into()));
        }
        if self.width == 0 || self.height == 0 || self.supersample == 0 {
            return Err(Error::InvalidInput("image size and supersampling must be >= 1".into()));
        }
        if !(self.ring.fov_deg > 0.0 && self.ring.fov_deg < 180.0) || !(self.ring.radius > 0.0) {
            return Err(Error::InvalidInput("invalid camera ring".into()));
        }
        Ok(())
    }

    /// Origin-centered cube covering what every ring camera sees around its
    /// target, grown if needed to contain all primitives. It carries no
    /// knowledge of the object's extent beyond that.
    pub fn bounds(&self) -> Aabb {
        let view_half = self.ring.radius * (0.5 * self.ring.fov_deg.to_radians()).tan();
        let object_half = self
            .primitives
            .iter()
            .map(|p| {
                let (a, b) = p.aabb();
                a.iter().chain(&b).fold(0.0f64, |m, v| m.max(v.abs()))
            })
            .fold(0.0, f64::max);
        Aabb::cube(view_half.max(object_half))
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.ring.fov_deg.to_radians()).tan()
    }

    /// Training cameras followed by the held-out cameras.
    pub fn cameras(&self) -> Result<Vec<(Camera, Split)>> {
        let r = &self.ring;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let step = TAU / r.count as f64;
        let el = r.elevation_deg.to_radians();
        let make = |az: f64| {
            let eye = Vector3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin()) * r.radius;
            Camera::look_at(eye, Vector3::zeros(), Vector3::y(), self.focal(), self.width, self.height)
        };
        let mut cams = Vec::new();
        for i in 0..r.count {
            let jitter = if r.jitter_deg > 0.0 {
                rng.gen_range(-r.jitter_deg..=r.jitter_deg).to_radians()
            } else {
                0.0
            };
            cams.push((make(i as f64 * step + jitter)?, Split::Train));
        }
        for i in 0..r.heldout {
            cams.push((make((i as f64 + 0.5) * step)?, Split::Heldout));
        }
        Ok(cams)
    }

    fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize, Vector3<f64>)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(o, d).map(|(t, n)| (t, i, n)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    fn shade(&self, hit: Option<(f64, usize, Vector3<f64>)>) -> [f64; 3] {
        match hit {
            None => self.background,
            Some((_, i, n)) => {
                let l = Vector3::from(self.light).normalize();
                let k = self.ambient + (1.0 - self.ambient) * n.dot(&l).max(0.0);
                self.primitives[i].color().map(|c| (c * k).min(1.0))
            }
        }
    }

    /// Renders one view: color, `{0,1}` silhouette and camera-space depth
    /// (zero on background). Silhouette and depth use the pixel-center ray.
    pub fn render_view(&self, cam: &Camera) -> (RgbImage, Vec<u8>, Vec<f64>) {
        let (w, h) = (cam.width, cam.height);
        let o = cam.center();
        let forward = cam.rotation.row(2).transpose();
        let s = self.supersample;
        let mut color = Vec::with_capacity(w * h * 3);
        let mut mask = vec![0u8; w * h];
        let mut depth = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let d = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
                if let Some((t, _, _)) = self.trace(&o, &d) {
                    mask[y * w + x] = 1;
                    depth[y * w + x] = t * d.dot(&forward);
                }
                let mut acc = [0.0; 3];
                for sy in 0..s {
                    for sx in 0..s {
                        let u = x as f64 + (sx as f64 + 0.5) / s as f64;
                        let v = y as f64 + (sy as f64 + 0.5) / s as f64;
                        let d = cam.ray_direction(u, v);
                        let c = self.shade(self.trace(&o, &d));
                        (0..3).for_each(|k| acc[k] += c[k]);
                    }
                }
                color.extend(acc.map(|a| a / (s * s) as f64));
            }
        }
        (RgbImage { width: w, height: h, data: color }, mask, depth)
    }

    /// All views in memory, without quantization.
    pub fn views(&self) -> Result<Vec<View>> {
        self.validate()?;
        let mut counters = [0usize; 2];
        self.cameras()?
            .into_iter()
            .map(|(camera, split)| {
                let (image, mask, depth) = self.render_view(&camera);
                let k = &mut counters[split as usize];
                let name = format!("{}/r_{}", split_dir(split), *k);
                *k += 1;
                Ok(View {
                    name,
                    camera,
                    image,
                    mask: Some(mask),
                    depth: Some(depth),
                    split,
                })
            })
            .collect()
    }
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Heldout => "heldout",
    }
}

/// Writes the scene as a Blender-layout dataset (RGB PNGs, silhouette PNGs,
/// depth files, `transforms.json`) and loads it back. Silhouettes are
/// stored separately so anti-aliased edge colors survive.
pub fn synth(spec: &SceneSpec, outdir: impl AsRef<Path>) -> Result<Dataset> {
    let out = outdir.as_ref();
    let views = spec.views()?;
    for sub in ["train", "heldout", "depth", "masks"] {
        let p = out.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut frames = Vec::new();
    for v in &views {
        imaging::save_png_rgb(&v.image, out.join(format!("{}.png", v.name)))?;
        let mask_rel = format!("masks/{}.png", v.name.replace('/', "_"));
        let mask: Vec<f64> = v.mask.as_ref().unwrap().iter().map(|m| *m as f64).collect();
        imaging::save_png_gray(&mask, spec.width, spec.height, out.join(&mask_rel))?;
        let depth_rel = format!("depth/{}.dpth", v.name.replace('/', "_"));
        write_depth(out.join(&depth_rel), spec.width, spec.height, v.depth.as_ref().unwrap())?;
        let m = c2w_gl(&v.camera);
        frames.push(FrameJson {
            file_path: format!("./{}", v.name),
            transform_matrix: (0..4).map(|i| (0..4).map(|j| m[(i, j)]).collect()).collect(),
            split: Some(v.split),
            depth_path: Some(depth_rel),
            mask_path: Some(mask_rel),
        });
    }
    let b = spec.bounds();
    let json = TransformsJson {
        camera_angle_x: 2.0 * (0.5 * spec.width as f64 / spec.focal()).atan(),
        background: Some(spec.background),
        scene_bounds: Some(BoundsJson { min: b.min, max: b.max }),
        frames,
    };
    let path = out.join("transforms.json");
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let spec_path = out.join("scene.json");
    let text = serde_json::to_string_pretty(spec).map_err(|e| Error::format(&spec_path, e.to_string()))?;
    fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;
    load_blender(out)
}
