//! Posed multi-view datasets: the Blender `transforms.json` layout, raw
//! depth files and analytically ray-traced synthetic scenes.
//!
//! ## `transforms.json`
//!
//! ```json
//! {
//!   "camera_angle_x": 0.69,
//!   "background": [1.0, 1.0, 1.0],
//!   "scene_bounds": { "min": [-1, -1, -1], "max": [1, 1, 1] },
//!   "frames": [
//!     { "file_path": "./train/r_0", "transform_matrix": [[...], ...],
//!       "split": "train", "depth_path": "depth/r_0.dpth" }
//!   ]
//! }
//! ```
//!
//! `transform_matrix` is camera-to-world with the OpenGL axis convention
//! (y up, camera looking down -z). `background`, `scene_bounds`, `split`,
//! `depth_path` and `mask_path` are optional. A missing extension on
//! `file_path` means `.png`. When `transforms.json` is absent the loader
//! falls back to `transforms_train.json` plus `transforms_test.json`.
//!
//! RGBA images give the silhouette `alpha > 127` and are composited over the
//! background color.
//!
//! ## Depth files
//!
//! Magic `DPTH`, `u32` LE width, `u32` LE height, then `width * height`
//! row-major `f32` LE values. Zero or non-finite values mark missing depth.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Camera};
use crate::hull::Silhouette;
use crate::imaging::{self, RgbImage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    #[serde(alias = "test", alias = "val")]
    Heldout,
}

/// One posed view.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: RgbImage,
    /// Row-major `{0, 1}` foreground mask.
    pub mask: Option<Vec<u8>>,
    /// Row-major depth prior, zero where unknown.
    pub depth: Option<Vec<f64>>,
    pub split: Split,
}

impl View {
    pub fn silhouette(&self) -> Option<Silhouette> {
        let mask = self.mask.clone()?;
        Silhouette::new(self.camera.clone(), mask).ok()
    }

    fn validate(&self) -> Result<()> {
        let (w, h) = (self.camera.width, self.camera.height);
        let bad = |what: &str| Error::ShapeMismatch(format!("view {}: {what} does not match the camera", self.name));
        if self.image.width != w || self.image.height != h {
            return Err(bad("image"));
        }
        if self.mask.as_ref().is_some_and(|m| m.len() != w * h) {
            return Err(bad("mask"));
        }
        if self.depth.as_ref().is_some_and(|d| d.len() != w * h) {
            return Err(bad("depth"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub views: Vec<View>,
    pub bounds: Option<Aabb>,
    pub background: [f64; 3],
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| v.split == Split::Train)
    }

    pub fn heldout(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| v.split == Split::Heldout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train().next().is_none() {
            return Err(Error::InvalidInput("dataset has no training views".into()));
        }
        self.views.iter().try_for_each(View::validate)
    }

    /// Silhouettes of all training views; errors if any is missing.
    pub fn train_silhouettes(&self) -> Result<Vec<Silhouette>> {
        self.train()
            .map(|v| {
                v.silhouette()
                    .ok_or_else(|| Error::InvalidInput(format!("view {} has no silhouette", v.name)))
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct BoundsJson {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_path: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TransformsJson {
    camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    background: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene_bounds: Option<BoundsJson>,
    frames: Vec<FrameJson>,
}

// flips y and z camera axes between the OpenGL and OpenCV conventions
fn flip_yz() -> Matrix4<f64> {
    Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, 1.0))
}

/// Converts an OpenGL camera-to-world matrix into a camera.
pub fn camera_from_c2w_gl(c2w: &Matrix4<f64>, fx: f64, width: usize, height: usize) -> Result<Camera> {
    let cv = c2w * flip_yz();
    let r_c2w: Matrix3<f64> = cv.fixed_view::<3, 3>(0, 0).into();
    let center: Vector3<f64> = cv.fixed_view::<3, 1>(0, 3).into();
    let dev = (r_c2w.transpose() * r_c2w - Matrix3::identity()).abs().max();
    if dev > 1e-3 || !dev.is_finite() {
        return Err(Error::InvalidInput(format!(
            "camera rotation is not orthonormal (deviation {dev:e})"
        )));
    }
    // remove rounding noise from printed matrices
    let svd = r_c2w.svd(true, true);
    let r_c2w = svd.u.unwrap() * svd.v_t.unwrap();
    let rotation = r_c2w.transpose();
    Camera::new(
        fx,
        fx,
        width as f64 / 2.0,
        height as f64 / 2.0,
        width,
        height,
        rotation,
        -(rotation * center),
    )
}

/// OpenGL camera-to-world matrix of a camera.
pub fn c2w_gl(cam: &Camera) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.rotation.transpose());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&cam.center());
    m * flip_yz()
}

fn read_json(path: &Path) -> Result<TransformsJson> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn resolve(dir: &Path, rel: &str, default_ext: bool) -> PathBuf {
    let p = dir.join(rel.trim_start_matches("./"));
    if default_ext && p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

/// Loads a dataset in the Blender layout described in the module docs.
pub fn load_blender(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let main = dir.join("transforms.json");
    let mut sources = Vec::new();
    if main.exists() {
        sources.push((main, None));
    } else {
        let train = dir.join("transforms_train.json");
        if !train.exists() {
            return Err(Error::io(
                main,
                std::io::Error::new(std::io::ErrorKind::NotFound, "transforms.json not found"),
            ));
        }
        sources.push((train, Some(Split::Train)));
        let test = dir.join("transforms_test.json");
        if test.exists() {
            sources.push((test, Some(Split::Heldout)));
        }
    }

    let mut views = Vec::new();
    let mut bounds = None;
    let mut background = [0.0; 3];
    for (path, forced) in sources {
        let t = read_json(&path)?;
        if !(t.camera_angle_x > 0.0 && t.camera_angle_x < std::f64::consts::PI) {
            return Err(Error::format(&path, "camera_angle_x must lie in (0, pi)"));
        }
        if let Some(b) = t.background {
            background = b;
        }
        if let Some(b) = &t.scene_bounds {
            bounds = Some(Aabb::new(b.min, b.max).map_err(|e| Error::format(&path, e.to_string()))?);
        }
        for frame in &t.frames {
            let rows = &frame.transform_matrix;
            if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
                return Err(Error::format(&path, format!("{}: transform_matrix must be 4x4", frame.file_path)));
            }
            let c2w = Matrix4::from_fn(|i, j| rows[i][j]);
            let img_path = resolve(dir, &frame.file_path, true);
            let (rgb, alpha) = imaging::load_png(&img_path)?;
            let (w, h) = (rgb.width, rgb.height);
            let fx = 0.5 * w as f64 / (0.5 * t.camera_angle_x).tan();
            let camera = camera_from_c2w_gl(&c2w, fx, w, h)
                .map_err(|e| Error::format(&path, format!("{}: {e}", frame.file_path)))?;

            let mut image = rgb;
            let mask = match (&alpha, &frame.mask_path) {
                (_, Some(m)) => {
                    let mp = resolve(dir, m, true);
                    let (mw, mh, gray) = imaging::load_gray_png(&mp)?;
                    if (mw, mh) != (w, h) {
                        return Err(Error::format(mp, "mask size does not match the image"));
                    }
                    Some(gray.iter().map(|v| u8::from(*v > 127)).collect())
                }
                (Some(a), None) => Some(a.iter().map(|v| u8::from(*v > 127)).collect()),
                (None, None) => None,
            };
            if let Some(a) = &alpha {
                for (px, av) in image.data.chunks_exact_mut(3).zip(a) {
                    let t = *av as f64 / 255.0;
                    for (c, bg) in px.iter_mut().zip(background) {
                        *c = *c * t + bg * (1.0 - t);
                    }
                }
            }
            let depth = match &frame.depth_path {
                Some(d) => {
                    let dp = resolve(dir, d, false);
                    let (dw, dh, values) = read_depth(&dp)?;
                    if (dw, dh) != (w, h) {
                        return Err(Error::format(dp, "depth size does not match the image"));
                    }
                    Some(values)
                }
                None => None,
            };
            views.push(View {
                name: frame.file_path.trim_start_matches("./").to_string(),
                camera,
                image,
                mask,
                depth,
                split: forced.or(frame.split).unwrap_or_default(),
            });
        }
    }
    let ds = Dataset {
        views,
        bounds,
        background,
    };
    ds.validate()?;
    Ok(ds)
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

pub fn write_depth(path: impl AsRef<Path>, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    let path = path.as_ref();
    if depth.len() != width * height {
        return Err(Error::ShapeMismatch("depth buffer size".into()));
    }
    let mut buf = Vec::with_capacity(12 + 4 * depth.len());
    buf.extend_from_slice(DEPTH_MAGIC);
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    for d in depth {
        buf.extend_from_slice(&(*d as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a depth file; non-finite values become zero.
pub fn read_depth(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 12 || &buf[..4] != DEPTH_MAGIC {
        return Err(Error::format(path, "missing DPTH header"));
    }
    let w = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() != 12 + 4 * w * h {
        return Err(Error::format(path, format!("expected {} depth values", w * h)));
    }
    let values = buf[12..]
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            if v.is_finite() {
                v
            } else {
                0.0
            }
        })
        .collect();
    Ok((w, h, values))
}

mod synth;

pub use synth::{synth, CameraRing, Primitive, SceneSpec};

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, json: &str, rgba: bool) {
        let img = RgbImage::filled(8, 6, [0.2, 0.4, 0.6]);
        if rgba {
            let alpha: Vec<u8> = (0..48).map(|i| if i < 24 { 255 } else { 100 }).collect();
            imaging::save_png_rgba(&img, &alpha, dir.join("r_0.png")).unwrap();
        } else {
            imaging::save_png_rgb(&img, dir.join("r_0.png")).unwrap();
        }
        fs::write(dir.join("transforms.json"), json).unwrap();
    }

    const ONE_FRAME: &str = r#"{
        "camera_angle_x": 0.8,
        "frames": [{ "file_path": "./r_0",
            "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,4],[0,0,0,1]] }]
    }"#;

    #[test]
    fn one_frame_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), ONE_FRAME, true);
        let ds = load_blender(dir.path()).unwrap();
        let cam = &ds.views[0].camera;
        assert!((cam.fx - 0.5 * 8.0 / 0.4f64.tan()).abs() < 1e-12);
        assert_eq!((cam.cx, cam.cy), (4.0, 3.0));
        // OpenGL camera at z = 4 looking down -z sees the origin straight ahead
        assert!((cam.center() - Vector3::new(0.0, 0.0, 4.0)).norm() < 1e-12);
        let p = cam.world_to_camera(&Vector3::zeros());
        assert!((p - Vector3::new(0.0, 0.0, 4.0)).norm() < 1e-12);
        // world +y is up in the image, so it maps to camera -y
        assert!(cam.world_to_camera(&Vector3::y()).y < 0.0);
        let mask = ds.views[0].mask.as_ref().unwrap();
        assert_eq!(mask.iter().filter(|m| **m == 1).count(), 24);
        assert_eq!(ds.views[0].split, Split::Train);
    }

    #[test]
    fn rgb_without_alpha_has_no_mask() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), ONE_FRAME, false);
        assert!(load_blender(dir.path()).unwrap().views[0].mask.is_none());
    }

    #[test]
    fn loader_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_blender(dir.path()), Err(Error::Io { .. })));
        write_fixture(dir.path(), &ONE_FRAME.replace("[0,0,0,1]]", "]"), true);
        assert!(matches!(load_blender(dir.path()), Err(Error::Format { .. })));
        let sheared = ONE_FRAME.replace("[1,0,0,0]", "[1,0.5,0,0]");
        write_fixture(dir.path(), &sheared, true);
        assert!(matches!(load_blender(dir.path()), Err(Error::Format { .. })));
        write_fixture(dir.path(), "{", true);
        assert!(matches!(load_blender(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn c2w_round_trip() {
        let cam = Camera::look_at(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(0.1, 0.0, -0.2),
            Vector3::y(),
            50.0,
            64,
            64,
        )
        .unwrap();
        let back = camera_from_c2w_gl(&c2w_gl(&cam), 50.0, 64, 64).unwrap();
        assert!((back.rotation - cam.rotation).abs().max() < 1e-12);
        assert!((back.translation - cam.translation).abs().max() < 1e-12);
    }

    #[test]
    fn depth_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.dpth");
        let d = vec![0.0, 1.5, 2.25, 3.0, 0.0, 7.5];
        write_depth(&p, 3, 2, &d).unwrap();
        assert_eq!(read_depth(&p).unwrap(), (3, 2, d));
        fs::write(&p, b"DPTX\0\0\0\0").unwrap();
        assert!(read_depth(&p).is_err());
    }
}
