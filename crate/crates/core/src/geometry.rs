//! Pinhole cameras, quaternions and the perspective projection of 3D
//! Gaussians into screen space.
//!
//! Conventions used throughout the crate:
//!
//! * Quaternions are stored `(w, x, y, z)`.
//! * Extrinsics are world-to-camera: `p_cam = R * p_world + t`.
//! * Camera space is x right, y down, z forward (the OpenCV convention).
//! * Pixel `(i, j)` covers `[i, i+1) x [j, j+1)` in image coordinates, so its
//!   center sits at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points at or closer than this camera-space depth are not visible.
pub const Z_NEAR: f64 = 1e-4;

/// Screen-space variance (px^2) added to both diagonal entries of every
/// projected covariance so splats never shrink below a pixel.
pub const LOW_PASS_VARIANCE: f64 = 0.3;

/// Pinhole camera with world-to-camera extrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`. `up` is the world direction that
    /// should appear upward in the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidInput("look_at: eye equals target".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidInput(
                "look_at: up is parallel to the view direction".into(),
            ));
        }
        let right = right.normalize();
        // y points down in camera space
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera image size must be >= 1".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidInput("camera focal lengths must be positive".into()));
        }
        if !self.cx.is_finite()
            || !self.cy.is_finite()
            || self.rotation.iter().any(|v| !v.is_finite())
            || self.translation.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput("camera parameters must be finite".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "camera rotation is not orthonormal (deviation {ortho:e})"
            )));
        }
        if (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput("camera rotation must have det = +1".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Unit world-space direction of the ray through image point `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d_cam).normalize()
    }

    /// Same camera with every pixel quantity scaled by `factor`
    /// (used to render at a different resolution).
    pub fn scaled(&self, factor: f64) -> Camera {
        Camera {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width: ((self.width as f64 * factor).round() as usize).max(1),
            height: ((self.height as f64 * factor).round() as usize).max(1),
            ..self.clone()
        }
    }
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation(pub [f64; 4]);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation([1.0, 0.0, 0.0, 0.0]);

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Rotation([w, x, y, z])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Rotation> {
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("quaternion has non-finite components".into()));
        }
        let n = self.norm();
        if n < 1e-12 {
            return Err(Error::InvalidInput("zero quaternion".into()));
        }
        Ok(Rotation(self.0.map(|v| v / n)))
    }

    pub fn to_matrix(&self) -> Result<Matrix3<f64>> {
        quat_to_matrix(self)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::IDENTITY
    }
}

/// Per-axis standard deviations stored as natural logs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogScale(pub [f64; 3]);

impl LogScale {
    pub fn sigmas(&self) -> Vector3<f64> {
        Vector3::new(self.0[0].exp(), self.0[1].exp(), self.0[2].exp())
    }
}

/// Rotation matrix of `q`. The quaternion is renormalized first, so any
/// nonzero finite quaternion is accepted; `q` and `-q` give the same matrix.
pub fn quat_to_matrix(q: &Rotation) -> Result<Matrix3<f64>> {
    let [w, x, y, z] = q.normalized()?.0;
    Ok(rotation_from_unit(w, x, y, z))
}

pub(crate) fn rotation_from_unit(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R S S^T R^T` for the rotation `q` and scale `exp(log_scale)`.
pub fn compose_covariance(log_scale: &LogScale, q: &Rotation) -> Result<Matrix3<f64>> {
    if log_scale.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("log-scale has non-finite components".into()));
    }
    let sigmas = log_scale.sigmas();
    if sigmas.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::InvalidInput("scale overflows".into()));
    }
    let r = quat_to_matrix(q)?;
    Ok(covariance_from(&r, &sigmas))
}

pub(crate) fn covariance_from(r: &Matrix3<f64>, sigmas: &Vector3<f64>) -> Matrix3<f64> {
    let s2 = Matrix3::from_diagonal(&sigmas.component_mul(sigmas));
    r * s2 * r.transpose()
}

/// Pixel coordinates and camera-space depth of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl Projection {
    pub fn uv(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

pub fn project_point(cam: &Camera, mu: &Vector3<f64>) -> Result<Projection> {
    let p = cam.world_to_camera(mu);
    project_camera_point(cam, &p)
}

pub(crate) fn project_camera_point(cam: &Camera, p: &Vector3<f64>) -> Result<Projection> {
    if !(p.z > Z_NEAR) {
        return Err(Error::NotVisible { z: p.z });
    }
    Ok(Projection {
        u: cam.fx * p.x / p.z + cam.cx,
        v: cam.fy * p.y / p.z + cam.cy,
        z: p.z,
    })
}

/// Jacobian of `(x, y, z) -> (fx x / z + cx, fy y / z + cy)` at a
/// camera-space point.
pub fn perspective_jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz2,
    )
}

/// Screen-space covariance `J W Sigma W^T J^T` plus the low-pass floor,
/// where `W` is the view rotation.
pub fn project_covariance(
    cam: &Camera,
    mu: &Vector3<f64>,
    sigma: &Matrix3<f64>,
) -> Result<Matrix2<f64>> {
    let p = cam.world_to_camera(mu);
    if !(p.z > Z_NEAR) {
        return Err(Error::NotVisible { z: p.z });
    }
    Ok(project_covariance_cam(cam, &p, sigma))
}

pub(crate) fn project_covariance_cam(
    cam: &Camera,
    p_cam: &Vector3<f64>,
    sigma: &Matrix3<f64>,
) -> Matrix2<f64> {
    let j = perspective_jacobian(cam, p_cam);
    let w = &cam.rotation;
    let view = w * sigma * w.transpose();
    let mut cov = j * view * j.transpose();
    // keep exact symmetry regardless of rounding order
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(0, 1)] = off;
    cov[(1, 0)] = off;
    cov[(0, 0)] += LOW_PASS_VARIANCE;
    cov[(1, 1)] += LOW_PASS_VARIANCE;
    cov
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|i| !(max[i] > min[i]) || !min[i].is_finite() || !max[i].is_finite()) {
            return Err(Error::InvalidInput(format!(
                "degenerate bounds {min:?} .. {max:?}"
            )));
        }
        Ok(Aabb { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Aabb {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn size(&self) -> Vector3<f64> {
        Vector3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    pub fn volume(&self) -> f64 {
        let s = self.size();
        s.x * s.y * s.z
    }

    pub fn diagonal(&self) -> f64 {
        self.size().norm()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}
