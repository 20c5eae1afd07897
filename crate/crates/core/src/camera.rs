//! Pinhole cameras.
//!
//! Camera frame: `x` right, `y` down, `z` forward. Pixel `(row, col)` has its
//! centre at image coordinates `(u, v) = (col, row)`. Depth is the `z`
//! coordinate in the camera frame, not the ray length.

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidCamera(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Square pixels with the principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
        )
    }

    /// Centred intrinsics with the given horizontal field of view.
    pub fn from_fov(fov_x_degrees: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_x_degrees > 0.0 && fov_x_degrees < 180.0) {
            return Err(Error::InvalidCamera(format!("field of view {fov_x_degrees} outside (0, 180)")));
        }
        let f = (width as f64 / 2.0) / (fov_x_degrees.to_radians() / 2.0).tan();
        Self::centered(f, width, height)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn with_focal(&self, focal: f64) -> Result<Self> {
        Self::new(focal, focal * self.fy / self.fx, self.cx, self.cy)
    }
}

/// Intrinsics plus a world-to-camera rigid transform `X_cam = R X_world + t`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "PoseRecord", into = "PoseRecord")]
pub struct CameraPose {
    pub intrinsics: Intrinsics,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Serialized form of a [`CameraPose`]; the rotation is row-major.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub intrinsics: Intrinsics,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl TryFrom<PoseRecord> for CameraPose {
    type Error = Error;

    fn try_from(r: PoseRecord) -> Result<Self> {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        Intrinsics::new(r.intrinsics.fx, r.intrinsics.fy, r.intrinsics.cx, r.intrinsics.cy)?;
        CameraPose::new(r.intrinsics, m, Vector3::from(r.translation))
    }
}

impl From<CameraPose> for PoseRecord {
    fn from(p: CameraPose) -> Self {
        let r = p.rotation;
        PoseRecord {
            intrinsics: p.intrinsics,
            rotation: [0, 1, 2].map(|i| [0, 1, 2].map(|j| r[(i, j)])),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !(err <= ORTHO_TOL) || !((det - 1.0).abs() <= ORTHO_TOL) {
        return Err(Error::InvalidCamera(format!(
            "not a rotation (orthogonality error {err:e}, det {det})"
        )));
    }
    Ok(())
}

impl CameraPose {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("translation must be finite".into()));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
        })
    }

    /// A camera at `eye` looking at `target`, with `up` as the approximate
    /// world up direction (image `y` points against it).
    pub fn look_at(intrinsics: Intrinsics, eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidCamera("eye and target coincide".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up is parallel to the viewing direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        Self::new(intrinsics, rotation, translation)
    }

    /// Identity orientation (looking down world `+z`) centred at `eye`.
    pub fn at(intrinsics: Intrinsics, eye: Point3<f64>) -> Self {
        Self {
            intrinsics,
            rotation: Matrix3::identity(),
            translation: -eye.coords,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera centre in world coordinates, `-R^T t`.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Viewing direction in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation))
    }

    /// Image coordinates and depth of a world point, or `None` behind the camera.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }

    /// The world point seen at `(u, v)` with the given depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        let k = &self.intrinsics;
        let c = Point3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
        self.camera_to_world(&c)
    }

    /// World-space ray direction through `(u, v)`, with unit camera `z`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let d = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        self.rotation.transpose() * d
    }

    /// Moves the camera by `distance` along its own optical axis.
    pub fn dolly(&self, distance: f64) -> Self {
        let eye = self.center() + self.forward() * distance;
        Self {
            translation: -(self.rotation * eye.coords),
            ..*self
        }
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Self {
        Self { intrinsics, ..*self }
    }
}
