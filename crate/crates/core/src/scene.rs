//! Procedural scenes rendered by analytic ray casting, so every rendered
//! pixel comes with its exact depth.

use nalgebra::{Point3, Rotation3, Vector3};
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

fn default_channels() -> usize {
    3
}

fn default_far() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub primitives: Vec<Primitive>,
    /// Value written to every channel of background pixels.
    #[serde(default)]
    pub background: f64,
    /// Depth assigned to background pixels.
    #[serde(default = "default_far")]
    pub far_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    /// One pattern per channel, or a single pattern shared by all channels.
    pub texture: Vec<Pattern>,
    #[serde(default)]
    pub animation: Option<Animation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// A rectangle centred at `center` spanned by `u_axis` and `v_axis`
    /// (orthogonalised internally), with half extents along each.
    Plane {
        center: [f64; 3],
        u_axis: [f64; 3],
        v_axis: [f64; 3],
        half_width: f64,
        half_height: f64,
    },
    Sphere { center: [f64; 3], radius: f64 },
}

/// A scalar pattern over surface coordinates `(s, t)` in scene units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    Constant { value: f64 },
    Checker { period: f64, low: f64, high: f64 },
    Sinusoid {
        period_s: f64,
        period_t: f64,
        #[serde(default)]
        phase: f64,
        amplitude: f64,
        offset: f64,
    },
    /// Smoothly interpolated lattice noise.
    Noise {
        cell: f64,
        seed: u64,
        amplitude: f64,
        offset: f64,
    },
}

/// Constant-velocity rigid motion per frame of scene time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Animation {
    #[serde(default)]
    pub velocity: [f64; 3],
    /// Axis-angle rate (radians per unit time) about the primitive centre.
    #[serde(default)]
    pub angular_velocity: [f64; 3],
}

/// Per-pixel depth with an explicit validity flag; invalid pixels hold `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Array2<f64>,
    valid: Array2<bool>,
}

impl DepthMap {
    pub fn new(values: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        if values.shape() != valid.shape() {
            return Err(Error::ShapeMismatch {
                context: "depth map",
                expected: values.shape().to_vec(),
                found: valid.shape().to_vec(),
            });
        }
        for (v, ok) in values.iter().zip(valid.iter()) {
            if !v.is_finite() || (*ok && *v <= 0.0) {
                return Err(Error::InvalidInput(format!("invalid depth value {v}")));
            }
        }
        let values = ndarray::Zip::from(&values)
            .and(&valid)
            .map_collect(|&v, &ok| if ok { v } else { 0.0 });
        Ok(Self { values, valid })
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), depth), Array2::from_elem((height, width), true))
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.valid[[row, col]].then(|| self.values[[row, col]])
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Array2<bool> {
        &self.valid
    }
}

struct Hit {
    depth: f64,
    s: f64,
    t: f64,
}

impl Shape {
    fn validate(&self) -> Result<()> {
        match self {
            Shape::Plane {
                u_axis,
                v_axis,
                half_width,
                half_height,
                ..
            } => {
                let u = Vector3::from(*u_axis);
                let v = Vector3::from(*v_axis);
                if !(*half_width > 0.0 && *half_height > 0.0) || u.cross(&v).norm() < 1e-9 {
                    return Err(Error::InvalidScene("degenerate plane".into()));
                }
            }
            Shape::Sphere { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(Error::InvalidScene("sphere radius must be positive".into()));
                }
            }
        }
        Ok(())
    }

    fn center(&self) -> Vector3<f64> {
        match self {
            Shape::Plane { center, .. } | Shape::Sphere { center, .. } => Vector3::from(*center),
        }
    }

    fn plane_frame(u_axis: &[f64; 3], v_axis: &[f64; 3]) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let u = Vector3::from(*u_axis).normalize();
        let v0 = Vector3::from(*v_axis);
        let v = (v0 - u * u.dot(&v0)).normalize();
        (u, v, u.cross(&v))
    }

    /// Errors when the origin lies inside (or on) the primitive.
    fn check_outside(&self, origin: &Vector3<f64>) -> Result<()> {
        match self {
            Shape::Sphere { center, radius } => {
                if (origin - Vector3::from(*center)).norm() <= *radius {
                    return Err(Error::DegenerateViewpoint("camera inside a sphere".into()));
                }
            }
            Shape::Plane {
                center,
                u_axis,
                v_axis,
                half_width,
                half_height,
            } => {
                let (u, v, n) = Self::plane_frame(u_axis, v_axis);
                let rel = origin - Vector3::from(*center);
                if rel.dot(&n).abs() < 1e-9 && rel.dot(&u).abs() <= *half_width && rel.dot(&v).abs() <= *half_height {
                    return Err(Error::DegenerateViewpoint("camera lies on a plane".into()));
                }
            }
        }
        Ok(())
    }

    /// Nearest hit with positive ray parameter; `dir` has unit camera depth,
    /// so the parameter is the depth.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        match self {
            Shape::Plane {
                center,
                u_axis,
                v_axis,
                half_width,
                half_height,
            } => {
                let (u, v, n) = Self::plane_frame(u_axis, v_axis);
                let c = Vector3::from(*center);
                let denom = n.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let lambda = n.dot(&(c - origin)) / denom;
                if lambda <= 0.0 {
                    return None;
                }
                let rel = origin + dir * lambda - c;
                let (s, t) = (rel.dot(&u), rel.dot(&v));
                (s.abs() <= *half_width && t.abs() <= *half_height).then_some(Hit { depth: lambda, s, t })
            }
            Shape::Sphere { center, radius } => {
                let c = Vector3::from(*center);
                let oc = origin - c;
                let a = dir.dot(dir);
                let b = 2.0 * dir.dot(&oc);
                let cc = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // Numerically stable pair of roots.
                let q = -0.5 * (b + b.signum() * sq);
                let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, cc / q) };
                let lambda = [r1.min(r2), r1.max(r2)].into_iter().find(|&l| l > 0.0)?;
                let p = oc + dir * lambda;
                let lon = p.x.atan2(p.z);
                let lat = (p.y / radius).clamp(-1.0, 1.0).asin();
                Some(Hit {
                    depth: lambda,
                    s: lon * radius,
                    t: lat * radius,
                })
            }
        }
    }
}

impl Animation {
    fn motion_at(&self, time: f64) -> (Rotation3<f64>, Vector3<f64>) {
        let rot = Rotation3::new(Vector3::from(self.angular_velocity) * time);
        (rot, Vector3::from(self.velocity) * time)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((i as u64).wrapping_mul(0x1f1f_1f1f) ^ splitmix(j as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn quintic(x: f64) -> f64 {
    x * x * x * (x * (x * 6.0 - 15.0) + 10.0)
}

impl Pattern {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Pattern::Constant { value } => value.is_finite(),
            Pattern::Checker { period, low, high } => *period > 0.0 && low.is_finite() && high.is_finite(),
            Pattern::Sinusoid {
                period_s, period_t, ..
            } => *period_s != 0.0 || *period_t != 0.0,
            Pattern::Noise { cell, .. } => *cell > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScene(format!("invalid pattern {self:?}")))
        }
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        match self {
            Pattern::Constant { value } => *value,
            Pattern::Checker { period, low, high } => {
                let parity = ((s / period).floor() as i64 + (t / period).floor() as i64).rem_euclid(2);
                if parity == 0 {
                    *low
                } else {
                    *high
                }
            }
            Pattern::Sinusoid {
                period_s,
                period_t,
                phase,
                amplitude,
                offset,
            } => {
                let fs = if *period_s == 0.0 { 0.0 } else { s / period_s };
                let ft = if *period_t == 0.0 { 0.0 } else { t / period_t };
                offset + amplitude * (std::f64::consts::TAU * (fs + ft) + phase).sin()
            }
            Pattern::Noise {
                cell,
                seed,
                amplitude,
                offset,
            } => {
                let (x, y) = (s / cell, t / cell);
                let (i, j) = (x.floor(), y.floor());
                let (fx, fy) = (quintic(x - i), quintic(y - j));
                let (i, j) = (i as i64, j as i64);
                let a = lattice(*seed, i, j);
                let b = lattice(*seed, i + 1, j);
                let c = lattice(*seed, i, j + 1);
                let d = lattice(*seed, i + 1, j + 1);
                let top = a + (b - a) * fx;
                let bottom = c + (d - c) * fx;
                offset + amplitude * (top + (bottom - top) * fy)
            }
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidScene("scene has no primitives".into()));
        }
        if self.channels == 0 {
            return Err(Error::InvalidScene("scene needs at least one channel".into()));
        }
        if !(self.far_depth > 0.0 && self.far_depth.is_finite()) || !self.background.is_finite() {
            return Err(Error::InvalidScene("far depth must be positive and background finite".into()));
        }
        for p in &self.primitives {
            p.shape.validate()?;
            if p.texture.len() != 1 && p.texture.len() != self.channels {
                return Err(Error::InvalidScene(format!(
                    "texture has {} patterns for {} channels",
                    p.texture.len(),
                    self.channels
                )));
            }
            for pat in &p.texture {
                pat.validate()?;
            }
            if let Some(a) = &p.animation {
                if !a.velocity.iter().chain(&a.angular_velocity).all(|v| v.is_finite()) {
                    return Err(Error::InvalidScene("animation rates must be finite".into()));
                }
            }
        }
        Ok(())
    }
}

/// Renders the scene at scene time zero.
pub fn render(scene: &SceneSpec, pose: &CameraPose, resolution: (usize, usize)) -> Result<(LatentTensor, DepthMap)> {
    render_at(scene, pose, resolution, 0.0)
}

/// Renders a `[C, 1, H, W]` image and its depth with primitives posed at `time`.
pub fn render_at(
    scene: &SceneSpec,
    pose: &CameraPose,
    resolution: (usize, usize),
    time: f64,
) -> Result<(LatentTensor, DepthMap)> {
    scene.validate()?;
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput("resolution must be positive".into()));
    }
    let origin = pose.center().coords;
    // Rays in each primitive's rest frame: x_rest = R^T (x - c - d) + c.
    let frames: Vec<(Rotation3<f64>, Vector3<f64>)> = scene
        .primitives
        .iter()
        .map(|p| match &p.animation {
            Some(a) => a.motion_at(time),
            None => (Rotation3::identity(), Vector3::zeros()),
        })
        .collect();
    let local_origins: Vec<Vector3<f64>> = scene
        .primitives
        .iter()
        .zip(&frames)
        .map(|(p, (rot, shift))| {
            let c = p.shape.center();
            rot.inverse() * (origin - c - shift) + c
        })
        .collect();
    for (p, o) in scene.primitives.iter().zip(&local_origins) {
        p.shape.check_outside(o)?;
    }

    let c = scene.channels;
    let mut image = Array4::from_elem((c, 1, h, w), scene.background);
    let mut depth = Array2::from_elem((h, w), scene.far_depth);
    for row in 0..h {
        for col in 0..w {
            let dir = pose.ray(col as f64, row as f64);
            let mut best: Option<(f64, usize, Hit)> = None;
            for (k, p) in scene.primitives.iter().enumerate() {
                let (rot, _) = &frames[k];
                let local_dir = rot.inverse() * dir;
                if let Some(hit) = p.shape.intersect(&local_origins[k], &local_dir) {
                    if best.as_ref().is_none_or(|(d, _, _)| hit.depth < *d) {
                        best = Some((hit.depth, k, hit));
                    }
                }
            }
            if let Some((d, k, hit)) = best {
                if d < scene.far_depth {
                    depth[[row, col]] = d;
                    let tex = &scene.primitives[k].texture;
                    for ch in 0..c {
                        let pat = if tex.len() == 1 { &tex[0] } else { &tex[ch] };
                        image[[ch, 0, row, col]] = pat.eval(hit.s, hit.t);
                    }
                }
            }
        }
    }
    let valid = Array2::from_elem((h, w), true);
    Ok((LatentTensor::new(image)?, DepthMap::new(depth, valid)?))
}

/// World point hit through pixel centre `(u, v)`, if any primitive is hit.
pub fn surface_point(scene: &SceneSpec, pose: &CameraPose, u: f64, v: f64, time: f64) -> Option<Point3<f64>> {
    let origin = pose.center().coords;
    let dir = pose.ray(u, v);
    let mut best: Option<f64> = None;
    for p in &scene.primitives {
        let (rot, shift) = p
            .animation
            .as_ref()
            .map(|a| a.motion_at(time))
            .unwrap_or((Rotation3::identity(), Vector3::zeros()));
        let c = p.shape.center();
        let lo = rot.inverse() * (origin - c - shift) + c;
        if let Some(hit) = p.shape.intersect(&lo, &(rot.inverse() * dir)) {
            if best.is_none_or(|d| hit.depth < d) {
                best = Some(hit.depth);
            }
        }
    }
    best.map(|d| Point3::from(origin + dir * d))
}

/// A fronto-parallel textured plane at `z = depth`, large enough to fill any
/// view with a horizontal field of view under 120 degrees from the origin.
pub fn plane_scene(depth: f64, channels: usize) -> SceneSpec {
    let extent = depth * 20.0;
    SceneSpec {
        channels,
        primitives: vec![Primitive {
            shape: Shape::Plane {
                center: [0.0, 0.0, depth],
                u_axis: [1.0, 0.0, 0.0],
                v_axis: [0.0, 1.0, 0.0],
                half_width: extent,
                half_height: extent,
            },
            texture: (0..channels)
                .map(|c| Pattern::Noise {
                    cell: 0.15 * depth / 5.0,
                    seed: 11 + c as u64,
                    amplitude: 1.0,
                    offset: 0.0,
                })
                .collect(),
            animation: None,
        }],
        background: 0.0,
        far_depth: depth * 1000.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;

    fn cam(eye: [f64; 3], size: usize) -> CameraPose {
        CameraPose::at(Intrinsics::from_fov(60.0, size, size).unwrap(), Point3::from(eye))
    }

    #[test]
    fn fronto_parallel_plane_depth() {
        let scene = plane_scene(5.0, 1);
        let (_, d) = render(&scene, &cam([0.0; 3], 33), (33, 33)).unwrap();
        assert!(d.values().iter().all(|&v| (v - 5.0).abs() < 1e-12));
        let moved = cam([0.0; 3], 33).dolly(1.0);
        let (_, d) = render(&scene, &moved, (33, 33)).unwrap();
        assert!(d.values().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn sphere_center_depth() {
        let scene = SceneSpec {
            channels: 1,
            primitives: vec![Primitive {
                shape: Shape::Sphere {
                    center: [0.0, 0.0, 4.0],
                    radius: 1.0,
                },
                texture: vec![Pattern::Constant { value: 0.5 }],
                animation: None,
            }],
            background: 0.0,
            far_depth: 100.0,
        };
        let (img, d) = render(&scene, &cam([0.0; 3], 31), (31, 31)).unwrap();
        assert_eq!(d.get(15, 15), Some(3.0));
        assert_eq!(img.get([0, 0, 15, 15]), 0.5);
        assert_eq!(d.get(0, 0), Some(100.0));
        assert_eq!(img.get([0, 0, 0, 0]), 0.0);
        let inside = render(&scene, &cam([0.0, 0.0, 4.5], 31), (31, 31));
        assert!(matches!(inside, Err(Error::DegenerateViewpoint(_))));
    }

    #[test]
    fn validation() {
        let mut s = plane_scene(5.0, 2);
        s.primitives[0].texture.push(Pattern::Constant { value: 0.0 });
        assert!(s.validate().is_err());
        let empty = SceneSpec {
            channels: 1,
            primitives: vec![],
            background: 0.0,
            far_depth: 1.0,
        };
        assert!(render(&empty, &cam([0.0; 3], 8), (8, 8)).is_err());
    }

    #[test]
    fn animation_moves_texture_with_object() {
        let mut scene = plane_scene(5.0, 1);
        scene.primitives[0].animation = Some(Animation {
            velocity: [0.5, 0.0, 0.0],
            angular_velocity: [0.0; 3],
        });
        let c = cam([0.0; 3], 32);
        let (a, _) = render_at(&scene, &c, (32, 32), 0.0).unwrap();
        // Moving the plane by +0.5 equals moving the camera by -0.5.
        let (b, _) = render_at(&scene, &c, (32, 32), 1.0).unwrap();
        let (b2, _) = render(&scene, &cam([-0.5, 0.0, 0.0], 32), (32, 32)).unwrap();
        assert!(b.max_abs_diff(&b2) < 1e-9);
        assert!(a.max_abs_diff(&b) > 1e-3);
    }
}
