//! Camera paths: orbits, dolly zooms, arc pans and explicit pose lists.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Intrinsics};
use crate::error::{Error, Result};

/// World up used by generated paths; image `y` points down, so up is `-y`.
pub const WORLD_UP: [f64; 3] = [0.0, -1.0, 0.0];

fn default_fov() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub path: TrajectoryKind,
    pub frame_count: usize,
    /// `[height, width]` of the images the cameras see.
    pub resolution: [usize; 2],
    /// Horizontal field of view of the first frame.
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    #[serde(default)]
    pub max_rotation_step_deg: Option<f64>,
    #[serde(default)]
    pub max_translation_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryKind {
    /// Frame `i` sits at angle `start_deg + sweep_deg * i / frame_count`
    /// around `target`, always looking at it.
    Orbit {
        target: [f64; 3],
        radius: f64,
        #[serde(default)]
        start_deg: f64,
        sweep_deg: f64,
        #[serde(default)]
        height: f64,
    },
    /// Moves along the axis towards `target` while scaling the focal length
    /// with distance, so the subject keeps its image size.
    DollyZoom {
        target: [f64; 3],
        start_distance: f64,
        end_distance: f64,
    },
    /// Travels an arc of `radius` around `pivot` while the view direction pans
    /// away from the pivot by up to `pan_deg`.
    ArcPan {
        pivot: [f64; 3],
        radius: f64,
        arc_start_deg: f64,
        arc_end_deg: f64,
        pan_deg: f64,
    },
    Custom { poses: Vec<CameraPose> },
}

fn orbit_eye(target: &Point3<f64>, radius: f64, angle_deg: f64, height: f64) -> Point3<f64> {
    let a = angle_deg.to_radians();
    target + Vector3::new(radius * a.sin(), -height, -radius * a.cos())
}

impl TrajectorySpec {
    fn intrinsics(&self) -> Result<Intrinsics> {
        let [h, w] = self.resolution;
        if h == 0 || w == 0 {
            return Err(Error::InvalidTrajectory("resolution must be positive".into()));
        }
        Intrinsics::from_fov(self.fov_deg, w, h)
    }

    /// Interpolation parameter of frame `i`, from 0 at the first frame to 1
    /// at the last.
    fn ramp(&self, i: usize) -> f64 {
        if self.frame_count <= 1 {
            0.0
        } else {
            i as f64 / (self.frame_count - 1) as f64
        }
    }

    /// Pose of frame `i`; generated paths may be evaluated past the last frame.
    pub fn pose_at(&self, i: usize) -> Result<CameraPose> {
        let k = self.intrinsics()?;
        let up = Vector3::from(WORLD_UP);
        match &self.path {
            TrajectoryKind::Orbit {
                target,
                radius,
                start_deg,
                sweep_deg,
                height,
            } => {
                if !(*radius > 0.0) {
                    return Err(Error::InvalidTrajectory("orbit radius must be positive".into()));
                }
                let target = Point3::from(*target);
                let angle = start_deg + sweep_deg * i as f64 / self.frame_count as f64;
                CameraPose::look_at(k, orbit_eye(&target, *radius, angle, *height), target, up)
            }
            TrajectoryKind::DollyZoom {
                target,
                start_distance,
                end_distance,
            } => {
                if !(*start_distance > 0.0 && *end_distance > 0.0) {
                    return Err(Error::InvalidTrajectory("dolly distances must be positive".into()));
                }
                let s = self.ramp(i);
                let d = start_distance + (end_distance - start_distance) * s;
                let target = Point3::from(*target);
                let eye = target - Vector3::new(0.0, 0.0, d);
                let k = k.with_focal(k.fx * d / start_distance)?;
                CameraPose::look_at(k, eye, target, up)
            }
            TrajectoryKind::ArcPan {
                pivot,
                radius,
                arc_start_deg,
                arc_end_deg,
                pan_deg,
            } => {
                if !(*radius > 0.0) {
                    return Err(Error::InvalidTrajectory("arc radius must be positive".into()));
                }
                let s = self.ramp(i);
                let pivot = Point3::from(*pivot);
                let angle = arc_start_deg + (arc_end_deg - arc_start_deg) * s;
                let eye = orbit_eye(&pivot, *radius, angle, 0.0);
                let look = orbit_eye(&pivot, *radius, angle + 180.0 + pan_deg * s, 0.0) - pivot;
                CameraPose::look_at(k, eye, eye + look, up)
            }
            TrajectoryKind::Custom { poses } => poses
                .get(i)
                .copied()
                .ok_or_else(|| Error::InvalidTrajectory(format!("custom path has no pose {i}"))),
        }
    }
}

/// Angle in degrees of the relative rotation between two cameras.
pub fn rotation_step_deg(a: &CameraPose, b: &CameraPose) -> f64 {
    let rel = b.rotation() * a.rotation().transpose();
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn make_trajectory(spec: &TrajectorySpec) -> Result<Vec<CameraPose>> {
    if spec.frame_count == 0 {
        return Err(Error::InvalidTrajectory("frame_count must be positive".into()));
    }
    if let TrajectoryKind::Custom { poses } = &spec.path {
        if poses.len() != spec.frame_count {
            return Err(Error::LengthMismatch {
                context: "custom trajectory",
                left: spec.frame_count,
                right: poses.len(),
            });
        }
    }
    let poses: Vec<CameraPose> = (0..spec.frame_count).map(|i| spec.pose_at(i)).collect::<Result<_>>()?;
    for (i, pair) in poses.windows(2).enumerate() {
        if let Some(max) = spec.max_rotation_step_deg {
            let r = rotation_step_deg(&pair[0], &pair[1]);
            if r > max {
                return Err(Error::InvalidTrajectory(format!("rotation step {r:.4} deg between frames {i} and {} exceeds {max}", i + 1)));
            }
        }
        if let Some(max) = spec.max_translation_step {
            let d = (pair[1].center() - pair[0].center()).norm();
            if d > max {
                return Err(Error::InvalidTrajectory(format!("translation step {d:.4} between frames {i} and {} exceeds {max}", i + 1)));
            }
        }
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec(kind: TrajectoryKind, frames: usize) -> TrajectorySpec {
        TrajectorySpec {
            path: kind,
            frame_count: frames,
            resolution: [32, 32],
            fov_deg: 60.0,
            max_rotation_step_deg: None,
            max_translation_step: None,
        }
    }

    #[test]
    fn orbit_closes_and_keeps_radius() {
        let s = spec(
            TrajectoryKind::Orbit {
                target: [0.0, 0.0, 5.0],
                radius: 3.0,
                start_deg: 0.0,
                sweep_deg: 360.0,
                height: 0.0,
            },
            4,
        );
        let poses = make_trajectory(&s).unwrap();
        assert_eq!(poses.len(), 4);
        let wrap = s.pose_at(4).unwrap();
        assert_abs_diff_eq!(wrap.center(), poses[0].center(), epsilon = 1e-12);
        assert_abs_diff_eq!(*wrap.rotation(), *poses[0].rotation(), epsilon = 1e-12);
        for p in &poses {
            assert_abs_diff_eq!((p.center() - Point3::new(0.0, 0.0, 5.0)).norm(), 3.0, epsilon = 1e-12);
            let (u, v, _) = p.project(&Point3::new(0.0, 0.0, 5.0)).unwrap();
            assert_abs_diff_eq!(u, p.intrinsics.cx, epsilon = 1e-9);
            assert_abs_diff_eq!(v, p.intrinsics.cy, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_radius_orbit_rejected() {
        let s = spec(
            TrajectoryKind::Orbit {
                target: [0.0; 3],
                radius: 0.0,
                start_deg: 0.0,
                sweep_deg: 10.0,
                height: 0.0,
            },
            3,
        );
        assert!(matches!(make_trajectory(&s), Err(Error::InvalidTrajectory(_))));
    }

    #[test]
    fn dolly_zoom_keeps_ratio() {
        let s = spec(
            TrajectoryKind::DollyZoom {
                target: [0.0, 0.0, 6.0],
                start_distance: 6.0,
                end_distance: 3.0,
            },
            5,
        );
        let poses = make_trajectory(&s).unwrap();
        let ratio = poses[0].intrinsics.fx / 6.0;
        for p in &poses {
            let d = (p.center() - Point3::new(0.0, 0.0, 6.0)).norm();
            assert_abs_diff_eq!(p.intrinsics.fx / d, ratio, epsilon = 1e-12);
        }
    }

    #[test]
    fn custom_passthrough_and_step_bounds() {
        let orbit = spec(
            TrajectoryKind::Orbit {
                target: [0.0, 0.0, 5.0],
                radius: 5.0,
                start_deg: 0.0,
                sweep_deg: 30.0,
                height: 0.0,
            },
            3,
        );
        let poses = make_trajectory(&orbit).unwrap();
        let custom = spec(TrajectoryKind::Custom { poses: poses.clone() }, 3);
        assert_eq!(make_trajectory(&custom).unwrap(), poses);
        let mut bounded = orbit.clone();
        bounded.max_rotation_step_deg = Some(5.0);
        assert!(make_trajectory(&bounded).is_err());
        bounded.max_rotation_step_deg = Some(10.5);
        assert!(make_trajectory(&bounded).is_ok());
    }

    #[test]
    fn arc_pan_starts_facing_pivot() {
        let s = spec(
            TrajectoryKind::ArcPan {
                pivot: [0.0, 0.0, 5.0],
                radius: 2.0,
                arc_start_deg: 0.0,
                arc_end_deg: 20.0,
                pan_deg: 10.0,
            },
            3,
        );
        let poses = make_trajectory(&s).unwrap();
        assert_abs_diff_eq!(poses[0].forward(), Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }
}
