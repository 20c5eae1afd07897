//! Camera trajectory accuracy: similarity alignment, ATE and RPE.
//!
//! Poses here are camera-to-world: `R` rotates camera axes into the world and
//! `t` is the camera centre.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::Serialize;

use crate::camera::{check_rotation, CameraPose};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrajectory {
    rotations: Vec<Matrix3<f64>>,
    translations: Vec<Vector3<f64>>,
    timestamps: Option<Vec<f64>>,
}

impl PoseTrajectory {
    pub fn new(rotations: Vec<Matrix3<f64>>, translations: Vec<Vector3<f64>>) -> Result<Self> {
        if rotations.len() != translations.len() {
            return Err(Error::LengthMismatch {
                context: "pose trajectory",
                left: rotations.len(),
                right: translations.len(),
            });
        }
        if rotations.len() < 2 {
            return Err(Error::InvalidTrajectory("a trajectory needs at least two poses".into()));
        }
        for r in &rotations {
            check_rotation(r).map_err(|e| Error::InvalidTrajectory(e.to_string()))?;
        }
        if !translations.iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidTrajectory("translations must be finite".into()));
        }
        Ok(Self {
            rotations,
            translations,
            timestamps: None,
        })
    }

    pub fn with_timestamps(mut self, timestamps: Vec<f64>) -> Result<Self> {
        if timestamps.len() != self.len() {
            return Err(Error::LengthMismatch {
                context: "timestamps",
                left: self.len(),
                right: timestamps.len(),
            });
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    /// Camera-to-world poses of world-to-camera cameras.
    pub fn from_cameras(cams: &[CameraPose]) -> Result<Self> {
        Self::new(
            cams.iter().map(|c| c.rotation().transpose()).collect(),
            cams.iter().map(|c| c.center().coords).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn rotations(&self) -> &[Matrix3<f64>] {
        &self.rotations
    }

    pub fn translations(&self) -> &[Vector3<f64>] {
        &self.translations
    }

    pub fn timestamps(&self) -> Option<&[f64]> {
        self.timestamps.as_deref()
    }

    /// Translation of pose `i + 1` seen from pose `i`: `R_i^T (t_{i+1} - t_i)`.
    pub fn relative_translation(&self, i: usize) -> Vector3<f64> {
        self.rotations[i].transpose() * (self.translations[i + 1] - self.translations[i])
    }

    /// Rotation of pose `i + 1` relative to pose `i`: `R_i^T R_{i+1}`.
    pub fn relative_rotation(&self, i: usize) -> Matrix3<f64> {
        self.rotations[i].transpose() * self.rotations[i + 1]
    }
}

/// `x -> s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3Transform {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("similarity scale {scale} must be positive")));
        }
        check_rotation(&rotation)?;
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: r,
            translation: -(r * self.translation) / self.scale,
        }
    }

    /// Maps every pose: centres through the similarity, orientations rotated.
    pub fn apply(&self, traj: &PoseTrajectory) -> PoseTrajectory {
        PoseTrajectory {
            rotations: traj.rotations.iter().map(|r| self.rotation * r).collect(),
            translations: traj.translations.iter().map(|t| self.apply_point(t)).collect(),
            timestamps: traj.timestamps.clone(),
        }
    }
}

/// Relative size below which a singular value counts as zero.
const RANK_TOL: f64 = 1e-10;

fn check_spread(points: &[Vector3<f64>], which: &str) -> Result<()> {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    let cov = points.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>() / n;
    let mut sv: Vec<f64> = cov.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    if sv[0] <= 0.0 || sv[1] <= RANK_TOL * sv[0] {
        return Err(Error::AlignmentUnderdetermined(format!("{which} positions are coincident or collinear")));
    }
    Ok(())
}

/// Least-squares similarity taking `est` positions onto `ref` positions
/// (closed form via SVD of the cross-covariance), and `est` mapped by it.
pub fn align_sim3(est: &PoseTrajectory, reference: &PoseTrajectory) -> Result<(PoseTrajectory, Sim3Transform)> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch {
            context: "align_sim3",
            left: est.len(),
            right: reference.len(),
        });
    }
    if est.len() < 3 {
        return Err(Error::AlignmentUnderdetermined("need at least three poses".into()));
    }
    check_spread(&reference.translations, "reference")?;
    check_spread(&est.translations, "estimated")?;
    let n = est.len() as f64;
    let mx = est.translations.iter().sum::<Vector3<f64>>() / n;
    let my = reference.translations.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in est.translations.iter().zip(&reference.translations) {
        cov += (y - my) * (x - mx).transpose();
        var_x += (x - mx).norm_squared();
    }
    cov /= n;
    var_x /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let trace_ds: f64 = (0..3).map(|i| svd.singular_values[i] * s[(i, i)]).sum();
    let scale = trace_ds / var_x;
    let translation = my - rotation * mx * scale;
    let transform = Sim3Transform::new(scale, rotation, translation)?;
    Ok((transform.apply(est), transform))
}

fn same_length(a: &PoseTrajectory, b: &PoseTrajectory, context: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            context,
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

fn rmse(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Absolute trajectory error: RMSE of per-frame position errors.
pub fn ate(est_aligned: &PoseTrajectory, reference: &PoseTrajectory) -> Result<(f64, Vec<f64>)> {
    same_length(est_aligned, reference, "ate")?;
    let per: Vec<f64> = est_aligned
        .translations
        .iter()
        .zip(&reference.translations)
        .map(|(e, r)| (e - r).norm())
        .collect();
    Ok((rmse(&per), per))
}

/// Relative translation error over consecutive pose pairs.
pub fn rpe_t(est_aligned: &PoseTrajectory, reference: &PoseTrajectory) -> Result<(f64, Vec<f64>)> {
    same_length(est_aligned, reference, "rpe_t")?;
    let per: Vec<f64> = (0..reference.len() - 1)
        .map(|i| (reference.relative_translation(i) - est_aligned.relative_translation(i)).norm())
        .collect();
    Ok((rmse(&per), per))
}

/// Angle in degrees of `a^T b`, with the cosine clamped to `[-1, 1]`.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    // atan2 keeps small angles accurate where acos of the trace loses half
    // the digits, and gives exactly 0 for a == b.
    let m = a.transpose() * b;
    let sin = 0.5 * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    let cos = 0.5 * (m.trace() - 1.0);
    sin.atan2(cos).to_degrees()
}

/// Relative rotation error in degrees over consecutive pose pairs.
pub fn rpe_r(est_aligned: &PoseTrajectory, reference: &PoseTrajectory) -> Result<(f64, Vec<f64>)> {
    same_length(est_aligned, reference, "rpe_r")?;
    let per: Vec<f64> = (0..reference.len() - 1)
        .map(|i| rotation_angle_deg(&reference.relative_rotation(i), &est_aligned.relative_rotation(i)))
        .collect();
    Ok((rmse(&per), per))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryMetrics {
    pub ate: f64,
    pub rpe_t: f64,
    pub rpe_r_deg: f64,
    pub scale: f64,
}

/// Aligns `est` to `reference`, then computes all three metrics.
pub fn evaluate(est: &PoseTrajectory, reference: &PoseTrajectory) -> Result<TrajectoryMetrics> {
    let (aligned, transform) = align_sim3(est, reference)?;
    Ok(TrajectoryMetrics {
        ate: ate(&aligned, reference)?.0,
        rpe_t: rpe_t(&aligned, reference)?.0,
        rpe_r_deg: rpe_r(&aligned, reference)?.0,
        scale: transform.scale,
    })
}

/// Nearest rotation to `m` in the Frobenius sense.
fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    u * s * v_t
}

/// Parses a pose file. Each non-empty line that is not a `#` comment holds
/// one pose in one of these forms (whitespace separated):
///
/// * `timestamp tx ty tz qw qx qy qz`
/// * 12 values: a row-major `3 x 4` matrix `[R | t]`, optionally preceded by a
///   timestamp (13 values)
/// * 16 values: a row-major `4 x 4` matrix, optionally preceded by a
///   timestamp (17 values)
///
/// Quaternions are normalised; matrix rotations within `1e-6` of orthonormal
/// are snapped to the nearest rotation.
pub fn parse_pose_text(text: &str, path: &Path) -> Result<PoseTrajectory> {
    let bad = |line: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut rotations = Vec::new();
    let mut translations = Vec::new();
    let mut stamps = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| bad(k + 1, format!("{t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(bad(k + 1, "non-finite value".into()));
        }
        let (stamp, r, t) = match vals.len() {
            8 => {
                let q = Quaternion::new(vals[4], vals[5], vals[6], vals[7]);
                if q.norm() < 1e-9 {
                    return Err(bad(k + 1, "zero quaternion".into()));
                }
                let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
                (Some(vals[0]), r, Vector3::new(vals[1], vals[2], vals[3]))
            }
            12 | 13 | 16 | 17 => {
                let off = vals.len() % 2;
                let m = &vals[off..];
                let r = Matrix3::from_fn(|i, j| m[i * 4 + j]);
                let t = Vector3::new(m[3], m[7], m[11]);
                if m.len() == 16 && m[12..] != [0.0, 0.0, 0.0, 1.0] {
                    return Err(bad(k + 1, "last matrix row must be 0 0 0 1".into()));
                }
                if check_rotation(&r).is_err()
                    && ((r.transpose() * r - Matrix3::identity()).abs().max() > 1e-6 || r.determinant() <= 0.0) {
                        return Err(bad(k + 1, "matrix is not a rotation".into()));
                    }
                (if off == 1 { Some(vals[0]) } else { None }, nearest_rotation(&r), t)
            }
            n => return Err(bad(k + 1, format!("expected 8, 12, 13, 16 or 17 values, found {n}"))),
        };
        rotations.push(r);
        translations.push(t);
        stamps.push(stamp);
    }
    let traj = PoseTrajectory::new(rotations, translations).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if stamps.iter().all(|s| s.is_some()) {
        traj.with_timestamps(stamps.into_iter().flatten().collect())
    } else {
        Ok(traj)
    }
}

pub fn read_pose_file(path: &Path) -> Result<PoseTrajectory> {
    parse_pose_text(&std::fs::read_to_string(path)?, path)
}

/// Renders a trajectory as `timestamp tx ty tz qw qx qy qz` lines; frames
/// without timestamps are numbered.
pub fn format_pose_text(traj: &PoseTrajectory) -> String {
    let mut out = String::from("# timestamp tx ty tz qw qx qy qz\n");
    for (i, (r, t)) in traj.rotations.iter().zip(&traj.translations).enumerate() {
        let q = UnitQuaternion::from_matrix(r);
        let stamp = traj.timestamps.as_ref().map_or(i as f64, |s| s[i]);
        let _ = writeln!(out, "{stamp} {} {} {} {} {} {} {}", t.x, t.y, t.z, q.w, q.i, q.j, q.k);
    }
    out
}

pub fn write_pose_file(path: &Path, traj: &PoseTrajectory) -> Result<()> {
    crate::io::write_atomic(path, format_pose_text(traj).as_bytes())
}
