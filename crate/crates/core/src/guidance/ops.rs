//! The per-step guidance operators.

use crate::error::{Error, Result};
use crate::flow::ChannelScore;
use crate::mask::ValidityMask;
use crate::tensor::LatentTensor;

use super::config::{DsgNormalization, GuidanceConfig};

/// Slack used when deciding the two DSG fields are already aligned.
pub const ALIGNED_SLACK: f64 = 4.0 * f64::EPSILON;

/// Norms below this make the DSG cosine undefined.
pub const MIN_FIELD_NORM: f64 = 1e-12;

fn check_pair(x0_hat: &LatentTensor, z_traj: &LatentTensor, mask: &ValidityMask, context: &'static str) -> Result<()> {
    x0_hat.ensure_same_shape(z_traj, context)?;
    mask.check_latent(x0_hat.shape(), context)
}

/// `M * z_traj + (1 - M) * x0_hat`, copying values so both ends are exact.
pub fn fuse_masked(x0_hat: &LatentTensor, z_traj: &LatentTensor, mask: &ValidityMask) -> Result<LatentTensor> {
    check_pair(x0_hat, z_traj, mask, "fuse_masked")?;
    let (x, z) = (x0_hat.as_array(), z_traj.as_array());
    LatentTensor::from_fn(x0_hat.shape(), |(c, t, y, xx)| {
        if mask.at(c, t, y, xx) {
            z[[c, t, y, xx]]
        } else {
            x[[c, t, y, xx]]
        }
    })
}

/// `(1 - w) * fused + w * eps`, with exact endpoints.
pub fn renoise(fused: &LatentTensor, eps: &LatentTensor, w: f64) -> Result<LatentTensor> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidRenoiseWeight(w));
    }
    fused.ensure_same_shape(eps, "irr_renoise")?;
    if w == 0.0 {
        return Ok(fused.clone());
    }
    if w == 1.0 {
        return Ok(eps.clone());
    }
    Ok(fused.lincomb(1.0 - w, eps, w))
}

/// Re-noises the fused estimate with the weight the config assigns to level
/// `index` of the schedule.
pub fn irr_renoise(
    fused: &LatentTensor,
    eps: &LatentTensor,
    index: usize,
    cfg: &GuidanceConfig,
    schedule: &crate::schedule::NoiseSchedule,
) -> Result<LatentTensor> {
    renoise(fused, eps, cfg.renoise_weight(schedule, index)?)
}

/// Outcome of the dynamic channel threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub selected: Vec<bool>,
    /// `None` when no channel was scorable.
    pub threshold: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Selection {
    pub fn all(channels: usize) -> Self {
        Self {
            selected: vec![true; channels],
            threshold: None,
            mean: None,
            std: None,
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.selected.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i).collect()
    }
}

/// Selects channels with `S >= mean - lambda * std` (population std over the
/// scorable channels). When all scores coincide every scorable channel is
/// selected; unscorable channels never are.
pub fn select_with_lambda(scores: &[Option<f64>], lambda: f64) -> Selection {
    let vals: Vec<f64> = scores.iter().flatten().copied().collect();
    if vals.is_empty() {
        log::warn!("no scorable channel; fusing nothing this step");
        return Selection {
            selected: vec![false; scores.len()],
            threshold: None,
            mean: None,
            std: None,
        };
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let delta = mean - lambda * std;
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let all_equal = lo == hi;
    let selected = scores.iter().map(|s| s.is_some_and(|s| all_equal || s >= delta)).collect();
    Selection {
        selected,
        threshold: Some(delta),
        mean: Some(mean),
        std: Some(std),
    }
}

/// Threshold selection at progress `step` of a `total`-step run.
pub fn flf_select(scores: &ChannelScore, step: usize, total: usize, cfg: &GuidanceConfig) -> Selection {
    select_with_lambda(&scores.scores(), cfg.lambda_at(step, total))
}

/// Fuses only the selected channels; the rest are returned unchanged.
pub fn flf_update(x0_hat: &LatentTensor, z_traj: &LatentTensor, masks: &ValidityMask, selected: &[bool]) -> Result<LatentTensor> {
    check_pair(x0_hat, z_traj, masks, "flf_update")?;
    if selected.len() != x0_hat.channels() {
        return Err(Error::LengthMismatch {
            context: "flf selection",
            left: x0_hat.channels(),
            right: selected.len(),
        });
    }
    let (x, z) = (x0_hat.as_array(), z_traj.as_array());
    LatentTensor::from_fn(x0_hat.shape(), |(c, t, y, xx)| {
        if selected[c] && masks.at(c, t, y, xx) {
            z[[c, t, y, xx]]
        } else {
            x[[c, t, y, xx]]
        }
    })
}

/// Result of the dual-path correction. `alpha` is `None` when either field
/// is (numerically) zero and no correction was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct DsgOutput {
    pub v_corr: LatentTensor,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

pub fn dsg_correct(v_traj: &LatentTensor, v_ori: &LatentTensor, rho: f64) -> Result<DsgOutput> {
    dsg_correct_with(v_traj, v_ori, rho, DsgNormalization::MatchGuidedNorm)
}

/// `v_traj + rho * beta * (v_traj - alpha * v_ori')`, with `alpha` the cosine
/// between the fields, `beta = sqrt(1 - alpha^2)` and `v_ori'` rescaled to the
/// norm of `v_traj`.
pub fn dsg_correct_with(v_traj: &LatentTensor, v_ori: &LatentTensor, rho: f64, norm: DsgNormalization) -> Result<DsgOutput> {
    v_traj.ensure_same_shape(v_ori, "dsg_correct")?;
    if !rho.is_finite() {
        return Err(Error::InvalidConfig(format!("rho {rho} must be finite")));
    }
    let (nt, no) = (v_traj.norm(), v_ori.norm());
    if nt < MIN_FIELD_NORM || no < MIN_FIELD_NORM {
        return Ok(DsgOutput {
            v_corr: v_traj.clone(),
            alpha: None,
            beta: None,
        });
    }
    let mut alpha = (v_traj.dot(v_ori) / (nt * no)).clamp(-1.0, 1.0);
    if 1.0 - alpha <= ALIGNED_SLACK {
        alpha = 1.0;
    }
    let beta = (1.0 - alpha * alpha).max(0.0).sqrt();
    if rho == 0.0 || beta == 0.0 {
        return Ok(DsgOutput {
            v_corr: v_traj.clone(),
            alpha: Some(alpha),
            beta: Some(beta),
        });
    }
    let k = rho * beta;
    let ratio = nt / no;
    let corrected = v_traj.zip_map(v_ori, |t, o| t + k * (t - alpha * ratio * o));
    let v_corr = match norm {
        DsgNormalization::MatchGuidedNorm => corrected,
        DsgNormalization::UnitThenRestoreNorm => {
            let n = corrected.norm();
            if n < MIN_FIELD_NORM {
                corrected
            } else {
                corrected.scale(nt / n)
            }
        }
    };
    Ok(DsgOutput {
        v_corr,
        alpha: Some(alpha),
        beta: Some(beta),
    })
}
