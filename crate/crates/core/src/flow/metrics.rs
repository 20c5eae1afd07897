//! Masked flow-error metrics.

use serde::{Deserialize, Serialize};

use super::FlowField;
use crate::error::{Error, Result};
use crate::mask::ValidityMask;

/// Vectors shorter than this count as zero.
pub const ZERO_FLOW: f64 = 1e-8;

/// How the two outlier conditions of Fl-all combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlRule {
    /// Outlier if the end-point error or the relative error is too large.
    #[default]
    Or,
    /// Outlier only if both are too large.
    And,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowMetricConfig {
    pub n_e: f64,
    /// Angular saturation constant in degrees.
    pub n_a_deg: f64,
    pub n_f: f64,
    /// Weights of the end-point, angular and outlier terms.
    pub gamma: [f64; 3],
    pub fl_epe_threshold: f64,
    pub fl_rel_threshold: f64,
    pub fl_rule: FlRule,
}

impl Default for FlowMetricConfig {
    fn default() -> Self {
        Self {
            n_e: 10.0,
            n_a_deg: 30.0,
            n_f: 0.5,
            gamma: [0.4, 0.3, 0.3],
            fl_epe_threshold: 3.0,
            fl_rel_threshold: 0.05,
            fl_rule: FlRule::Or,
        }
    }
}

impl FlowMetricConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.n_e, self.n_a_deg, self.n_f, self.fl_epe_threshold, self.fl_rel_threshold];
        if !positive.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig("flow normalisers and thresholds must be positive".into()));
        }
        if !self.gamma.iter().all(|g| *g > 0.0) || (self.gamma.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("gamma {:?} must be positive and sum to 1", self.gamma)));
        }
        Ok(())
    }

    pub fn n_a_rad(&self) -> f64 {
        self.n_a_deg.to_radians()
    }

    /// `[min(epe / n_e, 1), min(ae / n_a, 1), min(fl / n_f, 1)]`.
    pub fn normalized(&self, epe: f64, ae_rad: f64, fl: f64) -> [f64; 3] {
        [
            (epe / self.n_e).min(1.0),
            (ae_rad / self.n_a_rad()).min(1.0),
            (fl / self.n_f).min(1.0),
        ]
    }

    /// The motion-similarity score, in `[0, 1]`.
    pub fn score(&self, epe: f64, ae_rad: f64, fl: f64) -> f64 {
        let n = self.normalized(epe, ae_rad, fl);
        self.gamma.iter().zip(n).map(|(g, v)| g * (1.0 - v)).sum()
    }
}

fn check(pred: &FlowField, gt: &FlowField, mask: &ValidityMask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            context: "flow metric",
            expected: gt.shape().to_vec(),
            found: pred.shape().to_vec(),
        });
    }
    let (p, h, w) = gt.dims();
    if mask.shape() != [1, p, h, w] {
        return Err(Error::ShapeMismatch {
            context: "flow metric mask",
            expected: vec![1, p, h, w],
            found: mask.shape().to_vec(),
        });
    }
    Ok(())
}

/// Calls `f(pred, gt)` for every masked pixel in row-major order.
fn for_each_valid(pred: &FlowField, gt: &FlowField, mask: &ValidityMask, mut f: impl FnMut((f64, f64), (f64, f64))) {
    let (p, h, w) = gt.dims();
    let m = mask.as_array();
    for k in 0..p {
        for y in 0..h {
            for x in 0..w {
                if m[[0, k, y, x]] {
                    f(pred.vector(k, y, x), gt.vector(k, y, x));
                }
            }
        }
    }
}

pub fn masked_epe(pred: &FlowField, gt: &FlowField, mask: &ValidityMask) -> Result<f64> {
    check(pred, gt, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for_each_valid(pred, gt, mask, |(pu, pv), (gu, gv)| {
        sum += (pu - gu).hypot(pv - gv);
        n += 1;
    });
    if n == 0 {
        return Err(Error::EmptyValidRegion);
    }
    Ok(sum / n as f64)
}

/// Mean angle in radians over masked pixels where both vectors are non-zero.
pub fn masked_ae(pred: &FlowField, gt: &FlowField, mask: &ValidityMask) -> Result<f64> {
    check(pred, gt, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for_each_valid(pred, gt, mask, |(pu, pv), (gu, gv)| {
        let (np, ng) = (pu.hypot(pv), gu.hypot(gv));
        if np < ZERO_FLOW || ng < ZERO_FLOW {
            return;
        }
        n += 1;
        // Same angle as arccos of the normalised dot product, without its
        // loss of precision near 0 and pi.
        sum += (pu * gv - pv * gu).abs().atan2(pu * gu + pv * gv);
    });
    if n == 0 {
        return Err(Error::EmptyValidRegion);
    }
    Ok(sum / n as f64)
}

pub fn is_outlier(epe: f64, gt_norm: f64, cfg: &FlowMetricConfig) -> bool {
    let big = epe > cfg.fl_epe_threshold;
    match cfg.fl_rule {
        FlRule::Or => big || (gt_norm > ZERO_FLOW && epe / gt_norm > cfg.fl_rel_threshold),
        FlRule::And => big && (gt_norm <= ZERO_FLOW || epe / gt_norm > cfg.fl_rel_threshold),
    }
}

/// Fraction of masked pixels flagged as outliers.
pub fn fl_all(pred: &FlowField, gt: &FlowField, mask: &ValidityMask, cfg: &FlowMetricConfig) -> Result<f64> {
    check(pred, gt, mask)?;
    let (mut bad, mut n) = (0usize, 0usize);
    for_each_valid(pred, gt, mask, |(pu, pv), (gu, gv)| {
        if is_outlier((pu - gu).hypot(pv - gv), gu.hypot(gv), cfg) {
            bad += 1;
        }
        n += 1;
    });
    if n == 0 {
        return Err(Error::EmptyValidRegion);
    }
    Ok(bad as f64 / n as f64)
}
