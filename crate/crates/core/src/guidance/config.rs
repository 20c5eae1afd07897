use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FarnebackParams, FlowMetricConfig};
use crate::schedule::{NoiseSchedule, ScheduleKind};

/// Weight `w` of fresh noise when re-noising the fused estimate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RenoiseScheduler {
    /// `FlowLinear` on flow schedules, `DdimSqrt` on DDIM schedules.
    #[default]
    Matched,
    /// `w = t` at the current grid point.
    FlowLinear,
    /// `w = sqrt(1 - alpha_bar)` at the current level.
    DdimSqrt,
    /// `weights[i]` at level index `i` (data end first).
    Custom { weights: Vec<f64> },
}

/// Where the re-noising draw comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseReuse {
    /// The oracle's own noise estimate at the current latent. Unobserved
    /// cells are then left exactly where the plain sampler has them.
    #[default]
    Predicted,
    /// The chain's initial noise, reused at every step.
    Initial,
    /// A fresh keyed draw per step and recursion.
    PerStep,
}

/// How the unguided field is brought to the guided field's length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsgNormalization {
    /// Rescale the unguided field to the guided norm.
    #[default]
    MatchGuidedNorm,
    /// As above, then rescale the corrected field back to the guided norm.
    UnitThenRestoreNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub irr_enabled: bool,
    pub irr_recursions: usize,
    pub renoise_scheduler: RenoiseScheduler,
    pub noise_reuse: NoiseReuse,
    pub flf_enabled: bool,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub dsg_enabled: bool,
    pub rho: f64,
    pub dsg_normalization: DsgNormalization,
    pub flow_metrics: FlowMetricConfig,
    pub flow_params: FarnebackParams,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            irr_enabled: true,
            irr_recursions: 1,
            renoise_scheduler: RenoiseScheduler::Matched,
            noise_reuse: NoiseReuse::Predicted,
            flf_enabled: true,
            lambda_start: 1.5,
            lambda_end: 0.0,
            dsg_enabled: true,
            rho: 1.0,
            dsg_normalization: DsgNormalization::MatchGuidedNorm,
            flow_metrics: FlowMetricConfig::default(),
            flow_params: FarnebackParams::default(),
        }
    }
}

impl GuidanceConfig {
    /// Every mechanism off: the plain sampler.
    pub fn null() -> Self {
        Self {
            irr_enabled: false,
            flf_enabled: false,
            dsg_enabled: false,
            ..Self::default()
        }
    }

    pub fn with_mechanisms(irr: bool, flf: bool, dsg: bool) -> Self {
        Self {
            irr_enabled: irr,
            flf_enabled: flf,
            dsg_enabled: dsg,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.irr_recursions == 0 {
            return Err(Error::InvalidConfig("irr_recursions must be at least 1".into()));
        }
        if !(self.lambda_start.is_finite() && self.lambda_end.is_finite()) || self.lambda_start < self.lambda_end {
            return Err(Error::InvalidConfig(format!(
                "lambda must run loose to tight (start {} >= end {})",
                self.lambda_start, self.lambda_end
            )));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::InvalidConfig(format!("rho {} must be finite and non-negative", self.rho)));
        }
        if let RenoiseScheduler::Custom { weights } = &self.renoise_scheduler {
            if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
                return Err(Error::InvalidRenoiseWeight(*w));
            }
        }
        self.flow_metrics.validate()?;
        self.flow_params.validate()
    }

    /// `lambda` at progress `step` (0 = first denoising step) of `total`.
    pub fn lambda_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lambda_start;
        }
        let s = step.min(total - 1) as f64 / (total - 1) as f64;
        self.lambda_start + (self.lambda_end - self.lambda_start) * s
    }

    pub fn renoise_weight(&self, schedule: &NoiseSchedule, index: usize) -> Result<f64> {
        schedule.check_index(index)?;
        let w = match (&self.renoise_scheduler, schedule.kind()) {
            (RenoiseScheduler::Matched, ScheduleKind::LinearFlow) | (RenoiseScheduler::FlowLinear, _) => schedule
                .t(index)
                .ok_or_else(|| Error::Incompatible("a flow re-noise weight needs a linear-flow schedule".into()))?,
            (RenoiseScheduler::Matched, ScheduleKind::DiscreteDdim) | (RenoiseScheduler::DdimSqrt, _) => {
                schedule.level(index).sigma
            }
            (RenoiseScheduler::Custom { weights }, _) => *weights.get(index).ok_or_else(|| {
                Error::InvalidConfig(format!("custom re-noise table has no entry for level {index}"))
            })?,
        };
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::InvalidRenoiseWeight(w));
        }
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_runs_loose_to_tight() {
        let c = GuidanceConfig::default();
        assert_eq!(c.lambda_at(0, 11), 1.5);
        assert_eq!(c.lambda_at(10, 11), 0.0);
        assert!((c.lambda_at(5, 11) - 0.75).abs() < 1e-15);
        let bad = GuidanceConfig {
            lambda_start: 0.0,
            lambda_end: 1.0,
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn weights_follow_schedule() {
        let c = GuidanceConfig::default();
        let flow = NoiseSchedule::uniform_flow(4).unwrap();
        assert_eq!(c.renoise_weight(&flow, 4).unwrap(), 1.0);
        assert_eq!(c.renoise_weight(&flow, 1).unwrap(), 0.25);
        let ddim = NoiseSchedule::discrete(vec![1.0, 0.64]).unwrap();
        assert!((c.renoise_weight(&ddim, 1).unwrap() - 0.6).abs() < 1e-15);
        let custom = GuidanceConfig {
            renoise_scheduler: RenoiseScheduler::Custom { weights: vec![0.0, 0.5] },
            ..c
        };
        assert_eq!(custom.renoise_weight(&ddim, 1).unwrap(), 0.5);
    }
}
