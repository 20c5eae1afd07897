//! Noise schedules.
//!
//! A schedule is a list of `steps + 1` noise levels indexed from the data
//! end (`0`) to the noise end (`steps`). Sampling starts at index `steps` and
//! walks down to `0`.
//!
//! Two parameterisations are supported:
//!
//! * [`ScheduleKind::DiscreteDdim`]: cumulative attenuation `alpha_bar`, with
//!   signal scale `sqrt(alpha_bar)` and noise scale `sqrt(1 - alpha_bar)`.
//! * [`ScheduleKind::LinearFlow`]: the straight-line path
//!   `x_t = (1 - t) x0 + t eps`, i.e. signal scale `1 - t` and noise scale `t`.
//!   The two scales are not tied by `alpha^2 + sigma^2 = 1`.

use crate::error::{Error, Result};

/// Default lower bound on `alpha_bar` below which `x0` extraction is refused.
pub const DEFAULT_ALPHA_BAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    DiscreteDdim,
    LinearFlow,
}

/// Signal and noise scale of one level: `x = alpha * x0 + sigma * eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseLevel {
    pub fn alpha_bar(&self) -> f64 {
        self.alpha * self.alpha
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    /// `alpha_bar` for DDIM, `t` for linear flow; index 0 is the data end.
    levels: Vec<f64>,
    alpha_bar_floor: f64,
}

impl NoiseSchedule {
    /// A DDIM schedule from cumulative attenuations ordered data end first.
    pub fn discrete(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidSchedule("need at least two levels".into()));
        }
        if let Some(a) = alpha_bar.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::InvalidSchedule(format!("alpha_bar {a} outside (0, 1]")));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidSchedule(
                "alpha_bar must be strictly decreasing from the data end".into(),
            ));
        }
        Ok(Self {
            kind: ScheduleKind::DiscreteDdim,
            levels: alpha_bar,
            alpha_bar_floor: DEFAULT_ALPHA_BAR_FLOOR,
        })
    }

    /// A linear-flow schedule on a strictly increasing grid in `[0, 1]`.
    pub fn linear_flow(t_grid: Vec<f64>) -> Result<Self> {
        if t_grid.len() < 2 {
            return Err(Error::InvalidSchedule("need at least two grid points".into()));
        }
        if let Some(t) = t_grid.iter().find(|t| !(**t >= 0.0 && **t <= 1.0)) {
            return Err(Error::InvalidSchedule(format!("t = {t} outside [0, 1]")));
        }
        if t_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSchedule("t grid must be strictly increasing".into()));
        }
        Ok(Self {
            kind: ScheduleKind::LinearFlow,
            levels: t_grid,
            alpha_bar_floor: DEFAULT_ALPHA_BAR_FLOOR,
        })
    }

    /// `t_k = k / steps`, `k = 0..=steps`.
    pub fn uniform_grid(steps: usize) -> Vec<f64> {
        (0..=steps).map(|k| k as f64 / steps as f64).collect()
    }

    pub fn uniform_flow(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("steps must be positive".into()));
        }
        Self::linear_flow(Self::uniform_grid(steps))
    }

    /// DDIM schedule sharing a flow grid: `alpha_bar(t) = (1 - t)^2`.
    ///
    /// `alpha_bar` vanishes at `t = 1`, where `x0` cannot be recovered from an
    /// epsilon prediction, so the noise end is raised to the schedule floor.
    pub fn ddim_from_flow_grid(t_grid: &[f64]) -> Result<Self> {
        let floor = DEFAULT_ALPHA_BAR_FLOOR;
        let alpha_bar = t_grid.iter().map(|t| ((1.0 - t) * (1.0 - t)).max(floor)).collect();
        Self::discrete(alpha_bar)
    }

    pub fn ddim_matching_flow(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("steps must be positive".into()));
        }
        Self::ddim_from_flow_grid(&Self::uniform_grid(steps))
    }

    pub fn with_alpha_bar_floor(mut self, floor: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&floor) {
            return Err(Error::InvalidSchedule(format!("alpha_bar floor {floor} outside [0, 1)")));
        }
        self.alpha_bar_floor = floor;
        Ok(self)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of denoising steps (levels minus one).
    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn alpha_bar_floor(&self) -> f64 {
        self.alpha_bar_floor
    }

    /// Raw level values: `alpha_bar` (DDIM) or `t` (flow).
    pub fn raw_levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn level(&self, index: usize) -> NoiseLevel {
        let v = self.levels[index];
        match self.kind {
            ScheduleKind::DiscreteDdim => NoiseLevel {
                alpha: v.sqrt(),
                sigma: (1.0 - v).sqrt(),
            },
            ScheduleKind::LinearFlow => NoiseLevel {
                alpha: 1.0 - v,
                sigma: v,
            },
        }
    }

    pub fn alpha_bar(&self, index: usize) -> f64 {
        match self.kind {
            ScheduleKind::DiscreteDdim => self.levels[index],
            ScheduleKind::LinearFlow => self.level(index).alpha_bar(),
        }
    }

    /// Flow time at `index`; only meaningful for linear-flow schedules.
    pub fn t(&self, index: usize) -> Option<f64> {
        match self.kind {
            ScheduleKind::LinearFlow => Some(self.levels[index]),
            ScheduleKind::DiscreteDdim => None,
        }
    }

    pub(crate) fn check_index(&self, index: usize) -> Result<()> {
        if index > self.steps() {
            return Err(Error::InvalidInput(format!(
                "step index {index} outside [0, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}
