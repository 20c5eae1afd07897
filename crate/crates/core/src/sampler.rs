//! Deterministic samplers: DDIM and the straight-line flow Euler solver.
//!
//! Both samplers consume an oracle prediction at the current level and turn
//! it into a clean-signal estimate `x0_hat`:
//!
//! ```text
//! epsilon convention:  x0_hat = (x_t - sigma_t * eps_hat) / alpha_t
//! velocity convention: x0_hat = x_t - t * v_hat          (linear flow only)
//! ```
//!
//! For a DDIM schedule `alpha_t = sqrt(alpha_bar_t)` and
//! `sigma_t = sqrt(1 - alpha_bar_t)`; for a linear flow `alpha_t = 1 - t` and
//! `sigma_t = t`. A DDIM step then re-blends the estimate with the same noise
//! at the next level, while the Euler step follows `dx/dt = eps - x0`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::oracle::{Convention, DenoiserOracle};
use crate::schedule::{NoiseLevel, NoiseSchedule, ScheduleKind};
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub x: LatentTensor,
    /// Current level index; `schedule.steps()` at the noise end, `0` when done.
    pub step_index: usize,
    pub schedule: Arc<NoiseSchedule>,
    pub rng_seed: u64,
}

impl SamplerState {
    /// A chain starting from `x` at the noise end of `schedule`.
    pub fn start(x: LatentTensor, schedule: Arc<NoiseSchedule>, rng_seed: u64) -> Self {
        let step_index = schedule.steps();
        Self {
            x,
            step_index,
            schedule,
            rng_seed,
        }
    }

    pub fn at(x: LatentTensor, step_index: usize, schedule: Arc<NoiseSchedule>, rng_seed: u64) -> Result<Self> {
        schedule.check_index(step_index)?;
        Ok(Self {
            x,
            step_index,
            schedule,
            rng_seed,
        })
    }

    pub fn level(&self) -> NoiseLevel {
        self.schedule.level(self.step_index)
    }

    pub fn is_done(&self) -> bool {
        self.step_index == 0
    }
}

/// Clean-signal and noise estimates consistent with `x = alpha x0 + sigma eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub x0: LatentTensor,
    pub eps: LatentTensor,
}

impl Estimate {
    /// Straight-line velocity `eps - x0`.
    pub fn velocity(&self) -> LatentTensor {
        self.eps.lincomb(1.0, &self.x0, -1.0)
    }
}

/// Estimates at `x` for level `index` of `schedule`.
pub fn estimate(
    x: &LatentTensor,
    index: usize,
    schedule: &NoiseSchedule,
    oracle: &DenoiserOracle,
) -> Result<Estimate> {
    schedule.check_index(index)?;
    let level = schedule.level(index);
    let pred = oracle.evaluate(x, level)?;
    x.ensure_same_shape(&pred, "oracle output")?;
    match oracle.convention() {
        Convention::Epsilon => {
            match x0_from_eps(x, &pred, level, schedule.alpha_bar_floor()) {
                Ok(x0) => Ok(Estimate { x0, eps: pred }),
                // No signal left to invert; an analytic prior still knows x0.
                Err(e @ Error::ScheduleSingularity { .. }) => match oracle.posterior(x, level) {
                    Ok((x0, eps)) => Ok(Estimate { x0, eps }),
                    Err(_) => Err(e),
                },
                Err(e) => Err(e),
            }
        }
        Convention::Velocity => {
            let t = velocity_time(schedule, index)?;
            let x0 = x.lincomb(1.0, &pred, -t);
            let eps = x0.lincomb(1.0, &pred, 1.0);
            Ok(Estimate { x0, eps })
        }
    }
}

fn velocity_time(schedule: &NoiseSchedule, index: usize) -> Result<f64> {
    schedule.t(index).ok_or_else(|| {
        Error::Incompatible("velocity predictions need a linear-flow schedule".into())
    })
}

/// `x0 = (x - sigma eps) / alpha`, refusing levels with `alpha^2 < floor`.
pub fn x0_from_eps(x: &LatentTensor, eps: &LatentTensor, level: NoiseLevel, floor: f64) -> Result<LatentTensor> {
    let alpha_bar = level.alpha_bar();
    if alpha_bar < floor || alpha_bar == 0.0 {
        return Err(Error::ScheduleSingularity { alpha_bar, floor });
    }
    let NoiseLevel { alpha, sigma } = level;
    let x0 = x.zip_map(eps, |xi, ei| (xi - sigma * ei) / alpha);
    if !x0.is_finite() {
        return Err(Error::NonFinite("x0 estimate".into()));
    }
    Ok(x0)
}

/// Splits a straight-line velocity into estimates at `level`:
/// `x0 = (x - sigma v) / (alpha + sigma)`, `eps = (x + alpha v) / (alpha + sigma)`.
pub fn estimate_from_velocity(x: &LatentTensor, v: &LatentTensor, level: NoiseLevel) -> Estimate {
    let NoiseLevel { alpha, sigma } = level;
    let s = alpha + sigma;
    Estimate {
        x0: x.zip_map(v, |xi, vi| (xi - sigma * vi) / s),
        eps: x.zip_map(v, |xi, vi| (xi + alpha * vi) / s),
    }
}

/// The one-step clean estimate for the current state.
pub fn predict_x0(state: &SamplerState, oracle: &DenoiserOracle) -> Result<LatentTensor> {
    Ok(estimate(&state.x, state.step_index, &state.schedule, oracle)?.x0)
}

/// Re-blends an estimate at level `to`. Equal levels return `x` unchanged.
pub fn ddim_transition(x: &LatentTensor, est: &Estimate, from: NoiseLevel, to: NoiseLevel) -> LatentTensor {
    if from == to {
        return x.clone();
    }
    est.x0.lincomb(to.alpha, &est.eps, to.sigma)
}

pub fn ddim_step(state: &SamplerState, oracle: &DenoiserOracle) -> Result<SamplerState> {
    if state.step_index == 0 {
        return Err(Error::InvalidInput("ddim_step at the data end".into()));
    }
    let est = estimate(&state.x, state.step_index, &state.schedule, oracle)?;
    let from = state.level();
    let to = state.schedule.level(state.step_index - 1);
    Ok(SamplerState {
        x: ddim_transition(&state.x, &est, from, to),
        step_index: state.step_index - 1,
        schedule: state.schedule.clone(),
        rng_seed: state.rng_seed,
    })
}

/// Straight-line velocity at the current state. Epsilon oracles are converted
/// with `v = (eps - x) / (1 - t)`, which is undefined at `t = 1`.
pub fn flow_velocity(state: &SamplerState, oracle: &DenoiserOracle) -> Result<LatentTensor> {
    let t = state
        .schedule
        .t(state.step_index)
        .ok_or_else(|| Error::Incompatible("flow Euler needs a linear-flow schedule".into()))?;
    let pred = oracle.evaluate(&state.x, state.level())?;
    state.x.ensure_same_shape(&pred, "oracle output")?;
    match oracle.convention() {
        Convention::Velocity => Ok(pred),
        Convention::Epsilon => {
            if t >= 1.0 {
                return Err(Error::FlowEndpointSingularity);
            }
            Ok(pred.zip_map(&state.x, |e, xi| (e - xi) / (1.0 - t)))
        }
    }
}

/// Moves `x` from the current grid time to the previous one along `v`.
pub fn euler_transition(x: &LatentTensor, v: &LatentTensor, t: f64, t_prev: f64) -> LatentTensor {
    x.lincomb(1.0, v, -(t - t_prev))
}

pub fn flow_euler_step(state: &SamplerState, oracle: &DenoiserOracle) -> Result<SamplerState> {
    if state.step_index == 0 {
        return Err(Error::InvalidInput("flow_euler_step at the data end".into()));
    }
    if state.schedule.kind() != ScheduleKind::LinearFlow {
        return Err(Error::Incompatible("flow Euler needs a linear-flow schedule".into()));
    }
    let v = flow_velocity(state, oracle)?;
    let t = state.schedule.t(state.step_index).unwrap_or_default();
    let t_prev = state.schedule.t(state.step_index - 1).unwrap_or_default();
    Ok(SamplerState {
        x: euler_transition(&state.x, &v, t, t_prev),
        step_index: state.step_index - 1,
        schedule: state.schedule.clone(),
        rng_seed: state.rng_seed,
    })
}

/// Classifier-free guidance: `cond + weight * (cond - uncond)`.
pub fn cfg_combine(cond: &LatentTensor, uncond: &LatentTensor, weight: f64) -> Result<LatentTensor> {
    cond.ensure_same_shape(uncond, "cfg_combine")?;
    Ok(cond.zip_map(uncond, |c, u| c + weight * (c - u)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddim,
    FlowEuler,
}

impl SamplerKind {
    pub fn step(self, state: &SamplerState, oracle: &DenoiserOracle) -> Result<SamplerState> {
        match self {
            SamplerKind::Ddim => ddim_step(state, oracle),
            SamplerKind::FlowEuler => flow_euler_step(state, oracle),
        }
    }
}

/// Runs a full chain from `initial` at the noise end to the data end.
pub fn sample(
    kind: SamplerKind,
    initial: LatentTensor,
    schedule: Arc<NoiseSchedule>,
    oracle: &DenoiserOracle,
    rng_seed: u64,
) -> Result<LatentTensor> {
    let mut state = SamplerState::start(initial, schedule, rng_seed);
    while !state.is_done() {
        state = kind.step(&state, oracle)?;
    }
    Ok(state.x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub ddim_terminal: LatentTensor,
    pub flow_terminal: LatentTensor,
    pub max_deviation: f64,
}

/// DDIM against flow Euler on one linear-flow schedule (`alpha = 1 - t`,
/// `sigma = t`), both started from `initial`.
///
/// DDIM queries the oracle for epsilon and the flow for velocity when the
/// oracle can answer in both; constant oracles are used as given. At `t = 1`
/// the epsilon route has no signal to invert and falls back on the oracle's
/// posterior.
pub fn equivalence_on_grid(
    oracle: &DenoiserOracle,
    t_grid: &[f64],
    initial: &LatentTensor,
) -> Result<EquivalenceReport> {
    let schedule = Arc::new(NoiseSchedule::linear_flow(t_grid.to_vec())?);
    let ddim_oracle = oracle
        .in_convention(Convention::Epsilon)
        .unwrap_or_else(|| oracle.clone());
    let flow_oracle = oracle
        .in_convention(Convention::Velocity)
        .unwrap_or_else(|| oracle.clone());
    let ddim_terminal = sample(SamplerKind::Ddim, initial.clone(), schedule.clone(), &ddim_oracle, 0)?;
    let flow_terminal = sample(SamplerKind::FlowEuler, initial.clone(), schedule, &flow_oracle, 0)?;
    let max_deviation = ddim_terminal.max_abs_diff(&flow_terminal);
    Ok(EquivalenceReport {
        ddim_terminal,
        flow_terminal,
        max_deviation,
    })
}

/// Absolute slack for comparing equivalence deviations across step counts.
/// On a shared linear schedule the two samplers agree algebraically, so what
/// is left is rounding noise that does not shrink with more steps.
pub const EQUIVALENCE_ROUNDOFF: f64 = 1e-12;

/// Maximum terminal deviation between the two samplers on a uniform grid.
pub fn ddim_fm_equivalence_check(oracle: &DenoiserOracle, steps: usize, initial: &LatentTensor) -> Result<f64> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("steps must be positive".into()));
    }
    Ok(equivalence_on_grid(oracle, &NoiseSchedule::uniform_grid(steps), initial)?.max_deviation)
}
