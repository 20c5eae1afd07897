//! Trajectory guidance for a running sampler.
//!
//! At each step the clean estimate is overwritten with the trajectory latent
//! where it is observed (optionally only in channels whose motion agrees with
//! the trajectory), re-noised back to the current level, and the step is taken
//! from the refined latent. The velocity used for the step may be corrected
//! against the unguided velocity.

pub mod config;
pub mod ops;
pub mod trace;

use std::sync::Arc;

pub use config::{DsgNormalization, GuidanceConfig, NoiseReuse, RenoiseScheduler};
pub use ops::{dsg_correct, dsg_correct_with, flf_select, flf_update, fuse_masked, irr_renoise, renoise, select_with_lambda, DsgOutput, Selection};
pub use trace::{digest, observed_deviation, GuidanceTrace, TraceEntry};

use crate::error::{Error, Result};
use crate::flow::FlowScorer;
use crate::mask::ValidityMask;
use crate::oracle::DenoiserOracle;
use crate::rng::{KeyedRng, Purpose};
use crate::sampler::{ddim_transition, estimate, estimate_from_velocity, euler_transition, SamplerKind, SamplerState};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::LatentTensor;

/// The sampler that matches a schedule's parameterisation.
pub fn sampler_for(schedule: &NoiseSchedule) -> SamplerKind {
    match schedule.kind() {
        ScheduleKind::DiscreteDdim => SamplerKind::Ddim,
        ScheduleKind::LinearFlow => SamplerKind::FlowEuler,
    }
}

fn finite(x: LatentTensor, level: usize, what: &'static str) -> Result<LatentTensor> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteAtStep { step: level, what })
    }
}

/// Runs a guided chain from `initial_noise` to the data end.
///
/// With IRR disabled the other two mechanisms have nothing to act on, and
/// the chain is the plain sampler.
pub fn guided_sample(
    initial_noise: &LatentTensor,
    oracle: &DenoiserOracle,
    z_traj: &LatentTensor,
    masks: &ValidityMask,
    cfg: &GuidanceConfig,
    schedule: Arc<NoiseSchedule>,
    seed: u64,
) -> Result<(LatentTensor, GuidanceTrace)> {
    cfg.validate()?;
    initial_noise.ensure_same_shape(z_traj, "trajectory latent")?;
    masks.check_latent(initial_noise.shape(), "guidance mask")?;
    let kind = sampler_for(&schedule);
    let scorer = if cfg.irr_enabled && cfg.flf_enabled {
        Some(FlowScorer::new(z_traj, masks, &cfg.flow_metrics, &cfg.flow_params)?)
    } else {
        None
    };
    let rng = KeyedRng::new(seed);
    let total = schedule.steps();
    let mut state = SamplerState::start(initial_noise.clone(), schedule.clone(), seed);
    let mut trace = GuidanceTrace::default();

    for step in 0..total {
        let index = state.step_index;
        let level = schedule.level(index);
        let mut entry = TraceEntry::new(step, index, level.sigma);

        if !cfg.irr_enabled {
            state = kind.step(&state, oracle)?;
            state.x = finite(state.x, index, "latent")?;
            trace.push(entry);
            continue;
        }

        let est_ori = estimate(&state.x, index, &schedule, oracle)?;
        entry.observed_deviation = observed_deviation(&est_ori.x0, z_traj, masks);
        let w = cfg.renoise_weight(&schedule, index)?;
        entry.renoise_weight = Some(w);

        let mut refined = state.x.clone();
        for r in 0..cfg.irr_recursions {
            let current = if r == 0 {
                est_ori.clone()
            } else {
                estimate(&refined, index, &schedule, oracle)?
            };
            let x0 = current.x0;
            let fused = match &scorer {
                Some(scorer) => {
                    let scores = scorer.score(&x0)?;
                    let lambda = cfg.lambda_at(step, total);
                    let sel = select_with_lambda(&scores.scores(), lambda);
                    let fused = flf_update(&x0, z_traj, masks, &sel.selected)?;
                    entry.lambda = Some(lambda);
                    entry.delta = sel.threshold;
                    entry.mean_score = sel.mean;
                    entry.std_score = sel.std;
                    entry.scores = Some(scores.scores());
                    entry.selected = Some(sel.selected);
                    fused
                }
                None => fuse_masked(&x0, z_traj, masks)?,
            };
            let eps = match cfg.noise_reuse {
                NoiseReuse::Predicted => current.eps,
                NoiseReuse::Initial => initial_noise.clone(),
                NoiseReuse::PerStep => rng.normal(initial_noise.shape(), Purpose::Renoise, index as u32, r as u16),
            };
            entry.eps_digest = Some(digest(&eps));
            refined = finite(renoise(&fused, &eps, w)?, index, "re-noised latent")?;
        }

        let est_traj = estimate(&refined, index, &schedule, oracle)?;
        let to = schedule.level(index - 1);
        let next = if cfg.dsg_enabled {
            let v_traj = est_traj.velocity();
            let out = dsg_correct_with(&v_traj, &est_ori.velocity(), cfg.rho, cfg.dsg_normalization)?;
            entry.alpha = out.alpha;
            entry.beta = out.beta;
            entry.correction_norm = Some(out.v_corr.lincomb(1.0, &v_traj, -1.0).norm());
            match kind {
                SamplerKind::FlowEuler => {
                    let (t, t_prev) = (level.sigma, to.sigma);
                    euler_transition(&refined, &out.v_corr, t, t_prev)
                }
                SamplerKind::Ddim => {
                    let est = estimate_from_velocity(&refined, &out.v_corr, level);
                    ddim_transition(&refined, &est, level, to)
                }
            }
        } else {
            match kind {
                SamplerKind::FlowEuler => euler_transition(&refined, &est_traj.velocity(), level.sigma, to.sigma),
                SamplerKind::Ddim => ddim_transition(&refined, &est_traj, level, to),
            }
        };
        state = SamplerState {
            x: finite(next, index, "latent")?,
            step_index: index - 1,
            schedule: schedule.clone(),
            rng_seed: seed,
        };
        trace.push(entry);
    }
    Ok((state.x, trace))
}
