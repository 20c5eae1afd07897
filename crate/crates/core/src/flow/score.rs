//! Per-channel motion-similarity scores.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{fl_all, masked_ae, masked_epe, FlowMetricConfig};
use super::{estimate_flow_with, FarnebackParams, FlowField};
use crate::error::{Error, Result};
use crate::mask::ValidityMask;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelMetrics {
    pub epe: f64,
    /// `None` when no masked pixel has two non-zero vectors; the angular term
    /// then contributes no penalty.
    pub ae: Option<f64>,
    pub fl: f64,
    pub score: f64,
}

/// Scores of every channel at one step. Channels with an empty valid region
/// are unscorable and hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScore {
    pub channels: Vec<Option<ChannelMetrics>>,
    pub valid_pixels: Vec<usize>,
    /// Min-max range of each predicted channel before flow estimation.
    pub ranges: Vec<(f64, f64)>,
}

impl ChannelScore {
    pub fn scores(&self) -> Vec<Option<f64>> {
        self.channels.iter().map(|c| c.as_ref().map(|m| m.score)).collect()
    }

    pub fn scorable(&self) -> usize {
        self.channels.iter().filter(|c| c.is_some()).count()
    }

    /// Builds a score record directly from per-channel scores.
    pub fn from_scores(scores: &[Option<f64>]) -> Self {
        Self {
            channels: scores
                .iter()
                .map(|s| {
                    s.map(|score| ChannelMetrics {
                        epe: f64::NAN,
                        ae: None,
                        fl: f64::NAN,
                        score,
                    })
                })
                .collect(),
            valid_pixels: scores.iter().map(|s| usize::from(s.is_some())).collect(),
            ranges: vec![(0.0, 0.0); scores.len()],
        }
    }
}

// metrics, observed pair count, value range
type PerChannel = (Option<ChannelMetrics>, usize, (f64, f64));

/// Scores predictions against a fixed trajectory latent; its flow is
/// computed once.
///
/// Before a predicted channel's flow is estimated, its unobserved cells are
/// overwritten with the trajectory latent, so both flows see identical
/// content outside the observed region and hole borders do not leak into
/// the comparison.
#[derive(Debug, Clone)]
pub struct FlowScorer {
    gt: Vec<FlowField>,
    z: Vec<LatentTensor>,
    masks: Vec<ValidityMask>,
    pair_masks: Vec<ValidityMask>,
    shape: [usize; 4],
    cfg: FlowMetricConfig,
    params: FarnebackParams,
}

impl FlowScorer {
    pub fn new(z_traj: &LatentTensor, masks: &ValidityMask, cfg: &FlowMetricConfig, params: &FarnebackParams) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        masks.check_latent(z_traj.shape(), "flow scorer mask")?;
        let c = z_traj.channels();
        let gt = (0..c)
            .into_par_iter()
            .map(|ch| estimate_flow_with(&z_traj.channel(ch), params))
            .collect::<Result<Vec<_>>>()?;
        let pair_masks = (0..c).map(|ch| masks.channel(ch).frame_pairs()).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gt,
            z: (0..c).map(|ch| z_traj.channel(ch)).collect(),
            masks: (0..c).map(|ch| masks.channel(ch)).collect(),
            pair_masks,
            shape: z_traj.shape(),
            cfg: cfg.clone(),
            params: *params,
        })
    }

    pub fn gt_flow(&self, channel: usize) -> &FlowField {
        &self.gt[channel]
    }

    pub fn score(&self, x0_hat: &LatentTensor) -> Result<ChannelScore> {
        if x0_hat.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                context: "channel_scores",
                expected: self.shape.to_vec(),
                found: x0_hat.shape().to_vec(),
            });
        }
        let per: Vec<PerChannel> = (0..self.shape[0])
            .into_par_iter()
            .map(|ch| {
                let (z, m) = (&self.z[ch], &self.masks[ch]);
                let channel = LatentTensor::from_fn(z.shape(), |(_, t, y, x)| {
                    if m.at(0, t, y, x) {
                        x0_hat.get([ch, t, y, x])
                    } else {
                        z.get([0, t, y, x])
                    }
                })?;
                let range = channel.min_max();
                let mask = &self.pair_masks[ch];
                let count = mask.count();
                if count == 0 {
                    return Ok((None, 0, range));
                }
                let pred = estimate_flow_with(&channel, &self.params)?;
                let gt = &self.gt[ch];
                let epe = masked_epe(&pred, gt, mask)?;
                let ae = match masked_ae(&pred, gt, mask) {
                    Ok(v) => Some(v),
                    Err(Error::EmptyValidRegion) => None,
                    Err(e) => return Err(e),
                };
                let fl = fl_all(&pred, gt, mask, &self.cfg)?;
                let score = self.cfg.score(epe, ae.unwrap_or(0.0), fl);
                Ok((Some(ChannelMetrics { epe, ae, fl, score }), count, range))
            })
            .collect::<Result<_>>()?;
        let mut out = ChannelScore {
            channels: Vec::with_capacity(per.len()),
            valid_pixels: Vec::with_capacity(per.len()),
            ranges: Vec::with_capacity(per.len()),
        };
        for (m, n, r) in per {
            out.channels.push(m);
            out.valid_pixels.push(n);
            out.ranges.push(r);
        }
        Ok(out)
    }
}

/// Scores each channel of `x0_hat` against the same channel of `z_traj`.
pub fn channel_scores(
    x0_hat: &LatentTensor,
    z_traj: &LatentTensor,
    masks: &ValidityMask,
    cfg: &FlowMetricConfig,
) -> Result<ChannelScore> {
    FlowScorer::new(z_traj, masks, cfg, &FarnebackParams::default())?.score(x0_hat)
}

/// Writes `step,channel,valid_pixels,epe,ae,fl,score` rows; unscorable
/// channels have empty metric fields.
pub fn write_scores_csv<W: Write>(out: W, rows: &[(usize, ChannelScore)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "channel", "valid_pixels", "epe", "ae", "fl", "score"])?;
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (step, s) in rows {
        for (c, m) in s.channels.iter().enumerate() {
            w.write_record([
                step.to_string(),
                c.to_string(),
                s.valid_pixels[c].to_string(),
                f(m.as_ref().map(|m| m.epe)),
                f(m.as_ref().and_then(|m| m.ae)),
                f(m.as_ref().map(|m| m.fl)),
                f(m.as_ref().map(|m| m.score)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moving(c: usize, t: usize, n: usize) -> LatentTensor {
        LatentTensor::from_fn([c, t, n, n], |(ch, ti, y, x)| {
            let x = x as f64 - 1.5 * ti as f64;
            ((x * 0.4 + ch as f64).sin() + (y as f64 * 0.3).cos()) * 0.5
        })
        .unwrap()
    }

    #[test]
    fn identical_channels_score_one() {
        let z = moving(2, 3, 24);
        let masks = ValidityMask::ones([1, 3, 24, 24]);
        let s = channel_scores(&z, &z, &masks, &FlowMetricConfig::default()).unwrap();
        for m in s.channels.iter().flatten() {
            assert_eq!((m.epe, m.fl, m.score), (0.0, 0.0, 1.0));
        }
        assert_eq!(s.scorable(), 2);
    }

    #[test]
    fn empty_mask_is_unscorable() {
        let z = moving(2, 2, 20);
        let masks = ValidityMask::from_fn([2, 2, 20, 20], |(c, _, _, _)| c == 1);
        let s = channel_scores(&z, &z, &masks, &FlowMetricConfig::default()).unwrap();
        assert!(s.channels[0].is_none());
        assert!(s.channels[1].is_some());
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &[(7, s)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("7,0,0,,"));
    }
}
