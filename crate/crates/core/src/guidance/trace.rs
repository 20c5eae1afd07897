use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::mask::ValidityMask;
use crate::tensor::LatentTensor;

/// What happened at one denoising step. Fields of mechanisms that did not
/// run are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    /// Progress index, 0 at the first (noisiest) step.
    pub step: usize,
    /// Schedule level the step started from.
    pub level: usize,
    /// `t` on flow schedules, `sqrt(1 - alpha_bar)` on DDIM schedules.
    pub noise: f64,
    pub renoise_weight: Option<f64>,
    pub lambda: Option<f64>,
    pub delta: Option<f64>,
    pub mean_score: Option<f64>,
    pub std_score: Option<f64>,
    pub selected: Option<Vec<bool>>,
    pub scores: Option<Vec<Option<f64>>>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub correction_norm: Option<f64>,
    /// Mean absolute gap between the step's first clean estimate and the
    /// trajectory latent over observed cells.
    pub observed_deviation: Option<f64>,
    /// Digest of the re-noising draw of the last recursion.
    pub eps_digest: Option<u64>,
}

impl TraceEntry {
    pub fn new(step: usize, level: usize, noise: f64) -> Self {
        Self {
            step,
            level,
            noise,
            renoise_weight: None,
            lambda: None,
            delta: None,
            mean_score: None,
            std_score: None,
            selected: None,
            scores: None,
            alpha: None,
            beta: None,
            correction_norm: None,
            observed_deviation: None,
            eps_digest: None,
        }
    }
}

/// Append-only per-step record of a guided chain.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GuidanceTrace {
    entries: Vec<TraceEntry>,
}

pub const TRACE_COLUMNS: [&str; 14] = [
    "step",
    "level",
    "noise",
    "renoise_weight",
    "lambda",
    "delta",
    "mean_score",
    "std_score",
    "selected",
    "alpha",
    "beta",
    "correction_norm",
    "observed_deviation",
    "eps_digest",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Renders a channel selection as a bit string, channel 0 first.
pub fn bitmask(selected: &[bool]) -> String {
    selected.iter().map(|&s| if s { '1' } else { '0' }).collect()
}

impl GuidanceTrace {
    pub fn push(&mut self, entry: TraceEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_COLUMNS)?;
        for e in &self.entries {
            w.write_record([
                e.step.to_string(),
                e.level.to_string(),
                e.noise.to_string(),
                opt(e.renoise_weight),
                opt(e.lambda),
                opt(e.delta),
                opt(e.mean_score),
                opt(e.std_score),
                e.selected.as_deref().map(bitmask).unwrap_or_default(),
                opt(e.alpha),
                opt(e.beta),
                opt(e.correction_norm),
                opt(e.observed_deviation),
                opt(e.eps_digest),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// FNV-1a over the bit patterns of a tensor's values.
pub fn digest(x: &LatentTensor) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in x.as_slice() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Mean `|x - z|` over cells where the mask is set, or `None` if none is.
pub fn observed_deviation(x: &LatentTensor, z: &LatentTensor, mask: &ValidityMask) -> Option<f64> {
    let (a, b) = (x.as_array(), z.as_array());
    let (mut sum, mut n) = (0.0, 0usize);
    for ((c, t, y, xx), v) in a.indexed_iter() {
        if mask.at(c, t, y, xx) {
            sum += (v - b[[c, t, y, xx]]).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}
