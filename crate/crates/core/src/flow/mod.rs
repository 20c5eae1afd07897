//! Optical flow between consecutive latent frames and the masked flow-error
//! score used to gate channels.

pub mod farneback;
pub mod metrics;
pub mod score;

use ndarray::{Array4, ArrayView2};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

pub use farneback::FarnebackParams;
pub use metrics::{fl_all, masked_ae, masked_epe, FlRule, FlowMetricConfig};
pub use score::{channel_scores, ChannelMetrics, ChannelScore, FlowScorer, write_scores_csv};

/// Per-pixel displacement `[2, T - 1, H, W]`: index 0 is horizontal (`u`),
/// index 1 vertical (`v`), in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    data: Array4<f64>,
}

impl FlowField {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let s = data.shape();
        if s[0] != 2 || s[1..].contains(&0) {
            return Err(Error::InvalidInput(format!("flow field must be [2, T-1, H, W], got {s:?}")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(pairs: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array4::zeros((2, pairs, height, width)),
        }
    }

    /// A field with the same vector everywhere.
    pub fn uniform(pairs: usize, height: usize, width: usize, u: f64, v: f64) -> Self {
        Self {
            data: Array4::from_shape_fn((2, pairs, height, width), |(c, _, _, _)| if c == 0 { u } else { v }),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// `(T - 1, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let [_, p, h, w] = self.shape();
        (p, h, w)
    }

    pub fn as_array(&self) -> &Array4<f64> {
        &self.data
    }

    #[inline]
    pub fn vector(&self, pair: usize, y: usize, x: usize) -> (f64, f64) {
        (self.data[[0, pair, y, x]], self.data[[1, pair, y, x]])
    }

    pub fn u(&self, pair: usize) -> ArrayView2<'_, f64> {
        self.data.slice(ndarray::s![0, pair, .., ..])
    }

    pub fn v(&self, pair: usize) -> ArrayView2<'_, f64> {
        self.data.slice(ndarray::s![1, pair, .., ..])
    }
}

/// Min-max normalises a `[1, T, H, W]` channel to `[0, 255]` over all frames;
/// a constant channel maps to zeros. Returns the frames and the `(min, max)`
/// used.
pub fn normalize_channel(channel: &LatentTensor) -> (Vec<farneback::Plane>, (f64, f64)) {
    let [_, t, h, w] = channel.shape();
    let (lo, hi) = channel.min_max();
    let span = hi - lo;
    let a = channel.as_array();
    let frames = (0..t)
        .map(|ti| {
            let data = a
                .slice(ndarray::s![0, ti, .., ..])
                .iter()
                .map(|&v| if span > 0.0 { (v - lo) / span * 255.0 } else { 0.0 })
                .collect();
            farneback::Plane::new(h, w, data)
        })
        .collect();
    (frames, (lo, hi))
}

/// Dense flow between each pair of consecutive frames of a `[1, T, H, W]`
/// channel, computed on min-max normalised values.
pub fn estimate_flow(channel: &LatentTensor) -> Result<FlowField> {
    estimate_flow_with(channel, &FarnebackParams::default())
}

pub fn estimate_flow_with(channel: &LatentTensor, params: &FarnebackParams) -> Result<FlowField> {
    let [c, t, h, w] = channel.shape();
    if c != 1 {
        return Err(Error::ShapeMismatch {
            context: "estimate_flow channel",
            expected: vec![1, t, h, w],
            found: vec![c, t, h, w],
        });
    }
    if t < 2 {
        return Err(Error::InvalidInput("flow needs at least two frames".into()));
    }
    let (frames, _) = normalize_channel(channel);
    let mut data = Array4::zeros((2, t - 1, h, w));
    for (pair, f) in frames.windows(2).enumerate() {
        let (u, v) = farneback::flow_pair(&f[0], &f[1], params)?;
        for i in 0..h * w {
            data[[0, pair, i / w, i % w]] = u.data[i];
            data[[1, pair, i / w, i % w]] = v.data[i];
        }
    }
    FlowField::new(data)
}
