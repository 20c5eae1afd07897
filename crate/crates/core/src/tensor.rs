//! The four-axis `[C, T, H, W]` latent every sampler and guidance step works on.

use ndarray::{Array4, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};

/// A video latent stored in C order as `[channels, frames, rows, cols]`.
///
/// Construction rejects empty axes and non-finite entries, so every
/// `LatentTensor` that reaches an operation is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    data: Array4<f64>,
}

impl LatentTensor {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        // concatenate can hand back non-C-order arrays
        let data = if data.is_standard_layout() { data } else { data.as_standard_layout().into_owned() };
        if data.shape().contains(&0) {
            return Err(Error::InvalidInput(format!(
                "latent axes must be non-empty, got {:?}",
                data.shape()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent tensor".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "latent axes must be non-empty");
        Self {
            data: Array4::zeros(shape),
        }
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        assert!(value.is_finite());
        assert!(shape.iter().all(|&d| d > 0), "latent axes must be non-empty");
        Self {
            data: Array4::from_elem(shape, value),
        }
    }

    /// A `[1, 1, 1, n]` tensor, handy for scalar and vector examples.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        let data = Array4::from_shape_vec((1, 1, 1, n), values)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::new(data)
    }

    pub fn from_shape_vec(shape: [usize; 4], values: Vec<f64>) -> Result<Self> {
        let data =
            Array4::from_shape_vec(shape, values).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::new(data)
    }

    pub fn from_fn(shape: [usize; 4], f: impl FnMut((usize, usize, usize, usize)) -> f64) -> Result<Self> {
        Self::new(Array4::from_shape_fn(shape, f))
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_array(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array4<f64> {
        self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data
            .as_slice()
            .expect("latent tensors are always stored contiguously in C order")
    }

    pub fn get(&self, index: [usize; 4]) -> f64 {
        self.data[index]
    }

    pub fn channel_view(&self, c: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), c)
    }

    /// Channel `c` as its own `[1, T, H, W]` tensor.
    pub fn channel(&self, c: usize) -> LatentTensor {
        Self {
            data: self
                .data
                .slice(ndarray::s![c..c + 1, .., .., ..])
                .to_owned(),
        }
    }

    /// Frame `t` as a `[C, 1, H, W]` tensor.
    pub fn frame(&self, t: usize) -> LatentTensor {
        Self {
            data: self
                .data
                .slice(ndarray::s![.., t..t + 1, .., ..])
                .to_owned(),
        }
    }

    /// Stacks `[C, 1, H, W]` frames along the time axis.
    pub fn stack_frames(frames: &[LatentTensor]) -> Result<LatentTensor> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput("no frames to stack".into()))?;
        let views: Vec<_> = frames.iter().map(|f| f.data.view()).collect();
        for f in frames {
            let [c, _, h, w] = f.shape();
            let [c0, _, h0, w0] = first.shape();
            if (c, h, w) != (c0, h0, w0) {
                return Err(Error::ShapeMismatch {
                    context: "stack_frames",
                    expected: first.shape().to_vec(),
                    found: f.shape().to_vec(),
                });
            }
        }
        let data = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::new(data)
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape().to_vec(),
                found: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentTensor {
        Self {
            data: self.data.mapv(f),
        }
    }

    /// Elementwise `f(self, other)`. Panics on shape mismatch; callers that
    /// accept user tensors check shapes first.
    pub fn zip_map(&self, other: &LatentTensor, f: impl Fn(f64, f64) -> f64) -> LatentTensor {
        assert_eq!(self.shape(), other.shape(), "zip_map on mismatched shapes");
        let mut out = Array4::zeros(self.data.raw_dim());
        Zip::from(&mut out)
            .and(&self.data)
            .and(&other.data)
            .for_each(|o, &a, &b| *o = f(a, b));
        Self { data: out }
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &LatentTensor, b: f64) -> LatentTensor {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn scale(&self, s: f64) -> LatentTensor {
        self.map(|x| s * x)
    }

    pub fn dot(&self, other: &LatentTensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot on mismatched shapes");
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff on mismatched shapes");
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(LatentTensor::from_vec(vec![1.0, f64::NAN]).is_err());
        assert!(LatentTensor::new(Array4::zeros((0, 1, 1, 1))).is_err());
    }

    #[test]
    fn channel_and_frame_slicing() {
        let t = LatentTensor::from_fn([2, 3, 2, 2], |(c, f, y, x)| (c * 1000 + f * 100 + y * 10 + x) as f64).unwrap();
        let ch = t.channel(1);
        assert_eq!(ch.shape(), [1, 3, 2, 2]);
        assert_eq!(ch.get([0, 2, 1, 0]), 1210.0);
        let fr = t.frame(2);
        assert_eq!(fr.shape(), [2, 1, 2, 2]);
        let back = LatentTensor::stack_frames(&[t.frame(0), t.frame(1), t.frame(2)]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn dot_and_norm() {
        let a = LatentTensor::from_vec(vec![3.0, 4.0]).unwrap();
        assert_eq!(a.norm(), 5.0);
        assert_eq!(a.lincomb(2.0, &a, -1.0), a);
    }
}
