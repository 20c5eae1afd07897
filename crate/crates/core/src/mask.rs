//! Binary validity masks.

use ndarray::{Array4, Axis};

use crate::error::{Error, Result};

/// A binary mask shaped `[C, T, H, W]`, where `C` is either the latent channel
/// count (per-channel masks) or `1` (one spatial mask shared by all channels).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    data: Array4<bool>,
}

impl ValidityMask {
    pub fn new(data: Array4<bool>) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::InvalidInput(format!(
                "mask axes must be non-empty, got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn filled(shape: [usize; 4], value: bool) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "mask axes must be non-empty");
        Self {
            data: Array4::from_elem(shape, value),
        }
    }

    pub fn ones(shape: [usize; 4]) -> Self {
        Self::filled(shape, true)
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, false)
    }

    pub fn from_fn(shape: [usize; 4], f: impl FnMut((usize, usize, usize, usize)) -> bool) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "mask axes must be non-empty");
        Self {
            data: Array4::from_shape_fn(shape, f),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn as_array(&self) -> &Array4<bool> {
        &self.data
    }

    pub fn get(&self, index: [usize; 4]) -> bool {
        self.data[index]
    }

    /// Mask value for latent channel `c`, broadcasting a shared mask.
    pub fn at(&self, c: usize, t: usize, y: usize, x: usize) -> bool {
        let c = if self.data.shape()[0] == 1 { 0 } else { c };
        self.data[[c, t, y, x]]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_all(&self, value: bool) -> bool {
        self.data.iter().all(|&v| v == value)
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Checks that the mask can be applied to a latent of shape `latent`.
    pub fn check_latent(&self, latent: [usize; 4], context: &'static str) -> Result<()> {
        let [c, t, h, w] = self.shape();
        if (t, h, w) != (latent[1], latent[2], latent[3]) || (c != 1 && c != latent[0]) {
            return Err(Error::ShapeMismatch {
                context,
                expected: latent.to_vec(),
                found: self.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// The mask of channel `c` as a `[1, T, H, W]` mask.
    pub fn channel(&self, c: usize) -> ValidityMask {
        let c = if self.data.shape()[0] == 1 { 0 } else { c };
        Self {
            data: self.data.slice(ndarray::s![c..c + 1, .., .., ..]).to_owned(),
        }
    }

    /// Per-channel copies of a shared mask.
    pub fn broadcast_channels(&self, channels: usize) -> Result<ValidityMask> {
        match self.data.shape()[0] {
            1 => {
                let views: Vec<_> = (0..channels).map(|_| self.data.view()).collect();
                Ok(Self {
                    data: ndarray::concatenate(Axis(0), &views)
                        .map_err(|e| Error::InvalidInput(e.to_string()))?,
                })
            }
            c if c == channels => Ok(self.clone()),
            c => Err(Error::ShapeMismatch {
                context: "broadcast_channels",
                expected: vec![channels],
                found: vec![c],
            }),
        }
    }

    /// Validity of consecutive frame pairs: `[C, T - 1, H, W]`, set where both
    /// frames of a pair are valid.
    pub fn frame_pairs(&self) -> Result<ValidityMask> {
        let [c, t, h, w] = self.shape();
        if t < 2 {
            return Err(Error::InvalidInput("frame pairs need at least two frames".into()));
        }
        Ok(Self::from_fn([c, t - 1, h, w], |(ci, ti, y, x)| {
            self.data[[ci, ti, y, x]] && self.data[[ci, ti + 1, y, x]]
        }))
    }

    /// Downsamples by `factor` in both spatial axes; a cell is valid only if
    /// every pixel of its window is valid. Trailing pixels that do not fill a
    /// whole window are dropped.
    pub fn downsample_all(&self, factor: usize) -> Result<ValidityMask> {
        let [c, t, h, w] = self.shape();
        if factor == 0 || h < factor || w < factor {
            return Err(Error::InvalidInput(format!(
                "cannot pool {h}x{w} by factor {factor}"
            )));
        }
        let (hh, ww) = (h / factor, w / factor);
        Ok(Self::from_fn([c, t, hh, ww], |(ci, ti, y, x)| {
            (0..factor).all(|dy| (0..factor).all(|dx| self.data[[ci, ti, y * factor + dy, x * factor + dx]]))
        }))
    }

    /// Stacks `[C, 1, H, W]` frame masks along time.
    pub fn stack_frames(frames: &[ValidityMask]) -> Result<ValidityMask> {
        let views: Vec<_> = frames.iter().map(|m| m.data.view()).collect();
        if views.is_empty() {
            return Err(Error::InvalidInput("no masks to stack".into()));
        }
        Self::new(ndarray::concatenate(Axis(1), &views).map_err(|e| Error::InvalidInput(e.to_string()))?)
    }

    pub fn frame(&self, t: usize) -> ValidityMask {
        Self {
            data: self.data.slice(ndarray::s![.., t..t + 1, .., ..]).to_owned(),
        }
    }

    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context: "mask and",
                expected: self.shape().to_vec(),
                found: other.shape().to_vec(),
            });
        }
        let mut data = self.data.clone();
        ndarray::Zip::from(&mut data).and(&other.data).for_each(|a, &b| *a = *a && b);
        Ok(Self { data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_and_pooling() {
        let m = ValidityMask::from_fn([1, 1, 4, 4], |(_, _, y, x)| !(y == 0 && x == 3));
        let d = m.downsample_all(2).unwrap();
        assert_eq!(d.shape(), [1, 1, 2, 2]);
        assert!(d.get([0, 0, 0, 0]));
        assert!(!d.get([0, 0, 0, 1]));
        assert!(d.get([0, 0, 1, 0]) && d.get([0, 0, 1, 1]));
    }

    #[test]
    fn pairs_and_broadcast() {
        let m = ValidityMask::from_fn([1, 3, 1, 2], |(_, t, _, x)| !(t == 1 && x == 0));
        let p = m.frame_pairs().unwrap();
        assert_eq!(p.shape(), [1, 2, 1, 2]);
        assert_eq!(p.count(), 2);
        let b = m.broadcast_channels(3).unwrap();
        assert_eq!(b.shape(), [3, 3, 1, 2]);
        assert_eq!(b.count(), 3 * m.count());
        assert!(m.check_latent([4, 3, 1, 2], "t").is_ok());
        assert!(b.check_latent([4, 3, 1, 2], "t").is_err());
    }
}
