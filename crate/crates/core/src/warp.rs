//! Forward depth warping with a z-buffer, and the embedding of warped video
//! into latent space.

use nalgebra::{DMatrix, Point3};
use ndarray::{Array2, Array4};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::mask::ValidityMask;
use crate::rng::{KeyedRng, Purpose};
use crate::scene::DepthMap;
use crate::tensor::LatentTensor;

/// Depths closer than this are treated as equal in the z-buffer.
pub const DEPTH_TIE: f64 = 1e-12;

/// Everything a single warp produces. `source` holds, for each target pixel,
/// the row-major index of the source pixel that won the z-buffer.
#[derive(Debug, Clone)]
pub struct WarpResult {
    pub image: LatentTensor,
    pub mask: ValidityMask,
    pub depth: Array2<f64>,
    pub source: Array2<Option<usize>>,
}

/// Warps a `[C, 1, H, W]` frame seen from `p_src` into `p_tar`.
pub fn warp(
    src: &LatentTensor,
    depth: &DepthMap,
    p_src: &CameraPose,
    p_tar: &CameraPose,
) -> Result<(LatentTensor, ValidityMask)> {
    let r = warp_detailed(src, depth, p_src, p_tar)?;
    Ok((r.image, r.mask))
}

pub fn warp_detailed(src: &LatentTensor, depth: &DepthMap, p_src: &CameraPose, p_tar: &CameraPose) -> Result<WarpResult> {
    let [c, t, h, w] = src.shape();
    if t != 1 {
        return Err(Error::ShapeMismatch {
            context: "warp source",
            expected: vec![c, 1, h, w],
            found: vec![c, t, h, w],
        });
    }
    if (depth.height(), depth.width()) != (h, w) {
        return Err(Error::ShapeMismatch {
            context: "warp depth",
            expected: vec![h, w],
            found: vec![depth.height(), depth.width()],
        });
    }

    let mut zbuf = Array2::from_elem((h, w), f64::INFINITY);
    let mut source: Array2<Option<usize>> = Array2::from_elem((h, w), None);
    for row in 0..h {
        for col in 0..w {
            let Some(d) = depth.get(row, col) else { continue };
            let p = p_src.unproject(col as f64, row as f64, d);
            let Some((u, v, z)) = p_tar.project(&p) else { continue };
            let (tc, tr) = (u.round(), v.round());
            if !(tc >= 0.0 && tr >= 0.0 && tc < w as f64 && tr < h as f64) {
                continue;
            }
            let (tr, tc) = (tr as usize, tc as usize);
            // Row-major iteration order means the earlier source keeps ties.
            if z < zbuf[[tr, tc]] - DEPTH_TIE {
                zbuf[[tr, tc]] = z;
                source[[tr, tc]] = Some(row * w + col);
            }
        }
    }

    let src_arr = src.as_array();
    let mut out = Array4::<f64>::zeros((c, 1, h, w));
    for ((tr, tc), s) in source.indexed_iter() {
        if let Some(s) = s {
            let (sr, sc) = (s / w, s % w);
            for ch in 0..c {
                out[[ch, 0, tr, tc]] = src_arr[[ch, 0, sr, sc]];
            }
        }
    }
    let mask = ValidityMask::from_fn([1, 1, h, w], |(_, _, y, x)| source[[y, x]].is_some());
    if mask.count() == 0 {
        log::warn!("empty warp: no source pixel lands in the target view");
    }
    let depth_out = zbuf.mapv(|z| if z.is_finite() { z } else { 0.0 });
    Ok(WarpResult {
        image: LatentTensor::new(out)?,
        mask,
        depth: depth_out,
        source,
    })
}

/// Warps frame `i` of `frames` from `src_poses[i]` to `tar_poses[i]`, returning
/// the guidance video and a shared `[1, T, H, W]` mask.
pub fn warp_sequence(
    frames: &LatentTensor,
    depths: &[DepthMap],
    src_poses: &[CameraPose],
    tar_poses: &[CameraPose],
) -> Result<(LatentTensor, ValidityMask)> {
    let t = frames.frames();
    for (context, len) in [("depths", depths.len()), ("source poses", src_poses.len()), ("target poses", tar_poses.len())] {
        if len != t {
            return Err(Error::LengthMismatch { context, left: t, right: len });
        }
    }
    let warped: Vec<(LatentTensor, ValidityMask)> = (0..t)
        .into_par_iter()
        .map(|i| warp(&frames.frame(i), &depths[i], &src_poses[i], &tar_poses[i]))
        .collect::<Result<_>>()?;
    let (images, masks): (Vec<_>, Vec<_>) = warped.into_iter().unzip();
    Ok((LatentTensor::stack_frames(&images)?, ValidityMask::stack_frames(&masks)?))
}

/// How pixel-space guidance video becomes the trajectory latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    /// Spatial pooling factor (1 keeps pixel resolution).
    #[serde(default = "one")]
    pub downsample: usize,
    /// Seed for a fixed random orthogonal channel mix; `None` skips mixing.
    #[serde(default)]
    pub channel_mix_seed: Option<u64>,
}

fn one() -> usize {
    1
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            downsample: 1,
            channel_mix_seed: None,
        }
    }
}

/// Random orthogonal `C x C` matrix: QR of a keyed Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn orthogonal_mix(channels: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = KeyedRng::new(seed).stream(Purpose::ChannelMix, 0, 0);
    let g = DMatrix::from_fn(channels, channels, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..channels {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Applies `out[c] = sum_k mix[c, k] * x[k]` at every position.
pub fn mix_channels(x: &LatentTensor, mix: &DMatrix<f64>) -> Result<LatentTensor> {
    let [c, t, h, w] = x.shape();
    if mix.nrows() != c || mix.ncols() != c {
        return Err(Error::ShapeMismatch {
            context: "channel mix",
            expected: vec![c, c],
            found: vec![mix.nrows(), mix.ncols()],
        });
    }
    let a = x.as_array();
    LatentTensor::from_fn([c, t, h, w], |(ci, ti, y, xx)| {
        (0..c).map(|k| mix[(ci, k)] * a[[k, ti, y, xx]]).sum()
    })
}

/// Average-pools both spatial axes by `factor`, dropping trailing pixels.
pub fn average_pool(x: &LatentTensor, factor: usize) -> Result<LatentTensor> {
    let [c, t, h, w] = x.shape();
    if factor == 0 || h < factor || w < factor {
        return Err(Error::InvalidInput(format!("cannot pool {h}x{w} by factor {factor}")));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let a = x.as_array();
    let norm = (factor * factor) as f64;
    LatentTensor::from_fn([c, t, h / factor, w / factor], |(ci, ti, y, xx)| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += a[[ci, ti, y * factor + dy, xx * factor + dx]];
            }
        }
        s / norm
    })
}

/// Embeds a pixel-space guidance video and its mask into latent space.
pub fn embed_latent(video: &LatentTensor, mask: &ValidityMask, cfg: &EmbedConfig) -> Result<(LatentTensor, ValidityMask)> {
    mask.check_latent(video.shape(), "embed mask")?;
    let pooled = average_pool(video, cfg.downsample)?;
    let mask = if cfg.downsample == 1 {
        mask.clone()
    } else {
        mask.downsample_all(cfg.downsample)?
    };
    let latent = match cfg.channel_mix_seed {
        Some(seed) => mix_channels(&pooled, &orthogonal_mix(pooled.channels(), seed))?,
        None => pooled,
    };
    Ok((latent, mask))
}

/// Continuous target-image position of source pixel `(row, col)`.
pub fn reproject_pixel(depth: f64, row: usize, col: usize, p_src: &CameraPose, p_tar: &CameraPose) -> Option<(f64, f64)> {
    let p: Point3<f64> = p_src.unproject(col as f64, row as f64, depth);
    p_tar.project(&p).map(|(u, v, _)| (u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::scene::{plane_scene, render};
    use nalgebra::{Point3, Vector3};

    fn camera(n: usize) -> CameraPose {
        CameraPose::at(Intrinsics::from_fov(60.0, n, n).unwrap(), Point3::origin())
    }

    #[test]
    fn identity_warp_is_exact() {
        let scene = plane_scene(5.0, 3);
        let cam = camera(24);
        let (img, depth) = render(&scene, &cam, (24, 24)).unwrap();
        let (out, mask) = warp(&img, &depth, &cam, &cam).unwrap();
        assert_eq!(out, img);
        assert!(mask.is_all(true));
    }

    #[test]
    fn yaw_away_empties_mask() {
        let scene = plane_scene(5.0, 1);
        let cam = camera(16);
        let (img, depth) = render(&scene, &cam, (16, 16)).unwrap();
        let away = CameraPose::look_at(cam.intrinsics, Point3::origin(), Point3::new(1.0, 0.0, 0.0), Vector3::new(0.0, -1.0, 0.0)).unwrap();
        let (out, mask) = warp(&img, &depth, &cam, &away).unwrap();
        assert!(mask.is_all(false));
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearer_surface_wins() {
        let cam = camera(8);
        let img = LatentTensor::from_fn([1, 1, 8, 8], |(_, _, y, x)| (y * 8 + x) as f64).unwrap();
        let mut d = Array2::from_elem((8, 8), 4.0);
        d[[3, 3]] = 2.0;
        let depth = DepthMap::new(d, Array2::from_elem((8, 8), true)).unwrap();
        // Zoom out: several sources collide and the nearest must win.
        let tar = cam.dolly(-4.0);
        let r = warp_detailed(&img, &depth, &cam, &tar).unwrap();
        for ((y, x), s) in r.source.indexed_iter() {
            if let Some(s) = s {
                assert_eq!(r.image.get([0, 0, y, x]), *s as f64);
            }
        }
        assert!(r.source.iter().any(|s| *s == Some(3 * 8 + 3)));
    }

    #[test]
    fn orthogonal_mix_is_orthogonal() {
        let q = orthogonal_mix(4, 7);
        assert!((q.transpose() * &q - DMatrix::identity(4, 4)).abs().max() < 1e-12);
        assert_eq!(q, orthogonal_mix(4, 7));
    }

    #[test]
    fn embedding_pools_and_ands() {
        let v = LatentTensor::from_fn([1, 1, 4, 4], |(_, _, y, x)| (y * 4 + x) as f64).unwrap();
        let m = ValidityMask::from_fn([1, 1, 4, 4], |(_, _, y, x)| !(y == 3 && x == 3));
        let (l, lm) = embed_latent(&v, &m, &EmbedConfig { downsample: 2, channel_mix_seed: None }).unwrap();
        assert_eq!(l.shape(), [1, 1, 2, 2]);
        assert_eq!(l.get([0, 0, 0, 0]), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(lm.count(), 3);
    }
}
