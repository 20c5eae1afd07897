//! File formats: flat binary arrays with a 16-byte header, PGM/PPM frames.
//!
//! Binary layout (little endian):
//!
//! | bytes  | content                                   |
//! |--------|-------------------------------------------|
//! | 0..4   | magic `TFT1`                              |
//! | 4      | dtype: 1 = f64, 2 = u8                    |
//! | 5      | rank, 1 to 4                              |
//! | 6..8   | reserved, zero                            |
//! | 8..16  | four u16 dims; dims past `rank` are zero  |
//!
//! The payload follows in C order. Latents and masks are written with rank 4
//! as `[C, T, H, W]`; depth maps with rank 2. Lower-rank files are read as
//! latents by prepending unit axes.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::mask::ValidityMask;
use crate::scene::DepthMap;
use crate::tensor::LatentTensor;

pub const MAGIC: &[u8; 4] = b"TFT1";
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F64 = 1,
    U8 = 2,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

/// A decoded binary array before it is interpreted as a typed value.
#[derive(Debug, Clone, PartialEq)]
pub struct RawArray {
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

pub fn encode_header(dtype: Dtype, dims: &[usize]) -> Result<[u8; HEADER_LEN]> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::InvalidInput(format!("rank {} not in 1..=4", dims.len())));
    }
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(MAGIC);
    h[4] = dtype as u8;
    h[5] = dims.len() as u8;
    for (i, &d) in dims.iter().enumerate() {
        let d = u16::try_from(d).map_err(|_| Error::InvalidInput(format!("axis length {d} exceeds {}", u16::MAX)))?;
        h[8 + 2 * i..10 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    Ok(h)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<RawArray> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let dtype = match bytes[4] {
        1 => Dtype::F64,
        2 => Dtype::U8,
        d => return Err(bad(format!("unknown dtype code {d}"))),
    };
    let rank = bytes[5] as usize;
    if !(1..=4).contains(&rank) {
        return Err(bad(format!("rank {rank} not in 1..=4")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u16::from_le_bytes([bytes[8 + 2 * i], bytes[9 + 2 * i]]) as usize)
        .collect();
    let expected = dims.iter().product::<usize>() * dtype.size();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(bad(format!("payload is {} bytes, header implies {expected}", payload.len())));
    }
    Ok(RawArray {
        dtype,
        dims,
        bytes: payload.to_vec(),
    })
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn f64_payload(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(f64::to_le_bytes).collect()
}

pub fn tensor_bytes(x: &LatentTensor) -> Result<Vec<u8>> {
    let mut out = encode_header(Dtype::F64, &x.shape())?.to_vec();
    out.extend(f64_payload(x.as_array().iter().copied()));
    Ok(out)
}

pub fn write_tensor(path: &Path, x: &LatentTensor) -> Result<()> {
    write_atomic(path, &tensor_bytes(x)?)
}

pub fn read_raw(path: &Path) -> Result<RawArray> {
    decode(&fs::read(path)?, path)
}

fn as_4d(dims: &[usize]) -> [usize; 4] {
    let mut s = [1usize; 4];
    s[4 - dims.len()..].copy_from_slice(dims);
    s
}

pub fn read_tensor(path: &Path) -> Result<LatentTensor> {
    let raw = read_raw(path)?;
    let values: Vec<f64> = match raw.dtype {
        Dtype::F64 => raw
            .bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        Dtype::U8 => raw.bytes.iter().map(|&b| b as f64).collect(),
    };
    LatentTensor::from_shape_vec(as_4d(&raw.dims), values).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_mask(path: &Path, m: &ValidityMask) -> Result<()> {
    let mut out = encode_header(Dtype::U8, &m.shape())?.to_vec();
    out.extend(m.as_array().iter().map(|&b| b as u8));
    write_atomic(path, &out)
}

/// Reads a mask; `f64` files are accepted with nonzero meaning valid.
pub fn read_mask(path: &Path) -> Result<ValidityMask> {
    let raw = read_raw(path)?;
    let flags: Vec<bool> = match raw.dtype {
        Dtype::U8 => raw.bytes.iter().map(|&b| b != 0).collect(),
        Dtype::F64 => raw
            .bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")) != 0.0)
            .collect(),
    };
    let arr = Array4::from_shape_vec(as_4d(&raw.dims), flags).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    ValidityMask::new(arr)
}

/// Depth is written as rank-2 `f64`; invalid pixels are stored as `0`.
pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    let mut out = encode_header(Dtype::F64, &[d.height(), d.width()])?.to_vec();
    out.extend(f64_payload(d.values().iter().copied()));
    write_atomic(path, &out)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let raw = read_raw(path)?;
    if raw.dtype != Dtype::F64 || raw.dims.len() != 2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "depth must be a rank-2 f64 array".into(),
        });
    }
    let values: Vec<f64> = raw
        .bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let values = Array2::from_shape_vec((raw.dims[0], raw.dims[1]), values).expect("checked length");
    let valid = values.mapv(|v| v > 0.0);
    DepthMap::new(values, valid)
}

/// Maps `[lo, hi]` linearly to `0..=255`, clamping outside values.
fn quantize(v: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes frame `t` of `x` as binary PGM (one channel) or PPM (first three
/// channels), scaling `[lo, hi]` to the full 8-bit range.
pub fn write_frame(path: &Path, x: &LatentTensor, t: usize, lo: f64, hi: f64) -> Result<()> {
    let [c, frames, h, w] = x.shape();
    if t >= frames {
        return Err(Error::InvalidInput(format!("frame {t} out of {frames}")));
    }
    let a = x.as_array();
    let (wu, hu) = (w as u32, h as u32);
    let mut bytes = Vec::new();
    if c >= 3 {
        let img = image::RgbImage::from_fn(wu, hu, |col, row| {
            let p = |ch: usize| quantize(a[[ch, t, row as usize, col as usize]], lo, hi);
            image::Rgb([p(0), p(1), p(2)])
        });
        image::codecs::pnm::PnmEncoder::new(&mut bytes)
            .with_subtype(image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary))
            .encode(img.as_raw().as_slice(), wu, hu, image::ExtendedColorType::Rgb8)?;
    } else {
        let img = image::GrayImage::from_fn(wu, hu, |col, row| image::Luma([quantize(a[[0, t, row as usize, col as usize]], lo, hi)]));
        image::codecs::pnm::PnmEncoder::new(&mut bytes)
            .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary))
            .encode(img.as_raw().as_slice(), wu, hu, image::ExtendedColorType::L8)?;
    }
    write_atomic(path, &bytes)
}

/// Reads an 8-bit PGM or PPM as a `[C, 1, H, W]` tensor with values in `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<LatentTensor> {
    let img = image::ImageReader::with_format(std::io::BufReader::new(fs::File::open(path)?), image::ImageFormat::Pnm).decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().channel_count() == 1 {
        let g = img.into_luma8();
        LatentTensor::from_fn([1, 1, h, w], |(_, _, y, x)| g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
    } else {
        let rgb = img.into_rgb8();
        LatentTensor::from_fn([3, 1, h, w], |(c, _, y, x)| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    }
}
