//! `FOBD` dataset files.
//!
//! Header (16 bytes, little-endian): magic `FOBD`, version `u32`, count
//! `u32`, height `u16`, width `u16`. Each sample follows as the image
//! (`h·w` × `f32`), the mask (`h·w` × `u8`) and a 14-byte metadata block:
//! client id `u8`, sample index `u32`, seed `u64`, tumor count `u8`.

use std::path::Path;

use super::generate::{SliceMeta, SliceSample};
use crate::codec::{put_f32s, ByteReader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FOBD";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(samples: &[SliceSample]) -> Result<Vec<u8>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("cannot write an empty dataset".into()))?;
    let (h, w) = (first.height, first.width);
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Config(format!("slice size {h}x{w} too large")));
    }
    let per = h * w * 5 + 14;
    let mut out = Vec::with_capacity(16 + per * samples.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    for s in samples {
        if (s.height, s.width) != (h, w) || s.image.len() != h * w || s.mask.len() != h * w {
            return Err(Error::Usage(format!(
                "sample {} does not match the {h}x{w} dataset size",
                s.meta.sample_index
            )));
        }
        put_f32s(&mut out, &s.image);
        out.extend_from_slice(&s.mask);
        out.push(s.meta.client_id);
        out.extend_from_slice(&s.meta.sample_index.to_le_bytes());
        out.extend_from_slice(&s.meta.seed_used.to_le_bytes());
        out.push(s.meta.n_tumors);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SliceSample>> {
    let mut r = ByteReader::new(bytes);
    if r.bytes(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected FOBD"));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(r.fail(4, format!("unsupported dataset version {version}")));
    }
    let count = r.u32("count")? as usize;
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    let hw = h * w;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let image = r.f32s(hw, "image")?;
        let mask_at = r.pos();
        let mask = r.bytes(hw, "mask")?.to_vec();
        if let Some(i) = mask.iter().position(|&m| m > 1) {
            return Err(r.fail(mask_at + i, "mask value is not 0 or 1"));
        }
        let client_id = r.u8("client id")?;
        let sample_index = r.u32("sample index")?;
        let seed_used = r.u64("seed")?;
        let n_tumors = r.u8("tumor count")?;
        samples.push(SliceSample {
            height: h,
            width: w,
            image,
            mask,
            meta: SliceMeta {
                client_id,
                sample_index,
                seed_used,
                n_tumors,
                radii: Vec::new(),
            },
        });
    }
    if r.remaining() != 0 {
        return Err(r.fail(r.pos(), "trailing bytes after last sample"));
    }
    Ok(samples)
}

pub fn write_dataset(samples: &[SliceSample], path: &Path) -> Result<()> {
    let bytes = encode_dataset(samples)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SliceSample>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
