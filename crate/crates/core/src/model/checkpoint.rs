//! `FOBP` parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! magic `FOBP`, version `u32`, segment count `u32`, then per segment
//! name length `u16` + UTF-8 name, offset `u64`, length `u64`, kind `u8`;
//! finally every parameter as raw `f32`.

use std::path::Path;

use super::params::{ParamSet, Segment, SegmentKind};
use crate::codec::{put_f32s, ByteReader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FOBP";
const VERSION: u32 = 1;

pub fn write_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.segments().len() as u32).to_le_bytes());
    for s in params.segments() {
        out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.offset as u64).to_le_bytes());
        out.extend_from_slice(&(s.len as u64).to_le_bytes());
        out.push(s.kind.code());
    }
    put_f32s(&mut out, params.values());
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = ByteReader::new(bytes);
    if r.bytes(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected FOBP"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("segment count")? as usize;
    let mut segments = Vec::with_capacity(count.min(1 << 16));
    let mut total = 0usize;
    for _ in 0..count {
        let at = r.pos();
        let name_len = r.u16("segment name length")? as usize;
        let name = std::str::from_utf8(r.bytes(name_len, "segment name")?)
            .map_err(|_| r.fail(at + 2, "segment name is not UTF-8"))?
            .to_string();
        let offset = r.u64("segment offset")? as usize;
        let len = r.u64("segment length")? as usize;
        let kind_at = r.pos();
        let kind = SegmentKind::from_code(r.u8("segment kind")?)
            .ok_or_else(|| r.fail(kind_at, "unknown segment kind"))?;
        if offset != total {
            return Err(r.fail(at, format!("segment {name} does not tile the vector")));
        }
        total = total
            .checked_add(len)
            .ok_or_else(|| r.fail(at, "segment length overflow"))?;
        segments.push(Segment {
            name,
            offset,
            len,
            kind,
        });
    }
    let values = r.f32s(total, "parameter values")?;
    if r.remaining() != 0 {
        return Err(r.fail(r.pos(), "trailing bytes after parameters"));
    }
    ParamSet::new(segments, values)
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let p = build_model(ModelConfig::desk(), 5).unwrap();
        let bytes = write_checkpoint(&p);
        let q = read_checkpoint(&bytes).unwrap();
        assert!(p.same_layout(&q));
        let bits = |p: &ParamSet| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let p = build_model(ModelConfig::with_base(2), 5).unwrap();
        let bytes = write_checkpoint(&p);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                read_checkpoint(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }
    }
}
