use std::sync::Arc;

use crate::error::{Error, Result};

/// Role of a contiguous run of parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 6] = [
        SegmentKind::ConvWeight,
        SegmentKind::ConvBias,
        SegmentKind::BnGamma,
        SegmentKind::BnBeta,
        SegmentKind::BnRunningMean,
        SegmentKind::BnRunningVar,
    ];

    pub fn is_bn(self) -> bool {
        !matches!(self, SegmentKind::ConvWeight | SegmentKind::ConvBias)
    }

    /// Updated by gradient descent (running statistics are not).
    pub fn is_trainable(self) -> bool {
        !matches!(self, SegmentKind::BnRunningMean | SegmentKind::BnRunningVar)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub kind: SegmentKind,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter vector partitioned into named segments.
///
/// Segments tile `values` exactly, in order. The layout is shared between
/// clones, so copying a `ParamSet` only copies the numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    values: Vec<f32>,
    segments: Arc<[Segment]>,
}

impl ParamSet {
    pub fn new(segments: Vec<Segment>, values: Vec<f32>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.offset != next {
                return Err(Error::Config(format!(
                    "segment {} starts at {} but previous ended at {next}",
                    s.name, s.offset
                )));
            }
            next += s.len;
        }
        if next != values.len() {
            return Err(Error::Config(format!(
                "segments cover {next} values, vector has {}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            segments: segments.into(),
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, seg: &Segment) -> &[f32] {
        &self.values[seg.range()]
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        Arc::ptr_eq(&self.segments, &other.segments) || self.segments == other.segments
    }

    /// Number of values in segments accepted by `filter`.
    pub fn count(&self, filter: impl Fn(SegmentKind) -> bool) -> usize {
        self.segments
            .iter()
            .filter(|s| filter(s.kind))
            .map(|s| s.len)
            .sum()
    }

    /// Concatenates the segments accepted by `filter`, in layout order.
    pub fn gather(&self, filter: impl Fn(SegmentKind) -> bool) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.count(&filter));
        for s in self.segments.iter().filter(|s| filter(s.kind)) {
            out.extend_from_slice(&self.values[s.range()]);
        }
        out
    }

    /// Inverse of [`ParamSet::gather`].
    pub fn scatter(&mut self, filter: impl Fn(SegmentKind) -> bool, src: &[f32]) -> Result<()> {
        let expected = self.count(&filter);
        if src.len() != expected {
            return Err(Error::Protocol(format!(
                "scatter of {} values into {expected} slots",
                src.len()
            )));
        }
        let mut at = 0;
        for s in self.segments.iter().filter(|s| filter(s.kind)) {
            self.values[s.range()].copy_from_slice(&src[at..at + s.len]);
            at += s.len;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(name: &str, offset: usize, len: usize, kind: SegmentKind) -> Segment {
        Segment {
            name: name.into(),
            offset,
            len,
            kind,
        }
    }

    #[test]
    fn rejects_gaps_and_overlaps() {
        let gap = vec![
            seg("a", 0, 2, SegmentKind::ConvWeight),
            seg("b", 3, 1, SegmentKind::ConvBias),
        ];
        assert!(ParamSet::new(gap, vec![0.0; 4]).is_err());
        let short = vec![seg("a", 0, 2, SegmentKind::ConvWeight)];
        assert!(ParamSet::new(short, vec![0.0; 3]).is_err());
    }

    #[test]
    fn gather_scatter_by_kind() {
        let segs = vec![
            seg("w", 0, 2, SegmentKind::ConvWeight),
            seg("g", 2, 1, SegmentKind::BnGamma),
            seg("b", 3, 1, SegmentKind::ConvBias),
        ];
        let mut p = ParamSet::new(segs, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.gather(|k| !k.is_bn()), vec![1.0, 2.0, 4.0]);
        p.scatter(|k| !k.is_bn(), &[9.0, 8.0, 7.0]).unwrap();
        assert_eq!(p.values(), &[9.0, 8.0, 3.0, 7.0]);
        assert!(p.scatter(|k| k.is_bn(), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kind_codes_round_trip() {
        for k in SegmentKind::ALL {
            assert_eq!(SegmentKind::from_code(k.code()), Some(k));
        }
        assert_eq!(SegmentKind::from_code(6), None);
    }
}
