//! Flat parameter vectors and the segment registry that gives them structure.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: SegmentKind,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, gap-free list of named segments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    /// Builds a layout by packing `(name, shape, kind)` segments back to back.
    pub fn packed<S: Into<String>>(
        parts: impl IntoIterator<Item = (S, Vec<usize>, SegmentKind)>,
    ) -> Result<Self> {
        let mut offset = 0;
        let mut segments = Vec::new();
        for (name, shape, kind) in parts {
            let seg = Segment {
                name: name.into(),
                shape,
                offset,
                kind,
            };
            if seg.is_empty() {
                return Err(Error::shape(seg.name, "non-empty segment", 0));
            }
            offset += seg.len();
            segments.push(seg);
        }
        Ok(Layout {
            segments,
            len: offset,
        })
    }

    /// Checks the registry invariants: offsets strictly increasing, segments
    /// disjoint and covering `[0, len)` exactly.
    pub fn validate(&self) -> Result<()> {
        let mut expect = 0;
        for seg in &self.segments {
            if seg.offset != expect || seg.is_empty() {
                return Err(Error::shape(&seg.name, format!("offset {expect}"), seg.offset));
            }
            expect += seg.len();
        }
        if expect != self.len {
            return Err(Error::shape("layout", self.len, expect));
        }
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Per-coordinate segment kind.
    pub fn kinds(&self) -> Vec<SegmentKind> {
        let mut out = Vec::with_capacity(self.len);
        for seg in &self.segments {
            out.extend(std::iter::repeat_n(seg.kind, seg.len()));
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("layout serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// First 8 bytes of [`digest`](Self::digest), used in binary headers.
    pub fn hash64(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("layout serializes");
        let d = Sha256::digest(&json);
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// Flat real parameters with a shared registry.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape("params", layout.len(), values.len()));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.len();
        ParamVector {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .segments()
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    /// Same registry, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ParamVector::new(self.layout.clone(), values)
    }

    pub fn check_aligned(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.layout != other.layout && *self.layout != *other.layout {
            return Err(Error::shape(what, "same registry", "different registry"));
        }
        Ok(())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_aligned(other, "sub")?;
        let v = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        self.with_values(v)
    }

    pub fn norm2(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_layout_is_contiguous() {
        let l = Layout::packed([
            ("w", vec![2, 3], SegmentKind::Weight),
            ("b", vec![3], SegmentKind::Bias),
        ])
        .unwrap();
        l.validate().unwrap();
        assert_eq!(l.len(), 9);
        assert_eq!(l.segments()[1].offset, 6);
        assert_eq!(l.kinds().iter().filter(|k| **k == SegmentKind::Bias).count(), 3);
    }

    #[test]
    fn validate_rejects_gaps() {
        let mut l = Layout::packed([("w", vec![2], SegmentKind::Weight)]).unwrap();
        l.segments[0].offset = 1;
        assert!(l.validate().is_err());
    }

    #[test]
    fn wrong_length_is_rejected() {
        let l = Arc::new(Layout::packed([("w", vec![4], SegmentKind::Weight)]).unwrap());
        assert!(ParamVector::new(l, vec![0.0; 3]).is_err());
    }
}
