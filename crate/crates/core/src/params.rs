//! Flat parameter vectors with named, shaped segments.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
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

/// Ordered segments that tile `0..total` without gaps or overlaps.
///
/// Layouts are shared behind an `Arc` so every vector derived from the same
/// model keeps identical offsets for the life of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    /// Lays out `(name, shape)` pairs back to back.
    pub fn new<S: Into<String>>(parts: impl IntoIterator<Item = (S, Vec<usize>)>) -> Result<Self> {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (name, shape) in parts {
            let name = name.into();
            if segments.iter().any(|s: &Segment| s.name == name) {
                return Err(Error::invalid(format!("duplicate segment name {name}")));
            }
            let seg = Segment {
                name,
                shape,
                offset,
            };
            offset += seg.len();
            segments.push(seg);
        }
        Ok(Self {
            segments,
            total: offset,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Segment> {
        self.segment(name)
            .ok_or_else(|| Error::invalid(format!("no parameter segment named {name}")))
    }
}

/// A flat `f64` vector indexed by a [`ParamLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Shape {
                op: "param_vector",
                shapes: format!(
                    "layout holds {} values, got {}",
                    layout.total(),
                    values.len()
                ),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.total();
        Self {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
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

    pub fn segment(&self, name: &str) -> Result<&[f64]> {
        let seg = self.layout.require(name)?;
        Ok(&self.values[seg.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let range = self.layout.require(name)?.range();
        Ok(&mut self.values[range])
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
