//! Per-frame probability streams over a (subset of a) label schema.

use ndarray::{s, Array2, ArrayView2};
use thiserror::Error;

use crate::schema::LabelSchema;

/// Layout of one group's columns inside a stream matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    pub name: String,
    pub offset: usize,
    pub width: usize,
}

/// A `T x W` matrix of concatenated per-group class distributions.
///
/// Each group's slice of each row sums to 1; the group layout travels with
/// the matrix so subset streams (e.g. tool+inout only) stay self-describing.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityStream {
    values: Array2<f64>,
    groups: Vec<GroupLayout>,
}

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("stream width {width} does not match layout width {expected}")]
    ShapeMismatch { width: usize, expected: usize },
    #[error("stream has no frames")]
    EmptyStream,
    #[error("group {0:?} missing from stream")]
    MissingGroup(String),
}

impl ProbabilityStream {
    pub fn new(values: Array2<f64>, groups: Vec<GroupLayout>) -> Result<Self, StreamError> {
        let expected = groups.iter().map(|g| g.width).sum();
        if values.ncols() != expected {
            return Err(StreamError::ShapeMismatch {
                width: values.ncols(),
                expected,
            });
        }
        Ok(Self { values, groups })
    }

    /// Full-schema layout in schema group order.
    pub fn schema_layout(schema: &LabelSchema) -> Vec<GroupLayout> {
        schema
            .groups()
            .iter()
            .enumerate()
            .map(|(g, group)| GroupLayout {
                name: group.name.clone(),
                offset: schema.group_range(g).start,
                width: group.classes.len(),
            })
            .collect()
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn groups(&self) -> &[GroupLayout] {
        &self.groups
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn group_layout(&self, name: &str) -> Option<&GroupLayout> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// View of one group's columns.
    pub fn group_view(&self, name: &str) -> Result<ArrayView2<'_, f64>, StreamError> {
        let g = self
            .group_layout(name)
            .ok_or_else(|| StreamError::MissingGroup(name.to_string()))?;
        Ok(self.values.slice(s![.., g.offset..g.offset + g.width]))
    }

    /// Keep only the named groups, in the given order.
    pub fn subset(&self, names: &[&str]) -> Result<Self, StreamError> {
        let mut cols = Vec::new();
        let mut groups = Vec::new();
        let mut offset = 0;
        for name in names {
            let g = self
                .group_layout(name)
                .ok_or_else(|| StreamError::MissingGroup(name.to_string()))?;
            cols.push((g.offset, g.width));
            groups.push(GroupLayout {
                name: g.name.clone(),
                offset,
                width: g.width,
            });
            offset += g.width;
        }
        let mut values = Array2::zeros((self.frames(), offset));
        let mut at = 0;
        for (src_off, w) in cols {
            values
                .slice_mut(s![.., at..at + w])
                .assign(&self.values.slice(s![.., src_off..src_off + w]));
            at += w;
        }
        Ok(Self { values, groups })
    }

    /// Max deviation of any group row-sum from 1.
    pub fn normalization_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for g in &self.groups {
            for row in self
                .values
                .slice(s![.., g.offset..g.offset + g.width])
                .rows()
            {
                worst = worst.max((row.sum() - 1.0).abs());
            }
        }
        worst
    }

    /// Per-frame argmax for each group; ties break toward the lower index.
    pub fn argmax_labels(&self) -> Vec<Vec<usize>> {
        self.groups
            .iter()
            .map(|g| {
                (0..self.frames())
                    .map(|t| {
                        argmax(
                            self.values
                                .slice(s![t, g.offset..g.offset + g.width])
                                .as_slice()
                                .expect("contiguous row slice"),
                        )
                    })
                    .collect()
            })
            .collect()
    }
}

/// Index of the maximum value; ties break toward the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax applied independently to each group's logit slice, per frame.
pub fn per_group_softmax(
    logits: &Array2<f64>,
    schema: &LabelSchema,
) -> Result<ProbabilityStream, StreamError> {
    let groups = ProbabilityStream::schema_layout(schema);
    if logits.ncols() != schema.total_width() {
        return Err(StreamError::ShapeMismatch {
            width: logits.ncols(),
            expected: schema.total_width(),
        });
    }
    let mut values = logits.clone();
    for g in &groups {
        for mut row in values
            .slice_mut(s![.., g.offset..g.offset + g.width])
            .rows_mut()
        {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    ProbabilityStream::new(values, groups)
}
