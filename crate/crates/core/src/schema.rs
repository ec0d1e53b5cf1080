//! Label space, annotations, frame targets, and dataset records.
//!
//! A [`LabelSchema`] is an ordered list of label groups; classes are mutually
//! exclusive within a group and independent across groups, which is what makes
//! the problem multi-label. The concatenated logit/probability layout used by
//! the models is derived from the schema: group `k` owns a contiguous column
//! range of width `groups[k].classes.len()`.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One group of mutually exclusive classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGroup {
    pub name: String,
    pub classes: Vec<String>,
    /// Class assigned to frames not covered by any annotation of this group
    /// when rasterizing. `None` leaves uncovered frames unannotated, which is
    /// the behavior real sparsely-annotated corpora need; synthetic corpora
    /// with exhaustive ground truth may declare a default instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_class: Option<String>,
}

/// Ordered label groups defining the concatenated logit layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSchema {
    groups: Vec<LabelGroup>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("schema needs at least one group")]
    NoGroups,
    #[error("group {0:?} needs at least 2 classes")]
    TooFewClasses(String),
    #[error("duplicate group name {0:?}")]
    DuplicateGroup(String),
    #[error("duplicate class {class:?} in group {group:?}")]
    DuplicateClass { group: String, class: String },
    #[error("default class {class:?} not in group {group:?}")]
    UnknownDefault { group: String, class: String },
}

impl LabelSchema {
    pub fn new(groups: Vec<LabelGroup>) -> Result<Self, SchemaError> {
        if groups.is_empty() {
            return Err(SchemaError::NoGroups);
        }
        let mut names = Vec::new();
        for g in &groups {
            if g.classes.len() < 2 {
                return Err(SchemaError::TooFewClasses(g.name.clone()));
            }
            if names.contains(&g.name) {
                return Err(SchemaError::DuplicateGroup(g.name.clone()));
            }
            names.push(g.name.clone());
            let mut classes = Vec::new();
            for c in &g.classes {
                if classes.contains(&c) {
                    return Err(SchemaError::DuplicateClass {
                        group: g.name.clone(),
                        class: c.clone(),
                    });
                }
                classes.push(c);
            }
            if let Some(d) = &g.default_class {
                if !g.classes.contains(d) {
                    return Err(SchemaError::UnknownDefault {
                        group: g.name.clone(),
                        class: d.clone(),
                    });
                }
            }
        }
        Ok(Self { groups })
    }

    /// Default label space: tool presence, colon segment, inside/outside.
    ///
    /// Class index conventions are load-bearing elsewhere: `inout` index 0 is
    /// `inside` and index 1 is `outside`, so the consistency filter reads the
    /// argmax directly; `tool` index 1 means a tool is visible.
    pub fn default_schema() -> Self {
        Self::new(vec![
            LabelGroup {
                name: "tool".into(),
                classes: vec!["no_tool".into(), "tool".into()],
                default_class: None,
            },
            LabelGroup {
                name: "segment".into(),
                classes: vec![
                    "other".into(),
                    "ileum".into(),
                    "cecum".into(),
                    "retroflexion".into(),
                ],
                default_class: None,
            },
            LabelGroup {
                name: "inout".into(),
                classes: vec!["inside".into(), "outside".into()],
                default_class: None,
            },
        ])
        .expect("default schema is valid")
    }

    /// Same groups as [`default_schema`](Self::default_schema) but with
    /// per-group defaults declared, for corpora with exhaustive ground truth.
    pub fn default_schema_with_defaults() -> Self {
        let mut s = Self::default_schema();
        s.groups[0].default_class = Some("no_tool".into());
        s.groups[1].default_class = Some("other".into());
        s.groups[2].default_class = Some("outside".into());
        s
    }

    pub fn groups(&self) -> &[LabelGroup] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Sum of group widths: the width of the concatenated logit vector.
    pub fn total_width(&self) -> usize {
        self.groups.iter().map(|g| g.classes.len()).sum()
    }

    pub fn group_width(&self, group: usize) -> usize {
        self.groups[group].classes.len()
    }

    /// Column range owned by `group` in the concatenated layout.
    pub fn group_range(&self, group: usize) -> std::ops::Range<usize> {
        let start: usize = self.groups[..group].iter().map(|g| g.classes.len()).sum();
        start..start + self.groups[group].classes.len()
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn class_index(&self, group: usize, class: &str) -> Option<usize> {
        self.groups[group].classes.iter().position(|c| c == class)
    }

    /// Hex SHA-256 of the canonical JSON encoding; embedded in checkpoints so
    /// a model is never silently applied to a different label space.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("schema serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// `[start, end, label]` triplet; frame bounds are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub start: usize,
    pub end: usize,
    pub group: String,
    pub class: String,
}

impl SegmentAnnotation {
    pub fn new(start: usize, end: usize, group: &str, class: &str) -> Self {
        Self {
            start,
            end,
            group: group.into(),
            class: class.into(),
        }
    }
}

/// Per-frame hard targets: one optional class index per schema group.
/// `None` means the frame is unannotated for that group and is skipped by
/// every loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameTargets(pub Vec<Option<usize>>);

impl FrameTargets {
    pub fn absent(num_groups: usize) -> Self {
        Self(vec![None; num_groups])
    }

    pub fn all_absent(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }
}

/// Per-frame soft targets: one optional probability vector per schema group.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets(pub Vec<Option<Vec<f64>>>);

impl SoftTargets {
    pub fn absent(num_groups: usize) -> Self {
        Self(vec![None; num_groups])
    }

    /// Every present vector must be nonnegative and sum to 1 within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.0.iter().flatten().all(|v| {
            v.iter().all(|&p| p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Labeled,
    Unlabeled,
    Pseudo,
    Synthetic,
}

/// One video: frame features plus whatever supervision exists for it.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// T x D frame-feature matrix; row count defines the frame count.
    pub features: Array2<f32>,
    pub annotations: Vec<SegmentAnnotation>,
    pub keyframe_flags: Option<Vec<bool>>,
    pub provenance: Provenance,
    pub fps: f64,
    /// Pseudo-label soft targets, present only on `Provenance::Pseudo`
    /// records; one entry per frame.
    pub soft_targets: Option<Vec<SoftTargets>>,
}

impl VideoRecord {
    pub fn frame_count(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A set of records sharing one schema, with train/test split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub schema: LabelSchema,
    pub records: Vec<VideoRecord>,
    pub splits: BTreeMap<String, Split>,
}

impl Corpus {
    pub fn new(schema: LabelSchema) -> Self {
        Self {
            schema,
            records: Vec::new(),
            splits: BTreeMap::new(),
        }
    }

    pub fn split_records(&self, split: Split) -> Vec<&VideoRecord> {
        self.records
            .iter()
            .filter(|r| self.splits.get(&r.id) == Some(&split))
            .collect()
    }

    pub fn record(&self, id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RasterizeError {
    #[error("unknown group {0:?}")]
    UnknownGroup(String),
    #[error("unknown class {class:?} in group {group:?}")]
    UnknownClass { group: String, class: String },
    #[error("frame bounds [{start}, {end}] invalid for {frames} frames")]
    IndexOutOfRange {
        start: usize,
        end: usize,
        frames: usize,
    },
    #[error("conflicting classes for group {group:?} at frame {frame}")]
    OverlapConflict { group: String, frame: usize },
}

/// Expand segment annotations into per-frame targets.
///
/// Within one group, overlapping segments with the same class are allowed;
/// overlapping segments with different classes are an error. Frames not
/// covered by any segment of a group get the group's declared default class,
/// or an absent target when no default is declared.
pub fn rasterize_annotations(
    annotations: &[SegmentAnnotation],
    frames: usize,
    schema: &LabelSchema,
) -> Result<Vec<FrameTargets>, RasterizeError> {
    let ng = schema.num_groups();
    let mut targets = vec![FrameTargets::absent(ng); frames];
    for ann in annotations {
        let g = schema
            .group_index(&ann.group)
            .ok_or_else(|| RasterizeError::UnknownGroup(ann.group.clone()))?;
        let c = schema
            .class_index(g, &ann.class)
            .ok_or_else(|| RasterizeError::UnknownClass {
                group: ann.group.clone(),
                class: ann.class.clone(),
            })?;
        if ann.start > ann.end || ann.end >= frames {
            return Err(RasterizeError::IndexOutOfRange {
                start: ann.start,
                end: ann.end,
                frames,
            });
        }
        for t in ann.start..=ann.end {
            match targets[t].0[g] {
                None => targets[t].0[g] = Some(c),
                Some(prev) if prev == c => {}
                Some(_) => {
                    return Err(RasterizeError::OverlapConflict {
                        group: ann.group.clone(),
                        frame: t,
                    })
                }
            }
        }
    }
    for (g, group) in schema.groups().iter().enumerate() {
        if let Some(d) = &group.default_class {
            let c = schema.class_index(g, d).expect("default validated");
            for t in targets.iter_mut() {
                t.0[g].get_or_insert(c);
            }
        }
    }
    Ok(targets)
}

/// A single invariant violation found by [`validate_record`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    IndexOutOfRange { annotation: usize },
    UnknownGroup { annotation: usize },
    UnknownClass { annotation: usize },
    OverlapConflict { group: String, frame: usize },
    ShapeMismatch { field: &'static str },
    BadFps,
}

/// Collect every invariant violation without mutating the record.
pub fn validate_record(record: &VideoRecord, schema: &LabelSchema) -> Vec<Violation> {
    let mut out = Vec::new();
    let frames = record.frame_count();
    for (i, ann) in record.annotations.iter().enumerate() {
        match schema.group_index(&ann.group) {
            None => {
                out.push(Violation::UnknownGroup { annotation: i });
                continue;
            }
            Some(g) => {
                if schema.class_index(g, &ann.class).is_none() {
                    out.push(Violation::UnknownClass { annotation: i });
                    continue;
                }
            }
        }
        if ann.start > ann.end || ann.end >= frames {
            out.push(Violation::IndexOutOfRange { annotation: i });
        }
    }
    // Overlap conflicts are only well-defined once bounds and names are fine.
    if out.is_empty() {
        if let Err(RasterizeError::OverlapConflict { group, frame }) =
            rasterize_annotations(&record.annotations, frames, schema)
        {
            out.push(Violation::OverlapConflict { group, frame });
        }
    }
    if let Some(flags) = &record.keyframe_flags {
        if flags.len() != frames {
            out.push(Violation::ShapeMismatch {
                field: "keyframe_flags",
            });
        }
    }
    if let Some(soft) = &record.soft_targets {
        if soft.len() != frames {
            out.push(Violation::ShapeMismatch {
                field: "soft_targets",
            });
        }
    }
    if !(record.fps.is_finite() && record.fps > 0.0) {
        out.push(Violation::BadFps);
    }
    out
}
