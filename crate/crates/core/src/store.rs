//! Corpus on-disk format.
//!
//! Layout:
//!
//! ```text
//! root/
//!   schema.json
//!   splits.json            {"train": [ids...], "test": [ids...]}
//!   <video-id>/
//!     meta.json            id, frames, feature_dim, fps, provenance,
//!                          key-frame flags as run-length ranges,
//!                          soft-target group names when present
//!     features.bin         row-major little-endian f32, frames x feature_dim
//!     annotations.json     [{start, end, group, class}, ...]
//!     soft_targets.bin     row-major little-endian f32 (pseudo records only)
//! ```
//!
//! Writing is deterministic and write -> read -> write round-trips
//! byte-identically.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{
    Corpus, LabelSchema, Provenance, SegmentAnnotation, SoftTargets, Split, VideoRecord,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn malformed(path: &Path, message: impl Into<String>) -> Self {
        Self::Malformed {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaJson {
    id: String,
    frames: usize,
    feature_dim: usize,
    fps: f64,
    provenance: Provenance,
    /// Inclusive [start, end] ranges of `true` key-frame flags; `None` when
    /// the record carries no flags at all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keyframe_ranges: Option<Vec<(usize, usize)>>,
    /// Group names covered by soft_targets.bin, in on-disk column order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    soft_target_groups: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitsJson {
    train: Vec<String>,
    test: Vec<String>,
}

fn flags_to_ranges(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, flags.len() - 1));
    }
    out
}

fn ranges_to_flags(ranges: &[(usize, usize)], frames: usize) -> Vec<bool> {
    let mut flags = vec![false; frames];
    for &(s, e) in ranges {
        for f in flags.iter_mut().take(e.min(frames - 1) + 1).skip(s) {
            *f = true;
        }
    }
    flags
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| StoreError::malformed(path, e.to_string()))?;
    body.push('\n');
    fs::write(path, body).map_err(|e| StoreError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let body = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| StoreError::malformed(path, e.to_string()))
}

fn write_f32_matrix(path: &Path, rows: usize, cols: usize, values: impl Iterator<Item = f32>) -> Result<(), StoreError> {
    let mut buf = Vec::with_capacity(rows * cols * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if buf.len() != rows * cols * 4 {
        return Err(StoreError::malformed(path, "value count mismatch"));
    }
    let file = fs::File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&buf).map_err(|e| StoreError::io(path, e))?;
    w.flush().map_err(|e| StoreError::io(path, e))
}

fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Vec<f32>, StoreError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| StoreError::io(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| StoreError::io(path, e))?;
    if buf.len() != rows * cols * 4 {
        return Err(StoreError::malformed(
            path,
            format!("expected {} bytes, found {}", rows * cols * 4, buf.len()),
        ));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Soft targets are stored as the concatenation of the named groups' columns.
fn soft_targets_to_rows(
    soft: &[SoftTargets],
    schema: &LabelSchema,
    groups: &[String],
) -> (Vec<f32>, usize) {
    let widths: Vec<usize> = groups
        .iter()
        .map(|g| schema.group_width(schema.group_index(g).expect("known group")))
        .collect();
    let row_width: usize = widths.iter().sum();
    let mut values = Vec::with_capacity(soft.len() * row_width);
    for frame in soft {
        for (g, width) in groups.iter().zip(widths.iter()) {
            let gi = schema.group_index(g).expect("known group");
            match &frame.0[gi] {
                Some(v) => values.extend(v.iter().map(|&p| p as f32)),
                None => values.extend(std::iter::repeat(0.0f32).take(*width)),
            }
        }
    }
    (values, row_width)
}

/// Group names that have a soft target on at least one frame, in schema order.
fn soft_target_groups(soft: &[SoftTargets], schema: &LabelSchema) -> Vec<String> {
    schema
        .groups()
        .iter()
        .enumerate()
        .filter(|(g, _)| soft.iter().any(|f| f.0[*g].is_some()))
        .map(|(_, group)| group.name.clone())
        .collect()
}

pub fn write_record(dir: &Path, record: &VideoRecord, schema: &LabelSchema) -> Result<(), StoreError> {
    fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    let soft_groups = record
        .soft_targets
        .as_ref()
        .map(|s| soft_target_groups(s, schema));
    let meta = MetaJson {
        id: record.id.clone(),
        frames: record.frame_count(),
        feature_dim: record.feature_dim(),
        fps: record.fps,
        provenance: record.provenance,
        keyframe_ranges: record.keyframe_flags.as_ref().map(|f| flags_to_ranges(f)),
        soft_target_groups: soft_groups.clone(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    write_json(&dir.join("annotations.json"), &record.annotations)?;
    write_f32_matrix(
        &dir.join("features.bin"),
        record.frame_count(),
        record.feature_dim(),
        record.features.iter().copied(),
    )?;
    if let (Some(soft), Some(groups)) = (&record.soft_targets, &soft_groups) {
        let (values, row_width) = soft_targets_to_rows(soft, schema, groups);
        write_f32_matrix(
            &dir.join("soft_targets.bin"),
            record.frame_count(),
            row_width,
            values.into_iter(),
        )?;
    }
    Ok(())
}

pub fn read_record(dir: &Path, schema: &LabelSchema) -> Result<VideoRecord, StoreError> {
    let meta: MetaJson = read_json(&dir.join("meta.json"))?;
    let annotations: Vec<SegmentAnnotation> = read_json(&dir.join("annotations.json"))?;
    let values = read_f32_matrix(&dir.join("features.bin"), meta.frames, meta.feature_dim)?;
    let features = Array2::from_shape_vec((meta.frames, meta.feature_dim), values)
        .map_err(|e| StoreError::malformed(&dir.join("features.bin"), e.to_string()))?;
    let soft_targets = match &meta.soft_target_groups {
        None => None,
        Some(groups) => {
            let widths: Vec<(usize, usize)> = groups
                .iter()
                .map(|g| {
                    let gi = schema.group_index(g).ok_or_else(|| {
                        StoreError::malformed(&dir.join("meta.json"), format!("unknown group {g}"))
                    })?;
                    Ok((gi, schema.group_width(gi)))
                })
                .collect::<Result<_, StoreError>>()?;
            let row_width: usize = widths.iter().map(|(_, w)| w).sum();
            let values = read_f32_matrix(&dir.join("soft_targets.bin"), meta.frames, row_width)?;
            let mut soft = Vec::with_capacity(meta.frames);
            for t in 0..meta.frames {
                let mut frame = SoftTargets::absent(schema.num_groups());
                let mut at = t * row_width;
                for &(gi, w) in &widths {
                    frame.0[gi] = Some(values[at..at + w].iter().map(|&v| v as f64).collect());
                    at += w;
                }
                soft.push(frame);
            }
            Some(soft)
        }
    };
    Ok(VideoRecord {
        id: meta.id,
        features,
        annotations,
        keyframe_flags: meta
            .keyframe_ranges
            .as_ref()
            .map(|r| ranges_to_flags(r, meta.frames)),
        provenance: meta.provenance,
        fps: meta.fps,
        soft_targets,
    })
}

/// Write a corpus under `root`, one directory per video.
pub fn write_corpus(root: &Path, corpus: &Corpus) -> Result<(), StoreError> {
    fs::create_dir_all(root).map_err(|e| StoreError::io(root, e))?;
    write_json(&root.join("schema.json"), &corpus.schema)?;
    let mut splits = SplitsJson {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (id, split) in &corpus.splits {
        match split {
            Split::Train => splits.train.push(id.clone()),
            Split::Test => splits.test.push(id.clone()),
        }
    }
    write_json(&root.join("splits.json"), &splits)?;
    for record in &corpus.records {
        write_record(&root.join(&record.id), record, &corpus.schema)?;
    }
    Ok(())
}

/// Read a corpus written by [`write_corpus`]. Records come back sorted by id.
pub fn read_corpus(root: &Path) -> Result<Corpus, StoreError> {
    let schema: LabelSchema = read_json(&root.join("schema.json"))?;
    let mut corpus = Corpus::new(schema);
    if root.join("splits.json").is_file() {
        let splits: SplitsJson = read_json(&root.join("splits.json"))?;
        for id in splits.train {
            corpus.splits.insert(id, Split::Train);
        }
        for id in splits.test {
            corpus.splits.insert(id, Split::Test);
        }
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| StoreError::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    for dir in dirs {
        corpus.records.push(read_record(&dir, &corpus.schema)?);
    }
    Ok(corpus)
}
