//! Pseudo-labeling: run the encoder over unlabeled videos, smooth the
//! per-frame class probabilities with a Gaussian kernel, reject videos whose
//! smoothed labels break the procedure's temporal structure, and emit
//! soft-target records for the inout and tool groups.
//!
//! The segment group is deliberately never pseudo-labeled: those classes are
//! too hard to predict from a single frame for self-training to help.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encoder_forward, EncoderError, EncoderModel};
use crate::par;
use crate::schema::{Corpus, Provenance, SoftTargets, VideoRecord};
use crate::stream::{argmax, per_group_softmax, ProbabilityStream, StreamError};

/// Normalized symmetric Gaussian window of length `2 * half_width + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub sigma: f64,
    pub half_width: usize,
    weights: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum PseudoLabelError {
    #[error("invalid kernel parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("pool record {0:?} does not have unlabeled provenance")]
    PoolNotUnlabeled(String),
}

impl GaussianKernel {
    /// Weights proportional to `exp(-m^2 / (2 sigma^2))` for `m` in
    /// `[-half_width, half_width]`, normalized to sum 1.
    pub fn new(sigma: f64, half_width: usize) -> Result<Self, PseudoLabelError> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(PseudoLabelError::InvalidParameter(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        let mut weights: Vec<f64> = (-(half_width as i64)..=half_width as i64)
            .map(|m| (-((m * m) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= sum;
        }
        Ok(Self {
            sigma,
            half_width,
            weights,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }
}

/// Per-frame class probabilities from the encoder: per-group softmax of the
/// per-frame logits.
pub fn predict_streams(
    model: &EncoderModel,
    video: &VideoRecord,
) -> Result<ProbabilityStream, PseudoLabelError> {
    let features = video.features.mapv(f64::from);
    let out = encoder_forward(model, &features)?;
    Ok(per_group_softmax(&out.logits, model.schema())?)
}

/// Convolve every probability channel along time.
///
/// Near the boundaries the kernel is truncated to the valid frame range and
/// renormalized, so constant streams are exact fixed points and per-group
/// normalization is preserved.
pub fn smooth_stream(
    stream: &ProbabilityStream,
    kernel: &GaussianKernel,
) -> Result<ProbabilityStream, PseudoLabelError> {
    let frames = stream.frames();
    if frames == 0 {
        return Err(StreamError::EmptyStream.into());
    }
    let values = stream.values();
    let mut out = Array2::zeros(values.raw_dim());
    let m = kernel.half_width as i64;
    for t in 0..frames as i64 {
        let lo = (-m).max(t - frames as i64 + 1);
        let hi = m.min(t);
        let mut wsum = 0.0;
        for offset in lo..=hi {
            wsum += kernel.weights[(offset + m) as usize];
        }
        for c in 0..values.ncols() {
            let mut acc = 0.0;
            for offset in lo..=hi {
                let w = kernel.weights[(offset + m) as usize];
                acc += w * values[[(t - offset) as usize, c]];
            }
            out[[t as usize, c]] = acc / wsum;
        }
    }
    Ok(ProbabilityStream::new(out, stream.groups().to_vec())?)
}

/// Why a video was accepted or rejected by the consistency filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Ok,
    StartNotOutside,
    EndNotOutside,
    MiddleNotInside,
    ToolOutsideOverlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterVerdict {
    pub accepted: bool,
    pub reason: FilterReason,
}

impl FilterVerdict {
    fn ok() -> Self {
        Self {
            accepted: true,
            reason: FilterReason::Ok,
        }
    }

    fn rejected(reason: FilterReason) -> Self {
        Self {
            accepted: false,
            reason,
        }
    }
}

/// Accept a video iff its smoothed labels start and end outside the body, are
/// inside at the middle frame, and never show a tool outside the body.
///
/// Rules are checked in that order and the first failure becomes the reason.
/// The stream must contain the `inout` group (inside = 0, outside = 1) and
/// the `tool` group (tool = 1).
pub fn consistency_filter(stream: &ProbabilityStream) -> Result<FilterVerdict, PseudoLabelError> {
    let frames = stream.frames();
    if frames == 0 {
        return Err(StreamError::EmptyStream.into());
    }
    let inout = stream.group_view("inout")?;
    let tool = stream.group_view("tool")?;
    let inout_label = |t: usize| argmax(inout.row(t).as_slice().expect("contiguous row"));
    if inout_label(0) != 1 {
        return Ok(FilterVerdict::rejected(FilterReason::StartNotOutside));
    }
    if inout_label(frames - 1) != 1 {
        return Ok(FilterVerdict::rejected(FilterReason::EndNotOutside));
    }
    if inout_label(frames / 2) != 0 {
        return Ok(FilterVerdict::rejected(FilterReason::MiddleNotInside));
    }
    for t in 0..frames {
        let tool_label = argmax(tool.row(t).as_slice().expect("contiguous row"));
        if tool_label == 1 && inout_label(t) == 1 {
            return Ok(FilterVerdict::rejected(FilterReason::ToolOutsideOverlap));
        }
    }
    Ok(FilterVerdict::ok())
}

/// Acceptance statistics of one [`build_pseudo_dataset`] pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub accepted: usize,
    pub rejected_start_not_outside: usize,
    pub rejected_end_not_outside: usize,
    pub rejected_middle_not_inside: usize,
    pub rejected_tool_outside_overlap: usize,
    /// `None` for an empty pool (0 of 0).
    pub acceptance_rate: Option<f64>,
}

impl FilterReport {
    fn tally(verdicts: &[FilterReason]) -> Self {
        let mut report = Self {
            accepted: 0,
            rejected_start_not_outside: 0,
            rejected_end_not_outside: 0,
            rejected_middle_not_inside: 0,
            rejected_tool_outside_overlap: 0,
            acceptance_rate: None,
        };
        for v in verdicts {
            match v {
                FilterReason::Ok => report.accepted += 1,
                FilterReason::StartNotOutside => report.rejected_start_not_outside += 1,
                FilterReason::EndNotOutside => report.rejected_end_not_outside += 1,
                FilterReason::MiddleNotInside => report.rejected_middle_not_inside += 1,
                FilterReason::ToolOutsideOverlap => report.rejected_tool_outside_overlap += 1,
            }
        }
        if !verdicts.is_empty() {
            report.acceptance_rate = Some(report.accepted as f64 / verdicts.len() as f64);
        }
        report
    }

    pub fn total(&self) -> usize {
        self.accepted
            + self.rejected_start_not_outside
            + self.rejected_end_not_outside
            + self.rejected_middle_not_inside
            + self.rejected_tool_outside_overlap
    }
}

/// Groups that receive pseudo soft targets.
const PSEUDO_GROUPS: [&str; 2] = ["inout", "tool"];

/// Run predict -> smooth -> filter over an unlabeled pool and build a corpus
/// of accepted videos carrying smoothed soft targets for the inout and tool
/// groups only.
///
/// Videos are processed independently (in parallel with the `parallel`
/// feature) and the output corpus is sorted by id, so results are
/// order-independent and deterministic.
pub fn build_pseudo_dataset(
    model: &EncoderModel,
    pool: &Corpus,
    kernel: &GaussianKernel,
) -> Result<(Corpus, FilterReport), PseudoLabelError> {
    for rec in &pool.records {
        if rec.provenance != Provenance::Unlabeled {
            return Err(PseudoLabelError::PoolNotUnlabeled(rec.id.clone()));
        }
    }
    let schema = model.schema().clone();
    let results = par::map_slice(&pool.records, |rec| -> Result<_, PseudoLabelError> {
        let stream = predict_streams(model, rec)?;
        let smoothed = smooth_stream(&stream, kernel)?;
        let verdict = consistency_filter(&smoothed)?;
        if !verdict.accepted {
            return Ok((verdict.reason, None));
        }
        let group_indices: Vec<usize> = PSEUDO_GROUPS
            .iter()
            .map(|g| schema.group_index(g).expect("schema has pseudo groups"))
            .collect();
        let mut soft = Vec::with_capacity(rec.frame_count());
        for t in 0..rec.frame_count() {
            let mut frame = SoftTargets::absent(schema.num_groups());
            for (&gi, name) in group_indices.iter().zip(PSEUDO_GROUPS.iter()) {
                let view = smoothed.group_view(name)?;
                frame.0[gi] = Some(view.row(t).to_vec());
            }
            soft.push(frame);
        }
        let record = VideoRecord {
            id: rec.id.clone(),
            features: rec.features.clone(),
            annotations: Vec::new(),
            keyframe_flags: None,
            provenance: Provenance::Pseudo,
            fps: rec.fps,
            soft_targets: Some(soft),
        };
        Ok((FilterReason::Ok, Some(record)))
    });

    let mut reasons = Vec::with_capacity(pool.records.len());
    let mut out = Corpus::new(pool.schema.clone());
    for r in results {
        let (reason, record) = r?;
        reasons.push(reason);
        if let Some(rec) = record {
            out.records.push(rec);
        }
    }
    out.records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((out, FilterReport::tally(&reasons)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{rasterize_annotations, LabelSchema};
    use crate::stream::GroupLayout;
    use ndarray::s;
    use rand::prelude::*;

    fn full_layout() -> Vec<GroupLayout> {
        ProbabilityStream::schema_layout(&LabelSchema::default_schema())
    }

    /// One-hot stream from per-frame (tool, segment, inout) class indices.
    fn one_hot_stream(labels: &[(usize, usize, usize)]) -> ProbabilityStream {
        let mut values = Array2::zeros((labels.len(), 8));
        for (t, &(tool, segment, inout)) in labels.iter().enumerate() {
            values[[t, tool]] = 1.0;
            values[[t, 2 + segment]] = 1.0;
            values[[t, 6 + inout]] = 1.0;
        }
        ProbabilityStream::new(values, full_layout()).unwrap()
    }

    #[test]
    fn kernel_table_parameters() {
        let k = GaussianKernel::new(5.0, 10).unwrap();
        assert_eq!(k.len(), 21);
        assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for m in 0..=10usize {
            assert_eq!(k.weights()[10 - m], k.weights()[10 + m]);
        }
        assert!(GaussianKernel::new(0.0, 10).is_err());
        assert!(GaussianKernel::new(-1.0, 10).is_err());
    }

    #[test]
    fn zero_width_kernel_is_identity() {
        let k = GaussianKernel::new(3.0, 0).unwrap();
        assert_eq!(k.weights(), &[1.0]);
        let stream = one_hot_stream(&[(0, 0, 1), (1, 2, 0), (0, 3, 0)]);
        let sm = smooth_stream(&stream, &k).unwrap();
        assert_eq!(sm.values(), stream.values());
    }

    #[test]
    fn constant_stream_is_fixed_point() {
        let mut values = Array2::zeros((40, 8));
        for mut row in values.rows_mut() {
            row.assign(&ndarray::arr1(&[0.3, 0.7, 0.1, 0.2, 0.3, 0.4, 0.9, 0.1]));
        }
        let stream = ProbabilityStream::new(values, full_layout()).unwrap();
        let sm = smooth_stream(&stream, &GaussianKernel::new(5.0, 10).unwrap()).unwrap();
        for (a, b) in sm.values().iter().zip(stream.values().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn impulse_response_reproduces_kernel_profile() {
        // Interior impulse on one channel: the smoothed channel equals the
        // kernel weights (no truncation in the interior).
        let frames = 61;
        let mut values = Array2::zeros((frames, 8));
        for t in 0..frames {
            values[[t, 0]] = 1.0;
            values[[t, 2]] = 1.0;
            values[[t, 6]] = 1.0;
        }
        let center = 30;
        values[[center, 6]] = 0.0;
        values[[center, 7]] = 1.0;
        let stream = ProbabilityStream::new(values, full_layout()).unwrap();
        let k = GaussianKernel::new(5.0, 10).unwrap();
        let sm = smooth_stream(&stream, &k).unwrap();
        for (i, &w) in k.weights().iter().enumerate() {
            let t = center + i - 10;
            assert!(
                (sm.values()[[t, 7]] - w).abs() < 1e-12,
                "offset {i}: {} vs {w}",
                sm.values()[[t, 7]]
            );
        }
        assert!(sm.normalization_error() < 1e-9);
    }

    #[test]
    fn smoothing_preserves_normalization() {
        let mut rng = StdRng::seed_from_u64(3);
        let schema = LabelSchema::default_schema();
        for _ in 0..20 {
            let frames = rng.gen_range(1..50);
            let mut logits = Array2::zeros((frames, 8));
            for v in logits.iter_mut() {
                *v = rng.gen_range(-3.0..3.0);
            }
            let stream = per_group_softmax(&logits, &schema).unwrap();
            let sm = smooth_stream(&stream, &GaussianKernel::new(2.0, 4).unwrap()).unwrap();
            assert!(sm.normalization_error() < 1e-9);
        }
    }

    #[test]
    fn empty_stream_errors() {
        let stream = ProbabilityStream::new(Array2::zeros((0, 8)), full_layout()).unwrap();
        let err = smooth_stream(&stream, &GaussianKernel::new(1.0, 1).unwrap()).unwrap_err();
        assert_eq!(err, PseudoLabelError::Stream(StreamError::EmptyStream));
    }

    #[test]
    fn filter_accepts_well_formed_video() {
        let mut labels = vec![(0, 0, 1); 4];
        labels.extend(vec![(0, 0, 0); 20]);
        labels.push((1, 0, 0));
        labels.extend(vec![(0, 0, 1); 4]);
        let verdict = consistency_filter(&one_hot_stream(&labels)).unwrap();
        assert_eq!(verdict, FilterVerdict::ok());
    }

    #[test]
    fn filter_reason_order_is_start_end_middle_tool() {
        // All inside: start rule is reported first.
        let labels = vec![(0, 0, 0); 21];
        let verdict = consistency_filter(&one_hot_stream(&labels)).unwrap();
        assert_eq!(verdict.reason, FilterReason::StartNotOutside);
        assert!(!verdict.accepted);

        let mut labels = vec![(0, 0, 0); 21];
        labels[0] = (0, 0, 1);
        let verdict = consistency_filter(&one_hot_stream(&labels)).unwrap();
        assert_eq!(verdict.reason, FilterReason::EndNotOutside);

        let mut labels = vec![(0, 0, 1); 21];
        for l in labels.iter_mut().take(8).skip(2) {
            *l = (0, 0, 0);
        }
        for l in labels.iter_mut().take(19).skip(12) {
            *l = (0, 0, 0);
        }
        let verdict = consistency_filter(&one_hot_stream(&labels)).unwrap();
        assert_eq!(verdict.reason, FilterReason::MiddleNotInside);

        let mut labels = vec![(0, 0, 1); 2];
        labels.extend(vec![(0, 0, 0); 9]);
        labels.extend(vec![(0, 0, 1); 2]);
        labels[1] = (1, 0, 1); // tool while outside
        let verdict = consistency_filter(&one_hot_stream(&labels)).unwrap();
        assert_eq!(verdict.reason, FilterReason::ToolOutsideOverlap);
    }

    #[test]
    fn filter_needs_inout_and_tool_groups() {
        let stream = one_hot_stream(&[(0, 0, 1), (0, 0, 0), (0, 0, 1)]);
        let only_segment = stream.subset(&["segment"]).unwrap();
        assert!(matches!(
            consistency_filter(&only_segment),
            Err(PseudoLabelError::Stream(StreamError::MissingGroup(_)))
        ));
        let sub = stream.subset(&["tool", "inout"]).unwrap();
        assert!(consistency_filter(&sub).unwrap().accepted);
    }

    #[test]
    fn filter_is_scale_invariant_prenormalization() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..20 {
            let frames = rng.gen_range(3..40);
            let mut values = Array2::zeros((frames, 8));
            for v in values.iter_mut() {
                *v = rng.gen_range(0.01..1.0);
            }
            let stream = ProbabilityStream::new(values.clone(), full_layout()).unwrap();
            let verdict = consistency_filter(&stream).unwrap();
            // Rescale each group's block of each frame by a positive factor.
            for t in 0..frames {
                for (lo, hi) in [(0, 2), (2, 6), (6, 8)] {
                    let f = rng.gen_range(0.5..2.0);
                    for c in lo..hi {
                        values[[t, c]] *= f;
                    }
                }
            }
            let rescaled = ProbabilityStream::new(values, full_layout()).unwrap();
            assert_eq!(consistency_filter(&rescaled).unwrap(), verdict);
        }
    }

    #[test]
    fn ground_truth_streams_of_generated_videos_pass() {
        use crate::synthgen::{generate_corpus, GeneratorConfig};
        let cfg = GeneratorConfig {
            feature_dim: 6,
            frame_count_range: (80, 140),
            ..GeneratorConfig::default()
        };
        let corpus = generate_corpus(&cfg, 10, 31).unwrap();
        let schema = corpus.schema.clone();
        for rec in &corpus.records {
            let targets =
                rasterize_annotations(&rec.annotations, rec.frame_count(), &schema).unwrap();
            let labels: Vec<(usize, usize, usize)> = targets
                .iter()
                .map(|t| (t.0[0].unwrap(), t.0[1].unwrap(), t.0[2].unwrap()))
                .collect();
            assert!(
                consistency_filter(&one_hot_stream(&labels)).unwrap().accepted,
                "video {} ground truth rejected",
                rec.id
            );
        }
    }

    #[test]
    fn pseudo_dataset_requires_unlabeled_pool_and_reports() {
        use crate::synthgen::{generate_corpus, GeneratorConfig};
        let cfg = GeneratorConfig {
            feature_dim: 6,
            frame_count_range: (60, 100),
            ..GeneratorConfig::default()
        };
        let labeled = generate_corpus(&cfg, 3, 41).unwrap();
        let model = EncoderModel::seeded(&labeled.schema, 6, &[8, 4], 1);
        let kernel = GaussianKernel::new(5.0, 10).unwrap();
        // Synthetic provenance is rejected.
        assert!(matches!(
            build_pseudo_dataset(&model, &labeled, &kernel),
            Err(PseudoLabelError::PoolNotUnlabeled(_))
        ));

        let mut pool = labeled.clone();
        for r in pool.records.iter_mut() {
            r.provenance = Provenance::Unlabeled;
            r.annotations.clear();
            r.keyframe_flags = None;
        }
        let (out, report) = build_pseudo_dataset(&model, &pool, &kernel).unwrap();
        assert_eq!(report.total(), 3);
        assert_eq!(out.records.len(), report.accepted);
        for rec in &out.records {
            assert_eq!(rec.provenance, Provenance::Pseudo);
            let soft = rec.soft_targets.as_ref().unwrap();
            assert_eq!(soft.len(), rec.frame_count());
            for frame in soft {
                assert!(frame.0[0].is_some()); // tool
                assert!(frame.0[1].is_none()); // segment: never pseudo-labeled
                assert!(frame.0[2].is_some()); // inout
                assert!(frame.is_normalized(1e-6));
            }
        }

        // Empty pool: empty corpus, 0-of-0 rate.
        let empty = Corpus::new(pool.schema.clone());
        let (out, report) = build_pseudo_dataset(&model, &empty, &kernel).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(report.acceptance_rate, None);
    }

    #[test]
    fn predict_streams_matches_forward_softmax_rows() {
        use crate::synthgen::{generate_video, GeneratorConfig};
        let cfg = GeneratorConfig {
            feature_dim: 6,
            frame_count_range: (60, 80),
            ..GeneratorConfig::default()
        };
        let rec = generate_video(&cfg, 3).unwrap();
        let schema = LabelSchema::default_schema();
        let model = EncoderModel::seeded(&schema, 6, &[8, 4], 2);
        let stream = predict_streams(&model, &rec).unwrap();
        assert!(stream.normalization_error() < 1e-9);
        let out = encoder_forward(&model, &rec.features.mapv(f64::from)).unwrap();
        for t in (0..rec.frame_count()).step_by(17) {
            let row_logits = out.logits.slice(s![t..t + 1, ..]).to_owned();
            let row_stream = per_group_softmax(&row_logits, &schema).unwrap();
            for c in 0..8 {
                assert!((row_stream.values()[[0, c]] - stream.values()[[t, c]]).abs() < 1e-12);
            }
        }

        // All-zero parameters: uniform distributions per group.
        let mut zero = EncoderModel::seeded(&schema, 6, &[8, 4], 2);
        let zeros = vec![0.0; zero.param_count()];
        zero.set_param_vector(&zeros);
        let stream = predict_streams(&zero, &rec).unwrap();
        let expected = [0.5, 0.5, 0.25, 0.25, 0.25, 0.25, 0.5, 0.5];
        for row in stream.values().rows() {
            for (a, b) in row.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
