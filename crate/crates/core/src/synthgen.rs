//! Synthetic procedure corpus generator.
//!
//! Videos follow the grammar `outside -> intubation [-> reinsertion] ->
//! ileum? -> cecum -> withdrawal -> retroflexion? -> outside`, with tool
//! sub-intervals during withdrawal. Frame features are class prototypes plus
//! Gaussian noise; non-informative (blurred) frames carry a shared
//! uninformative prototype instead, and a per-video offset models
//! patient/device variation so corpora with few videos are genuinely harder.
//!
//! Everything is a pure function of `(config, seed)`.

use ndarray::{Array1, Array2};
use rand::distributions::Bernoulli;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, LogNormal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::derive_seed;
use crate::par;
use crate::schema::{
    Corpus, LabelSchema, Provenance, SegmentAnnotation, Split, VideoRecord,
};

/// Log-normal duration model for one phase, parameterized by its mean length
/// in frames and the log-space sigma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationDist {
    pub mean_frames: f64,
    pub sigma_log: f64,
}

impl DurationDist {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let mu = self.mean_frames.ln() - 0.5 * self.sigma_log * self.sigma_log;
        let d = LogNormal::new(mu, self.sigma_log).expect("valid log-normal");
        rng.sample(d)
    }
}

/// Per-phase duration distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseDurations {
    pub outside_start: DurationDist,
    pub intubation: DurationDist,
    pub reinsertion_outside: DurationDist,
    pub reinsertion_intubation: DurationDist,
    pub ileum: DurationDist,
    pub cecum: DurationDist,
    pub withdrawal: DurationDist,
    pub retroflexion: DurationDist,
    pub outside_end: DurationDist,
}

impl Default for PhaseDurations {
    fn default() -> Self {
        let d = |mean_frames: f64, sigma_log: f64| DurationDist {
            mean_frames,
            sigma_log,
        };
        Self {
            outside_start: d(30.0, 0.4),
            intubation: d(150.0, 0.5),
            reinsertion_outside: d(25.0, 0.4),
            reinsertion_intubation: d(60.0, 0.5),
            ileum: d(45.0, 0.5),
            cecum: d(60.0, 0.5),
            withdrawal: d(220.0, 0.5),
            retroflexion: d(35.0, 0.5),
            outside_end: d(30.0, 0.4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub feature_dim: usize,
    /// Inclusive frame-count range; total video length is drawn uniformly.
    pub frame_count_range: (usize, usize),
    pub phases: PhaseDurations,
    pub p_ileum: f64,
    pub p_retroflexion: f64,
    pub p_reinsertion: f64,
    /// Probability that a frame is non-informative (blurred).
    pub p_blur: f64,
    pub feature_noise_sigma: f64,
    /// Noise scale multiplier for blurred frames; >1 spreads the blur cloud
    /// into the class clusters, which is what makes random-frame sampling
    /// noticeably worse than key-frame sampling.
    pub blur_noise_scale: f64,
    /// Sigma of the per-video feature offset shared by all frames of a video.
    pub prototype_jitter_sigma: f64,
    /// Scale of the randomly drawn class prototypes.
    pub prototype_scale: f64,
    /// Key-frame threshold: a non-blurred frame is flagged when its noise
    /// norm is <= factor * sigma * sqrt(D).
    pub keyframe_noise_factor: f64,
    /// Expected tool intervals per 1000 withdrawal frames.
    pub tool_rate_per_1k: f64,
    /// Mean tool-interval length in frames.
    pub tool_len_mean: f64,
    pub train_fraction: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            frame_count_range: (300, 800),
            phases: PhaseDurations::default(),
            p_ileum: 0.7,
            p_retroflexion: 0.8,
            p_reinsertion: 0.1,
            p_blur: 0.3,
            feature_noise_sigma: 0.6,
            blur_noise_scale: 4.0,
            prototype_jitter_sigma: 0.5,
            prototype_scale: 1.0,
            keyframe_noise_factor: 1.0,
            tool_rate_per_1k: 6.0,
            tool_len_mean: 12.0,
            train_fraction: 0.8,
            fps: 30.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    ConfigInvalid(String),
    #[error("could not satisfy the temporal pattern after {0} attempts")]
    Unsatisfiable(usize),
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let probs = [
            ("p_ileum", self.p_ileum),
            ("p_retroflexion", self.p_retroflexion),
            ("p_reinsertion", self.p_reinsertion),
            ("p_blur", self.p_blur),
            ("train_fraction", self.train_fraction),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(GeneratorError::ConfigInvalid(format!(
                    "{name} = {p} outside [0, 1]"
                )));
            }
        }
        if self.frame_count_range.0 < 50 {
            return Err(GeneratorError::ConfigInvalid(
                "minimum frame count must be >= 50".into(),
            ));
        }
        if self.frame_count_range.1 < self.frame_count_range.0 {
            return Err(GeneratorError::ConfigInvalid(
                "frame count range is reversed".into(),
            ));
        }
        if self.feature_dim < 2 {
            return Err(GeneratorError::ConfigInvalid(
                "feature_dim must be >= 2".into(),
            ));
        }
        if self.feature_noise_sigma < 0.0
            || self.blur_noise_scale < 0.0
            || self.prototype_jitter_sigma < 0.0
            || self.prototype_scale <= 0.0
        {
            return Err(GeneratorError::ConfigInvalid(
                "noise/scale parameters must be nonnegative (prototype_scale > 0)".into(),
            ));
        }
        if self.tool_rate_per_1k < 0.0 || self.tool_len_mean < 1.0 {
            return Err(GeneratorError::ConfigInvalid(
                "tool interval parameters out of range".into(),
            ));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(GeneratorError::ConfigInvalid("fps must be positive".into()));
        }
        Ok(())
    }
}

/// One mean feature vector per (tool, segment, inout) class combination plus
/// a shared prototype for non-informative frames.
#[derive(Debug, Clone)]
pub struct ClassPrototypeBank {
    prototypes: Vec<Array1<f64>>,
    uninformative: Array1<f64>,
    min_separation: f64,
}

const TOOL_CLASSES: usize = 2;
const SEGMENT_CLASSES: usize = 4;
const INOUT_CLASSES: usize = 2;
const BANK_STREAM: u64 = u64::MAX;

impl ClassPrototypeBank {
    /// Deterministic in `cfg.seed`; every video of a corpus shares one bank.
    pub fn from_config(cfg: &GeneratorConfig) -> Result<Self, GeneratorError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, BANK_STREAM));
        let n = TOOL_CLASSES * SEGMENT_CLASSES * INOUT_CLASSES;
        let draw = |rng: &mut ChaCha8Rng| {
            Array1::from_iter(
                (0..cfg.feature_dim).map(|_| rng.sample::<f64, _>(StandardNormal) * cfg.prototype_scale),
            )
        };
        let mut prototypes: Vec<Array1<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
        let mut uninformative = draw(&mut rng);

        let mut min_dist = f64::INFINITY;
        let mut all: Vec<&Array1<f64>> = prototypes.iter().collect();
        all.push(&uninformative);
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                let d = (&*all[i] - &*all[j]).mapv(|v| v * v).sum().sqrt();
                min_dist = min_dist.min(d);
            }
        }
        drop(all);
        if min_dist <= 0.0 {
            return Err(GeneratorError::ConfigInvalid(
                "degenerate prototype bank (coincident prototypes)".into(),
            ));
        }
        // Separability guarantee: pairwise distances must exceed 4x the noise
        // sigma. Rescale deterministically if the random draw is too tight.
        let required = 4.0 * cfg.feature_noise_sigma;
        if min_dist <= required && required > 0.0 {
            let factor = required / min_dist * 1.01;
            for p in prototypes.iter_mut() {
                *p *= factor;
            }
            uninformative *= factor;
            min_dist *= factor;
        }
        Ok(Self {
            prototypes,
            uninformative,
            min_separation: min_dist,
        })
    }

    pub fn combo_index(tool: usize, segment: usize, inout: usize) -> usize {
        (tool * SEGMENT_CLASSES + segment) * INOUT_CLASSES + inout
    }

    pub fn prototype(&self, tool: usize, segment: usize, inout: usize) -> &Array1<f64> {
        &self.prototypes[Self::combo_index(tool, segment, inout)]
    }

    pub fn uninformative(&self) -> &Array1<f64> {
        &self.uninformative
    }

    pub fn min_separation(&self) -> f64 {
        self.min_separation
    }
}

/// Which consistency rule a generated violation video breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// Video starts inside the body.
    EndsInside,
    /// An outside interval covers the middle frame while both ends stay
    /// outside.
    MiddleOutside,
    /// Tool visible on outside-of-body frames.
    ToolOutside,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    OutsideStart,
    Intubation,
    ReinsertionOutside,
    ReinsertionIntubation,
    Ileum,
    Cecum,
    Withdrawal,
    Retroflexion,
    OutsideEnd,
}

impl Phase {
    fn duration_dist(self, p: &PhaseDurations) -> DurationDist {
        match self {
            Phase::OutsideStart => p.outside_start,
            Phase::Intubation => p.intubation,
            Phase::ReinsertionOutside => p.reinsertion_outside,
            Phase::ReinsertionIntubation => p.reinsertion_intubation,
            Phase::Ileum => p.ileum,
            Phase::Cecum => p.cecum,
            Phase::Withdrawal => p.withdrawal,
            Phase::Retroflexion => p.retroflexion,
            Phase::OutsideEnd => p.outside_end,
        }
    }

    /// (segment class, inout class) carried by frames of this phase.
    fn labels(self) -> (usize, usize) {
        match self {
            Phase::OutsideStart | Phase::ReinsertionOutside | Phase::OutsideEnd => (0, 1),
            Phase::Intubation | Phase::ReinsertionIntubation | Phase::Withdrawal => (0, 0),
            Phase::Ileum => (1, 0),
            Phase::Cecum => (2, 0),
            Phase::Retroflexion => (3, 0),
        }
    }
}

/// Per-frame ground-truth class indices for the three default groups.
#[derive(Debug, Clone)]
struct Script {
    tool: Vec<usize>,
    segment: Vec<usize>,
    inout: Vec<usize>,
}

impl Script {
    fn frames(&self) -> usize {
        self.inout.len()
    }

    fn satisfies_filter_rules(&self) -> bool {
        let t = self.frames();
        if t == 0 {
            return false;
        }
        self.inout[0] == 1
            && self.inout[t - 1] == 1
            && self.inout[t / 2] == 0
            && !self
                .tool
                .iter()
                .zip(self.inout.iter())
                .any(|(&tool, &io)| tool == 1 && io == 1)
    }
}

/// Largest-remainder apportionment of `total` frames proportional to
/// `weights`, with a floor of 2 frames per phase.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = total.saturating_sub(out.iter().sum::<usize>());
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut cursor = 0;
    while remaining > 0 {
        out[order[cursor % order.len()]] += 1;
        cursor += 1;
        remaining -= 1;
    }
    // Floor of 2 frames per phase, stolen from the largest one.
    for i in 0..out.len() {
        while out[i] < 2 {
            let largest = (0..out.len())
                .max_by_key(|&j| out[j])
                .expect("nonempty phases");
            if out[largest] <= 2 {
                break;
            }
            out[largest] -= 1;
            out[i] += 1;
        }
    }
    out
}

fn draw_script(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Script {
    let (t_min, t_max) = cfg.frame_count_range;
    let total = rng.gen_range(t_min..=t_max);

    let mut phases = vec![Phase::OutsideStart, Phase::Intubation];
    if rng.sample(Bernoulli::new(cfg.p_reinsertion).expect("validated")) {
        phases.push(Phase::ReinsertionOutside);
        phases.push(Phase::ReinsertionIntubation);
    }
    if rng.sample(Bernoulli::new(cfg.p_ileum).expect("validated")) {
        phases.push(Phase::Ileum);
    }
    phases.push(Phase::Cecum);
    phases.push(Phase::Withdrawal);
    if rng.sample(Bernoulli::new(cfg.p_retroflexion).expect("validated")) {
        phases.push(Phase::Retroflexion);
    }
    phases.push(Phase::OutsideEnd);

    let weights: Vec<f64> = phases
        .iter()
        .map(|p| p.duration_dist(&cfg.phases).sample(rng).max(1e-6))
        .collect();
    let durations = apportion(total, &weights);

    let mut segment = Vec::with_capacity(total);
    let mut inout = Vec::with_capacity(total);
    let mut withdrawal_range = 0..0;
    let mut at = 0;
    for (phase, dur) in phases.iter().zip(durations.iter()) {
        let (seg, io) = phase.labels();
        if *phase == Phase::Withdrawal {
            withdrawal_range = at..at + dur;
        }
        segment.extend(std::iter::repeat(seg).take(*dur));
        inout.extend(std::iter::repeat(io).take(*dur));
        at += dur;
    }

    // Tool sub-intervals during withdrawal.
    let mut tool = vec![0usize; total];
    let wd_len = withdrawal_range.len();
    if wd_len > 0 && cfg.tool_rate_per_1k > 0.0 {
        let lambda = cfg.tool_rate_per_1k * wd_len as f64 / 1000.0;
        let n = rng.sample(Poisson::new(lambda.max(1e-12)).expect("positive lambda")) as usize;
        let n = n.min(wd_len / 2);
        for _ in 0..n {
            let start = withdrawal_range.start + rng.gen_range(0..wd_len);
            let len = if cfg.tool_len_mean > 1.0 {
                1 + rng
                    .sample(Exp::new(1.0 / (cfg.tool_len_mean - 1.0)).expect("positive rate"))
                    .floor() as usize
            } else {
                1
            };
            for t in start..(start + len).min(withdrawal_range.end) {
                tool[t] = 1;
            }
        }
    }

    Script {
        tool,
        segment,
        inout,
    }
}

fn annotations_from_script(script: &Script, schema: &LabelSchema) -> Vec<SegmentAnnotation> {
    let mut out = Vec::new();
    let tracks: [(&str, &Vec<usize>); 3] = [
        ("tool", &script.tool),
        ("segment", &script.segment),
        ("inout", &script.inout),
    ];
    for (group, track) in tracks {
        let g = schema.group_index(group).expect("default schema group");
        let mut start = 0;
        for t in 1..=track.len() {
            if t == track.len() || track[t] != track[start] {
                out.push(SegmentAnnotation::new(
                    start,
                    t - 1,
                    group,
                    &schema.groups()[g].classes[track[start]],
                ));
                start = t;
            }
        }
    }
    out
}

fn synthesize_record(
    cfg: &GeneratorConfig,
    bank: &ClassPrototypeBank,
    script: &Script,
    seed: u64,
    attempt: u64,
) -> VideoRecord {
    let schema = LabelSchema::default_schema();
    let total = script.frames();
    let d = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * attempt + 1);

    let jitter: Array1<f64> = Array1::from_iter(
        (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * cfg.prototype_jitter_sigma),
    );
    let threshold = cfg.keyframe_noise_factor * cfg.feature_noise_sigma * (d as f64).sqrt();

    let mut features = Array2::<f32>::zeros((total, d));
    let mut flags = vec![false; total];
    for t in 0..total {
        let blurred = rng.sample(Bernoulli::new(cfg.p_blur).expect("validated"));
        let sigma = if blurred {
            cfg.feature_noise_sigma * cfg.blur_noise_scale
        } else {
            cfg.feature_noise_sigma
        };
        let noise: Array1<f64> =
            Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * sigma));
        let base = if blurred {
            bank.uninformative()
        } else {
            bank.prototype(script.tool[t], script.segment[t], script.inout[t])
        };
        let norm = noise.mapv(|v| v * v).sum().sqrt();
        flags[t] = !blurred && norm <= threshold;
        for (j, v) in features.row_mut(t).iter_mut().enumerate() {
            *v = (base[j] + jitter[j] + noise[j]) as f32;
        }
    }

    VideoRecord {
        id: format!("video-{seed:016x}"),
        features,
        annotations: annotations_from_script(script, &schema),
        keyframe_flags: Some(flags),
        provenance: Provenance::Synthetic,
        fps: cfg.fps,
        soft_targets: None,
    }
}

const MAX_SCRIPT_ATTEMPTS: u64 = 64;

fn accepted_script(
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<(Script, u64), GeneratorError> {
    for attempt in 0..MAX_SCRIPT_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * attempt);
        let script = draw_script(cfg, &mut rng);
        if script.satisfies_filter_rules() {
            return Ok((script, attempt));
        }
    }
    Err(GeneratorError::Unsatisfiable(MAX_SCRIPT_ATTEMPTS as usize))
}

/// Generate one video with exhaustive ground truth and key-frame flags.
///
/// Deterministic in `(cfg, seed)`. The ground-truth label sequence always
/// satisfies the temporal consistency rules (outside at both ends, inside at
/// the middle frame, never tool and outside together).
pub fn generate_video(cfg: &GeneratorConfig, seed: u64) -> Result<VideoRecord, GeneratorError> {
    let bank = ClassPrototypeBank::from_config(cfg)?;
    generate_video_with_bank(cfg, &bank, seed)
}

/// Same as [`generate_video`] but reusing a prepared prototype bank, which is
/// how corpus generation avoids rebuilding it per video.
pub fn generate_video_with_bank(
    cfg: &GeneratorConfig,
    bank: &ClassPrototypeBank,
    seed: u64,
) -> Result<VideoRecord, GeneratorError> {
    let (script, attempt) = accepted_script(cfg, seed)?;
    Ok(synthesize_record(cfg, bank, &script, seed, attempt))
}

/// Generate a corpus with a reproducible train/test split.
pub fn generate_corpus(
    cfg: &GeneratorConfig,
    n_videos: usize,
    seed: u64,
) -> Result<Corpus, GeneratorError> {
    if n_videos < 2 {
        return Err(GeneratorError::ConfigInvalid(
            "corpus needs at least 2 videos".into(),
        ));
    }
    let bank = ClassPrototypeBank::from_config(cfg)?;
    let results = par::map_range(n_videos, |i| {
        generate_video_with_bank(cfg, &bank, derive_seed(seed, i as u64)).map(|mut rec| {
            rec.id = format!("v{i:04}");
            rec
        })
    });
    let mut corpus = Corpus::new(LabelSchema::default_schema());
    for r in results {
        corpus.records.push(r?);
    }
    let n_train = (n_videos as f64 * cfg.train_fraction).round() as usize;
    for (i, rec) in corpus.records.iter().enumerate() {
        let split = if i < n_train { Split::Train } else { Split::Test };
        corpus.splits.insert(rec.id.clone(), split);
    }
    Ok(corpus)
}

/// Generate a video whose ground truth violates exactly one consistency rule.
pub fn generate_filter_violations(
    cfg: &GeneratorConfig,
    seed: u64,
    kind: ViolationKind,
) -> Result<VideoRecord, GeneratorError> {
    // Reinsertion could add a second rule break; disable it for violations.
    let mut cfg = cfg.clone();
    cfg.p_reinsertion = 0.0;
    let bank = ClassPrototypeBank::from_config(&cfg)?;
    let (mut script, attempt) = accepted_script(&cfg, seed)?;
    let total = script.frames();
    match kind {
        ViolationKind::EndsInside => {
            // Relabel the initial outside run as inside.
            let mut t = 0;
            while t < total && script.inout[t] == 1 {
                script.inout[t] = 0;
                t += 1;
            }
        }
        ViolationKind::MiddleOutside => {
            let mid = total / 2;
            let half = 15.min(mid.saturating_sub(1)).min(total - mid - 2);
            for t in mid - half..=mid + half {
                script.inout[t] = 1;
                script.segment[t] = 0;
                script.tool[t] = 0;
            }
        }
        ViolationKind::ToolOutside => {
            let mut t = 0;
            while t < total && script.inout[t] == 1 && t < 5 {
                script.tool[t] = 1;
                t += 1;
            }
        }
    }
    let mut rec = synthesize_record(&cfg, &bank, &script, seed, attempt);
    rec.id = format!("violation-{seed:016x}");
    Ok(rec)
}
