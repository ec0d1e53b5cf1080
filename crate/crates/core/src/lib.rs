//! Multi-label temporal segmentation of procedure-like videos.
//!
//! The crate covers the full pipeline: a synthetic procedure simulator
//! ([`synthgen`]), a per-frame multi-head encoder ([`encoder`]), Gaussian
//! smoothing plus consistency-filtered pseudo-labeling ([`pseudolabel`]),
//! a multi-label multi-stage temporal convolutional network ([`tempnet`]),
//! and stream decoding / balanced-accuracy evaluation ([`parse_eval`]).
//!
//! Data-parallel inner loops (per-video generation, per-video pseudo-label
//! pipelines, multi-seed evaluation runs) run on rayon when the `parallel`
//! feature is enabled (the default) and fall back to sequential iteration
//! otherwise. Results are identical either way.

pub mod ckpt;
pub mod encoder;
pub mod nn;
pub mod par;
pub mod parse_eval;
pub mod pipeline;
pub mod pseudolabel;
pub mod schema;
pub mod store;
pub mod stream;
pub mod synthgen;
pub mod tempnet;

pub use schema::{Corpus, FrameTargets, LabelSchema, Provenance, SoftTargets, VideoRecord};
pub use stream::ProbabilityStream;
