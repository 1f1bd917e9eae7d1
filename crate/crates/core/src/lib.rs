//! Curriculum pseudo-label curation for semi-supervised object detection.
//!
//! The building blocks are plain functions over [`Detection`] lists:
//! confidence thresholds and easy-image selection ([`pseudo_labels`]),
//! multi-model agreement ([`intersection`]), per-RoI loss weights
//! ([`reweight`], [`embed`]), weighted boxes fusion ([`wbf`]) and
//! precision/recall bookkeeping ([`evaluation`]). [`pipeline`] drives the
//! multi-phase loop on disk, [`synth`] makes reproducible toy data.

pub mod cli;
pub mod embed;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod intersection;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod pseudo_labels;
pub mod reweight;
pub mod synth;
pub mod wbf;

pub use error::{CuratorError, Result};
pub use geometry::{iof, iou, BoundingBox};
pub use model::{Detection, GroundTruthAnnotation, ImagePseudoLabels};
