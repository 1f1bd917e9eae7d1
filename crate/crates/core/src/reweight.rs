//! Region-level re-weighting of background RoIs.
//!
//! A negative RoI gets the weight
//!
//! ```text
//! w = (a + (1 - a) * exp(-b * exp(-c1 * iou_max))) * exp(-b * exp(-c2 * D))
//! D = 1 - max_j |cos(f, f_j)| * (1 - iof(roi, positive_j))
//! ```
//!
//! where `iou_max` is the largest IoU with any positive RoI of the same image
//! and the max in `D` runs over those positives. Background RoIs that look like
//! a labelled object but do not overlap it (likely missing annotations) end up
//! near zero. Positive RoIs always keep weight 1.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{CuratorError, Result};
use crate::geometry::{iof, iou, BoundingBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiFeatureRecord {
    pub roi_id: u64,
    pub image_id: u64,
    pub bbox: BoundingBox,
    pub is_positive: bool,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReweightConfig {
    /// Weight floor of the overlap term.
    pub a: f64,
    pub b: f64,
    /// Overlap steepness.
    pub c1: f64,
    /// Similarity steepness.
    pub c2: f64,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            a: 0.25,
            b: 50.0,
            c1: 20.0,
            c2: 20.0,
        }
    }
}

impl ReweightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.a) {
            return Err(CuratorError::InvalidInput(format!(
                "a = {} outside [0, 1]",
                self.a
            )));
        }
        for (name, v) in [("b", self.b), ("c1", self.c1), ("c2", self.c2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CuratorError::InvalidInput(format!(
                    "{name} = {v} must be positive"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiWeightRow {
    pub roi_id: u64,
    pub image_id: u64,
    pub iou_max: f64,
    #[serde(rename = "D")]
    pub similarity_uncertainty: f64,
    pub weight: f64,
}

/// Per-RoI weights ordered by `(image_id, roi_id)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoiWeightTable {
    pub rows: Vec<RoiWeightRow>,
}

/// Gompertz weight of the overlap term, using `c1` as the steepness.
pub fn overlap_weight(iou_max: f64, cfg: &ReweightConfig) -> f64 {
    cfg.a + (1.0 - cfg.a) * gompertz(iou_max, cfg.b, cfg.c1)
}

/// Similarity factor `exp(-b * exp(-c2 * D))`.
pub fn similarity_weight(d: f64, cfg: &ReweightConfig) -> f64 {
    gompertz(d, cfg.b, cfg.c2)
}

fn gompertz(x: f64, b: f64, c: f64) -> f64 {
    (-b * (-c * x).exp()).exp()
}

/// Combined weight: overlap term times similarity term.
pub fn roi_weight(iou_max: f64, d: f64, cfg: &ReweightConfig) -> f64 {
    (overlap_weight(iou_max, cfg) * similarity_weight(d, cfg)).clamp(0.0, 1.0)
}

/// `|f_i . f_j| / (|f_i| |f_j|)`, or 0 if either vector is zero.
pub fn abs_cosine(fi: &[f64], fj: &[f64]) -> Result<f64> {
    if fi.len() != fj.len() {
        return Err(CuratorError::DimensionMismatch {
            expected: fi.len(),
            found: fj.len(),
        });
    }
    let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
    for (a, b) in fi.iter().zip(fj) {
        dot += a * b;
        ni += a * a;
        nj += b * b;
    }
    if ni <= 0.0 || nj <= 0.0 {
        return Ok(0.0);
    }
    Ok((dot.abs() / (ni.sqrt() * nj.sqrt())).clamp(0.0, 1.0))
}

/// `1 - max_j abs_cosine(f, f_j) * (1 - iof(roi, positive_j))`; 1 if there are
/// no positives.
pub fn similarity_uncertainty(roi: &RoiFeatureRecord, positives: &[RoiFeatureRecord]) -> Result<f64> {
    similarity_uncertainty_features(
        &roi.bbox,
        &roi.feature,
        positives.iter().map(|p| (&p.bbox, p.feature.as_slice())),
    )
}

fn similarity_uncertainty_features<'a>(
    bbox: &BoundingBox,
    feature: &[f64],
    positives: impl IntoIterator<Item = (&'a BoundingBox, &'a [f64])>,
) -> Result<f64> {
    let mut best: f64 = 0.0;
    for (pb, pf) in positives {
        let d = abs_cosine(feature, pf)?;
        best = best.max(d * (1.0 - iof(bbox, pb)));
    }
    Ok((1.0 - best).clamp(0.0, 1.0))
}

/// Builds the weight table from raw features.
pub fn build_weight_table(rois: &[RoiFeatureRecord], cfg: &ReweightConfig) -> Result<RoiWeightTable> {
    build_weight_table_with(rois, cfg, None)
}

/// Builds the weight table, optionally measuring similarity in a learned
/// embedding space instead of on raw features.
///
/// Positive RoIs are reported with `iou_max = 1`, `D = 1` and weight 1.
pub fn build_weight_table_with(
    rois: &[RoiFeatureRecord],
    cfg: &ReweightConfig,
    embedding: Option<&EmbeddingMatrix>,
) -> Result<RoiWeightTable> {
    cfg.validate()?;
    if let Some(first) = rois.first() {
        let dim = first.feature.len();
        if let Some(bad) = rois.iter().find(|r| r.feature.len() != dim) {
            return Err(CuratorError::DimensionMismatch {
                expected: dim,
                found: bad.feature.len(),
            });
        }
        if let Some(w) = embedding {
            if w.cols() != dim {
                return Err(CuratorError::DimensionMismatch {
                    expected: w.cols(),
                    found: dim,
                });
            }
        }
    }

    let mut by_image: BTreeMap<u64, Vec<&RoiFeatureRecord>> = BTreeMap::new();
    for r in rois {
        by_image.entry(r.image_id).or_default().push(r);
    }
    for (image_id, group) in &by_image {
        let mut ids = BTreeSet::new();
        for r in group {
            if !ids.insert(r.roi_id) {
                return Err(CuratorError::DuplicateRoi {
                    image_id: *image_id,
                    roi_id: r.roi_id,
                });
            }
        }
    }

    let per_image: Vec<Vec<RoiWeightRow>> = by_image
        .into_par_iter()
        .map(|(_, mut group)| {
            group.sort_by_key(|r| r.roi_id);
            image_weights(&group, cfg, embedding)
        })
        .collect::<Result<_>>()?;
    Ok(RoiWeightTable {
        rows: per_image.into_iter().flatten().collect(),
    })
}

fn image_weights(
    group: &[&RoiFeatureRecord],
    cfg: &ReweightConfig,
    embedding: Option<&EmbeddingMatrix>,
) -> Result<Vec<RoiWeightRow>> {
    let features: Vec<Vec<f64>> = match embedding {
        Some(w) => group.iter().map(|r| w.embed(&r.feature)).collect::<Result<_>>()?,
        None => group.iter().map(|r| r.feature.clone()).collect(),
    };
    let positives: Vec<usize> = (0..group.len()).filter(|&i| group[i].is_positive).collect();

    group
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.is_positive {
                return Ok(RoiWeightRow {
                    roi_id: r.roi_id,
                    image_id: r.image_id,
                    iou_max: 1.0,
                    similarity_uncertainty: 1.0,
                    weight: 1.0,
                });
            }
            let iou_max = positives
                .iter()
                .map(|&j| iou(&r.bbox, &group[j].bbox))
                .fold(0.0, f64::max);
            let d = similarity_uncertainty_features(
                &r.bbox,
                &features[i],
                positives
                    .iter()
                    .map(|&j| (&group[j].bbox, features[j].as_slice())),
            )?;
            Ok(RoiWeightRow {
                roi_id: r.roi_id,
                image_id: r.image_id,
                iou_max,
                similarity_uncertainty: d,
                weight: roi_weight(iou_max, d, cfg),
            })
        })
        .collect()
}
