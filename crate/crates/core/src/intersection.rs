//! Consensus of pseudo labels across several models.
//!
//! Two label sets are intersected by greedy one-to-one matching: candidate
//! pairs of the same category with IoU at or above the threshold are taken in
//! descending IoU order. Each match keeps the higher-scoring member's box; the
//! combined score is configurable. Unmatched detections are dropped.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CuratorError, Result};
use crate::geometry::iou;
use crate::model::{Detection, ImagePseudoLabels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreCombine {
    #[default]
    Min,
    GeometricMean,
}

impl ScoreCombine {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ScoreCombine::Min => a.min(b),
            ScoreCombine::GeometricMean => (a * b).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntersectionConfig {
    pub match_iou_threshold: f64,
    pub score_combine: ScoreCombine,
}

impl Default for IntersectionConfig {
    fn default() -> Self {
        Self {
            match_iou_threshold: 0.5,
            score_combine: ScoreCombine::Min,
        }
    }
}

impl IntersectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.match_iou_threshold > 0.0 && self.match_iou_threshold <= 1.0) {
            return Err(CuratorError::InvalidInput(format!(
                "match IoU threshold {} outside (0, 1]",
                self.match_iou_threshold
            )));
        }
        Ok(())
    }
}

/// Greedy matching between two detection lists. Returns `(index_a, index_b)`
/// pairs in the order they were accepted.
pub fn greedy_match(a: &[Detection], b: &[Detection], iou_threshold: f64) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, da) in a.iter().enumerate() {
        for (j, db) in b.iter().enumerate() {
            if da.category_id != db.category_id {
                continue;
            }
            let v = iou(&da.bbox, &db.bbox);
            if v >= iou_threshold {
                candidates.push((v, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out
}

fn canonical_order(dets: &mut [Detection]) {
    dets.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then(x.category_id.cmp(&y.category_id))
            .then(x.bbox.total_cmp(&y.bbox))
    });
}

/// Consensus of two label sets for the same image.
///
/// The result is ordered by descending score, then category, then box.
pub fn intersect_two(
    a: &ImagePseudoLabels,
    b: &ImagePseudoLabels,
    cfg: &IntersectionConfig,
) -> Result<ImagePseudoLabels> {
    cfg.validate()?;
    if a.image_id != b.image_id {
        return Err(CuratorError::InvalidInput(format!(
            "cannot intersect labels of image {} with image {}",
            a.image_id, b.image_id
        )));
    }
    let mut kept: Vec<Detection> = greedy_match(&a.detections, &b.detections, cfg.match_iou_threshold)
        .into_iter()
        .map(|(i, j)| {
            let (da, db) = (&a.detections[i], &b.detections[j]);
            let bbox = if db.score > da.score { db.bbox } else { da.bbox };
            Detection::new(
                a.image_id,
                da.category_id,
                cfg.score_combine.apply(da.score, db.score),
                bbox,
            )
        })
        .collect();
    canonical_order(&mut kept);
    Ok(ImagePseudoLabels::new(a.image_id, kept))
}

/// Left fold of [`intersect_two`] over models in the given order. All models
/// must cover the same image ids. Output is ordered by image id.
pub fn intersect_all(
    model_outputs: &[Vec<ImagePseudoLabels>],
    cfg: &IntersectionConfig,
) -> Result<Vec<ImagePseudoLabels>> {
    cfg.validate()?;
    let Some(first) = model_outputs.first() else {
        return Err(CuratorError::InvalidInput(
            "intersection needs at least one model output".into(),
        ));
    };
    let mut sorted: Vec<Vec<&ImagePseudoLabels>> = Vec::with_capacity(model_outputs.len());
    let reference: BTreeSet<u64> = first.iter().map(|l| l.image_id).collect();
    for (m, out) in model_outputs.iter().enumerate() {
        let ids: BTreeSet<u64> = out.iter().map(|l| l.image_id).collect();
        if ids.len() != out.len() {
            return Err(CuratorError::InvalidInput(format!(
                "model {m} lists an image more than once"
            )));
        }
        if ids != reference {
            return Err(CuratorError::ImageIdMismatch {
                context: format!("model {m} versus model 0"),
                missing: reference.difference(&ids).copied().collect(),
                extra: ids.difference(&reference).copied().collect(),
            });
        }
        let mut v: Vec<&ImagePseudoLabels> = out.iter().collect();
        v.sort_by_key(|l| l.image_id);
        sorted.push(v);
    }
    if model_outputs.len() == 1 {
        let mut out = first.clone();
        out.sort_by_key(|l| l.image_id);
        return Ok(out);
    }
    (0..reference.len())
        .into_par_iter()
        .map(|idx| {
            let mut acc = sorted[0][idx].clone();
            for model in &sorted[1..] {
                acc = intersect_two(&acc, model[idx], cfg)?;
            }
            Ok(acc)
        })
        .collect()
}
