//! Weighted boxes fusion across models.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CuratorError, Result};
use crate::geometry::{iou, BoundingBox};
use crate::model::{group_by_image, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    /// Multiply the fused score by `min(members, T) / T`.
    #[default]
    CountOverModels,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WbfConfig {
    pub cluster_iou_threshold: f64,
    /// One weight per model; empty means all 1.
    pub model_weights: Vec<f64>,
    pub rescale_mode: RescaleMode,
}

impl Default for WbfConfig {
    fn default() -> Self {
        Self {
            cluster_iou_threshold: 0.55,
            model_weights: Vec::new(),
            rescale_mode: RescaleMode::CountOverModels,
        }
    }
}

impl WbfConfig {
    fn weights(&self, num_models: usize) -> Result<Vec<f64>> {
        if !(self.cluster_iou_threshold > 0.0 && self.cluster_iou_threshold <= 1.0) {
            return Err(CuratorError::InvalidInput(format!(
                "cluster IoU threshold {} outside (0, 1]",
                self.cluster_iou_threshold
            )));
        }
        if self.model_weights.is_empty() {
            return Ok(vec![1.0; num_models]);
        }
        if self.model_weights.len() != num_models {
            return Err(CuratorError::InvalidInput(format!(
                "{} model weights given for {num_models} models",
                self.model_weights.len()
            )));
        }
        if let Some(w) = self.model_weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(CuratorError::InvalidInput(format!(
                "model weight {w} must be positive"
            )));
        }
        Ok(self.model_weights.clone())
    }
}

#[derive(Clone, Copy)]
struct Member {
    bbox: BoundingBox,
    score: f64,
    weight: f64,
}

struct Cluster {
    members: Vec<Member>,
    fused: BoundingBox,
}

impl Cluster {
    fn new(m: Member) -> Self {
        Self {
            members: vec![m],
            fused: m.bbox,
        }
    }

    fn push(&mut self, m: Member) {
        self.members.push(m);
        self.fused = fused_box(&self.members);
    }
}

/// `(weight * score)`-weighted average of member boxes, falling back to the
/// plain weight average when every score is zero.
fn fused_box(members: &[Member]) -> BoundingBox {
    let mut total: f64 = members.iter().map(|m| m.weight * m.score).sum();
    let use_scores = total > 0.0;
    if !use_scores {
        total = members.iter().map(|m| m.weight).sum();
    }
    let mut acc = [0.0; 4];
    for m in members {
        let w = if use_scores { m.weight * m.score } else { m.weight };
        acc[0] += w * m.bbox.x_min;
        acc[1] += w * m.bbox.y_min;
        acc[2] += w * m.bbox.x_max;
        acc[3] += w * m.bbox.y_max;
    }
    BoundingBox::new(acc[0] / total, acc[1] / total, acc[2] / total, acc[3] / total)
}

fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.category_id.cmp(&b.category_id))
        .then(a.bbox.total_cmp(&b.bbox))
}

/// Fuses the detections of several models on one image.
///
/// Boxes are pooled per category and visited in descending `weight * score`
/// order (ties by coordinates, then score, so the model order never matters).
/// Each joins the first cluster whose running fused box has IoU at or above
/// the threshold, or opens a new one.
pub fn fuse_image(per_model: &[Vec<Detection>], cfg: &WbfConfig) -> Result<Vec<Detection>> {
    if per_model.is_empty() {
        return Err(CuratorError::InvalidInput(
            "fusion needs at least one model".into(),
        ));
    }
    let weights = cfg.weights(per_model.len())?;
    let image_ids: BTreeSet<u64> = per_model.iter().flatten().map(|d| d.image_id).collect();
    if image_ids.len() > 1 {
        return Err(CuratorError::InvalidInput(format!(
            "fuse_image got detections from several images: {image_ids:?}"
        )));
    }
    let Some(&image_id) = image_ids.iter().next() else {
        return Ok(Vec::new());
    };
    let num_models = per_model.len() as f64;

    let mut pooled: BTreeMap<u32, Vec<Member>> = BTreeMap::new();
    for (dets, &weight) in per_model.iter().zip(&weights) {
        for d in dets {
            pooled.entry(d.category_id).or_default().push(Member {
                bbox: d.bbox,
                score: d.score,
                weight,
            });
        }
    }

    let mut out = Vec::new();
    for (category_id, mut members) in pooled {
        members.sort_by(|a, b| {
            (b.weight * b.score)
                .total_cmp(&(a.weight * a.score))
                .then(a.bbox.total_cmp(&b.bbox))
                .then(b.score.total_cmp(&a.score))
                .then(b.weight.total_cmp(&a.weight))
        });
        let mut clusters: Vec<Cluster> = Vec::new();
        for m in members {
            match clusters
                .iter_mut()
                .find(|c| iou(&c.fused, &m.bbox) >= cfg.cluster_iou_threshold)
            {
                Some(c) => c.push(m),
                None => clusters.push(Cluster::new(m)),
            }
        }
        for c in clusters {
            let weight_sum: f64 = c.members.iter().map(|m| m.weight).sum();
            let mut score = c.members.iter().map(|m| m.weight * m.score).sum::<f64>() / weight_sum;
            if cfg.rescale_mode == RescaleMode::CountOverModels {
                score *= (c.members.len() as f64).min(num_models) / num_models;
            }
            out.push(Detection::new(
                image_id,
                category_id,
                score.clamp(0.0, 1.0),
                c.fused,
            ));
        }
    }
    out.sort_by(detection_order);
    Ok(out)
}

/// Applies [`fuse_image`] to every image appearing in any model. A model
/// without detections on an image contributes nothing there. Output is
/// ordered by image id, then descending score.
pub fn fuse_dataset(per_model: &[Vec<Detection>], cfg: &WbfConfig) -> Result<Vec<Detection>> {
    if per_model.is_empty() {
        return Err(CuratorError::InvalidInput(
            "fusion needs at least one model".into(),
        ));
    }
    cfg.weights(per_model.len())?;
    let grouped: Vec<BTreeMap<u64, Vec<Detection>>> = per_model.iter().map(|m| group_by_image(m)).collect();
    let image_ids: BTreeSet<u64> = grouped.iter().flat_map(|g| g.keys().copied()).collect();
    let fused: Vec<Vec<Detection>> = image_ids
        .into_par_iter()
        .map(|id| {
            let models: Vec<Vec<Detection>> = grouped
                .iter()
                .map(|g| g.get(&id).cloned().unwrap_or_default())
                .collect();
            fuse_image(&models, cfg)
        })
        .collect::<Result<_>>()?;
    Ok(fused.into_iter().flatten().collect())
}
