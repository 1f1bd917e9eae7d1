//! Shared detection data model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CuratorError, Result};
use crate::geometry::BoundingBox;

/// One scored, categorised box on one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u32,
    pub score: f64,
    pub bbox: BoundingBox,
}

impl Detection {
    pub fn new(image_id: u64, category_id: u32, score: f64, bbox: BoundingBox) -> Self {
        Self {
            image_id,
            category_id,
            score,
            bbox,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(CuratorError::InvalidInput(format!(
                "score {} outside [0, 1] on image {}",
                self.score, self.image_id
            )));
        }
        if !self.bbox.is_valid() {
            return Err(CuratorError::InvalidInput(format!(
                "malformed box on image {}",
                self.image_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAnnotation {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BoundingBox,
}

/// Accepted pseudo annotations for one image together with the image's
/// mean-confidence score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePseudoLabels {
    pub image_id: u64,
    pub detections: Vec<Detection>,
    pub uncertainty_score: f64,
}

impl ImagePseudoLabels {
    /// Builds the record and fills in the mean-confidence score.
    pub fn new(image_id: u64, detections: Vec<Detection>) -> Self {
        debug_assert!(detections.iter().all(|d| d.image_id == image_id));
        let uncertainty_score = mean_score(&detections);
        Self {
            image_id,
            detections,
            uncertainty_score,
        }
    }

    pub fn empty(image_id: u64) -> Self {
        Self::new(image_id, Vec::new())
    }
}

/// Arithmetic mean of detection scores, 0 for an empty list.
pub(crate) fn mean_score(detections: &[Detection]) -> f64 {
    if detections.is_empty() {
        return 0.0;
    }
    detections.iter().map(|d| d.score).sum::<f64>() / detections.len() as f64
}

/// Groups detections by image id, preserving input order inside each image.
pub fn group_by_image(detections: &[Detection]) -> BTreeMap<u64, Vec<Detection>> {
    let mut out: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        out.entry(d.image_id).or_default().push(*d);
    }
    out
}

pub fn group_gt_by_image(gt: &[GroundTruthAnnotation]) -> BTreeMap<u64, Vec<GroundTruthAnnotation>> {
    let mut out: BTreeMap<u64, Vec<GroundTruthAnnotation>> = BTreeMap::new();
    for g in gt {
        out.entry(g.image_id).or_default().push(*g);
    }
    out
}

/// Flattens per-image labels back into one detection list ordered by image.
pub fn flatten_labels(labels: &[ImagePseudoLabels]) -> Vec<Detection> {
    labels.iter().flat_map(|l| l.detections.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image_id: u64, score: f64) -> Detection {
        Detection::new(image_id, 1, score, BoundingBox::new(0.0, 0.0, 1.0, 1.0))
    }

    #[test]
    fn uncertainty_is_mean() {
        let l = ImagePseudoLabels::new(3, vec![det(3, 0.9), det(3, 0.5), det(3, 0.7)]);
        assert!((l.uncertainty_score - 0.7).abs() < 1e-15);
        assert_eq!(ImagePseudoLabels::empty(3).uncertainty_score, 0.0);
    }

    #[test]
    fn validation() {
        assert!(det(1, 0.5).validate().is_ok());
        assert!(det(1, 1.5).validate().is_err());
        assert!(det(1, f64::NAN).validate().is_err());
    }

    #[test]
    fn grouping_keeps_order() {
        let g = group_by_image(&[det(2, 0.1), det(1, 0.2), det(2, 0.3)]);
        assert_eq!(g.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(g[&2][1].score, 0.3);
    }
}
