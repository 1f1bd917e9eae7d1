//! Per-image recall/precision difficulty diagnostic and a plain AP@IoU metric.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::iou;
use crate::model::{group_gt_by_image, Detection, GroundTruthAnnotation};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub recall: f64,
    pub precision: f64,
    pub matched: usize,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
}

/// Greedy matching of predictions to ground truth on one image.
///
/// Predictions are visited by descending score (ties by input index); each
/// takes the unmatched same-category ground-truth box of highest IoU, if that
/// IoU reaches the threshold. Returns `(prediction_index, gt_index)` pairs.
pub fn match_predictions(
    predictions: &[Detection],
    gt: &[GroundTruthAnnotation],
    iou_threshold: f64,
) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .score
            .total_cmp(&predictions[a].score)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gt.len()];
    let mut out = Vec::new();
    for p in order {
        let pred = &predictions[p];
        let mut best: Option<(f64, usize)> = None;
        for (g, ann) in gt.iter().enumerate() {
            if taken[g] || ann.category_id != pred.category_id {
                continue;
            }
            let v = iou(&pred.bbox, &ann.bbox);
            if v >= iou_threshold && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, g));
            }
        }
        if let Some((_, g)) = best {
            taken[g] = true;
            out.push((p, g));
        }
    }
    out
}

/// Recall and precision of one image's pseudo labels. Empty ground truth
/// gives recall 1; no predictions gives precision 1.
pub fn image_pr(
    predictions: &[Detection],
    gt: &[GroundTruthAnnotation],
    iou_threshold: f64,
) -> PrecisionRecall {
    let matched = match_predictions(predictions, gt, iou_threshold).len();
    let recall = if gt.is_empty() {
        1.0
    } else {
        matched as f64 / gt.len() as f64
    };
    let precision = if predictions.is_empty() {
        1.0
    } else {
        matched as f64 / predictions.len() as f64
    };
    PrecisionRecall {
        recall,
        precision,
        matched,
        num_predictions: predictions.len(),
        num_ground_truth: gt.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDifficultyReport {
    pub image_id: u64,
    pub recall: f64,
    pub precision: f64,
    pub is_easy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDifficultySummary {
    pub easy_fraction: f64,
    pub reports: Vec<ImageDifficultyReport>,
}

/// An image is easy when its correct content outweighs its noise:
/// `recall + margin >= 1 - precision`. The boundary counts as easy.
pub fn is_easy(recall: f64, precision: f64, margin: f64) -> bool {
    recall + margin >= 1.0 - precision
}

pub fn classify_difficulty(per_image: &[(u64, PrecisionRecall)], margin: f64) -> DatasetDifficultySummary {
    let reports: Vec<ImageDifficultyReport> = per_image
        .iter()
        .map(|(image_id, pr)| ImageDifficultyReport {
            image_id: *image_id,
            recall: pr.recall,
            precision: pr.precision,
            is_easy: is_easy(pr.recall, pr.precision, margin),
        })
        .collect();
    let easy = reports.iter().filter(|r| r.is_easy).count();
    let easy_fraction = if reports.is_empty() {
        0.0
    } else {
        easy as f64 / reports.len() as f64
    };
    DatasetDifficultySummary {
        easy_fraction,
        reports,
    }
}

/// Runs [`image_pr`] over every image id in `image_ids` and classifies them.
pub fn difficulty_report(
    predictions: &[Detection],
    gt: &[GroundTruthAnnotation],
    image_ids: impl IntoIterator<Item = u64>,
    iou_threshold: f64,
    margin: f64,
) -> DatasetDifficultySummary {
    let preds = crate::model::group_by_image(predictions);
    let gts = group_gt_by_image(gt);
    let per_image: Vec<(u64, PrecisionRecall)> = image_ids
        .into_iter()
        .map(|id| {
            let p = preds.get(&id).map(Vec::as_slice).unwrap_or(&[]);
            let g = gts.get(&id).map(Vec::as_slice).unwrap_or(&[]);
            (id, image_pr(p, g, iou_threshold))
        })
        .collect();
    classify_difficulty(&per_image, margin)
}

/// All-points interpolated average precision for one category.
///
/// Predictions across all images are ranked by score (ties by input order)
/// and matched greedily, per image, to the best unmatched ground truth.
/// Returns `None` when the category has no ground truth.
pub fn average_precision(
    predictions: &[Detection],
    gt: &[GroundTruthAnnotation],
    category: u32,
    iou_threshold: f64,
) -> Option<f64> {
    let mut gts: BTreeMap<u64, Vec<&GroundTruthAnnotation>> = BTreeMap::new();
    for g in gt.iter().filter(|g| g.category_id == category) {
        gts.entry(g.image_id).or_default().push(g);
    }
    let total_gt: usize = gts.values().map(Vec::len).sum();
    if total_gt == 0 {
        return None;
    }
    let mut taken: BTreeMap<u64, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();

    let mut ranked: Vec<(usize, &Detection)> = predictions
        .iter()
        .enumerate()
        .filter(|(_, d)| d.category_id == category)
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));

    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (rank, (_, d)) in ranked.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        if let Some(cands) = gts.get(&d.image_id) {
            let used = &taken[&d.image_id];
            for (g, ann) in cands.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = iou(&d.bbox, &ann.bbox);
                if v >= iou_threshold && best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, g));
                }
            }
        }
        if let Some((_, g)) = best {
            taken.get_mut(&d.image_id).expect("image has gt")[g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    Some(interpolated_area(&curve))
}

/// Area under the precision envelope of `(recall, precision)` points given in
/// rank order.
fn interpolated_area(curve: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (i, (r, _)) in curve.iter().enumerate() {
        if *r > prev_recall {
            area += (r - prev_recall) * envelope[i];
            prev_recall = *r;
        }
    }
    area
}

/// Mean AP over the categories that have ground truth.
pub fn mean_average_precision(
    predictions: &[Detection],
    gt: &[GroundTruthAnnotation],
    iou_threshold: f64,
) -> Option<f64> {
    let mut categories: Vec<u32> = gt.iter().map(|g| g.category_id).collect();
    categories.sort_unstable();
    categories.dedup();
    let aps: Vec<f64> = categories
        .iter()
        .filter_map(|&c| average_precision(predictions, gt, c, iou_threshold))
        .collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;

    fn pred(image_id: u64, score: f64, b: [f64; 4]) -> Detection {
        Detection::new(image_id, 0, score, BoundingBox::new(b[0], b[1], b[2], b[3]))
    }

    fn gt(image_id: u64, b: [f64; 4]) -> GroundTruthAnnotation {
        GroundTruthAnnotation {
            image_id,
            category_id: 0,
            bbox: BoundingBox::new(b[0], b[1], b[2], b[3]),
        }
    }

    #[test]
    fn pr_conventions() {
        let g = [gt(1, [0., 0., 10., 10.])];
        let perfect = image_pr(&[pred(1, 0.9, [0., 0., 10., 10.])], &g, 0.5);
        assert_eq!((perfect.recall, perfect.precision), (1.0, 1.0));
        let none = image_pr(&[], &g, 0.5);
        assert_eq!((none.recall, none.precision), (0.0, 1.0));
        let no_gt = image_pr(&[pred(1, 0.9, [0., 0., 1., 1.])], &[], 0.5);
        assert_eq!((no_gt.recall, no_gt.precision), (1.0, 0.0));
    }

    #[test]
    fn pr_with_one_hit() {
        let g = [gt(1, [0., 0., 10., 10.]), gt(1, [50., 50., 60., 60.])];
        let p = [
            pred(1, 0.9, [0., 0., 10., 11.]),
            pred(1, 0.8, [20., 20., 30., 30.]),
            pred(1, 0.7, [52., 58., 62., 68.]),
        ];
        let r = image_pr(&p, &g, 0.5);
        assert_eq!(r.recall, 0.5);
        assert!((r.precision - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn difficulty_boundaries() {
        let mk = |r: f64, p: f64| PrecisionRecall {
            recall: r,
            precision: p,
            matched: 0,
            num_predictions: 0,
            num_ground_truth: 0,
        };
        let s = classify_difficulty(&[(1, mk(1.0, 1.0)), (2, mk(0.0, 0.0)), (3, mk(0.5, 0.5))], 0.0);
        assert_eq!(
            s.reports.iter().map(|r| r.is_easy).collect::<Vec<_>>(),
            vec![true, false, true]
        );
        assert!((s.easy_fraction - 2.0 / 3.0).abs() < 1e-15);
        assert!(classify_difficulty(&[(2, mk(0.0, 0.0))], 1.0).reports[0].is_easy);
        assert_eq!(classify_difficulty(&[], 0.0).easy_fraction, 0.0);
    }

    #[test]
    fn ap_fixtures() {
        let g = [gt(1, [0., 0., 10., 10.]), gt(2, [0., 0., 10., 10.])];
        let all_right = [pred(1, 0.9, [0., 0., 10., 10.]), pred(2, 0.8, [0., 0., 10., 10.])];
        assert_eq!(average_precision(&all_right, &g, 0, 0.5), Some(1.0));
        let all_wrong = [
            pred(1, 0.9, [50., 0., 60., 10.]),
            pred(2, 0.8, [50., 0., 60., 10.]),
        ];
        assert_eq!(average_precision(&all_wrong, &g, 0, 0.5), Some(0.0));
        let one = [gt(1, [0., 0., 10., 10.])];
        let ranked = [
            pred(1, 0.9, [50., 0., 60., 10.]),
            pred(1, 0.5, [0., 0., 10., 10.]),
        ];
        assert_eq!(average_precision(&ranked, &one, 0, 0.5), Some(0.5));
        assert_eq!(average_precision(&ranked, &one, 3, 0.5), None);
        assert_eq!(mean_average_precision(&ranked, &one, 0.5), Some(0.5));
    }

    #[test]
    fn ap_uses_envelope() {
        // ranks: TP, FP, TP over 2 gt -> points (0.5,1), (0.5,0.5), (1,2/3)
        let g = [gt(1, [0., 0., 10., 10.]), gt(1, [20., 0., 30., 10.])];
        let p = [
            pred(1, 0.9, [0., 0., 10., 10.]),
            pred(1, 0.8, [50., 0., 60., 10.]),
            pred(1, 0.7, [20., 0., 30., 10.]),
        ];
        let ap = average_precision(&p, &g, 0, 0.5).unwrap();
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn duplicate_prediction_never_helps() {
        let g = [gt(1, [0., 0., 10., 10.]), gt(1, [20., 0., 30., 10.])];
        let p = vec![pred(1, 0.9, [0., 0., 10., 10.])];
        let base = image_pr(&p, &g, 0.5);
        let mut dup = p.clone();
        dup.push(p[0]);
        let more = image_pr(&dup, &g, 0.5);
        assert!(more.recall <= base.recall);
        assert!(more.precision <= base.precision);
    }
}
