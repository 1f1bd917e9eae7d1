//! Pseudo-label extraction, image confidence scoring and easy-image selection.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CuratorError, Result};
use crate::model::{group_by_image, mean_score, Detection, GroundTruthAnnotation, ImagePseudoLabels};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-category score thresholds with a fallback for unseen categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryThresholds {
    pub per_category: BTreeMap<u32, f64>,
    pub default_threshold: f64,
}

impl Default for CategoryThresholds {
    fn default() -> Self {
        Self::uniform(DEFAULT_THRESHOLD)
    }
}

impl CategoryThresholds {
    pub fn uniform(default_threshold: f64) -> Self {
        Self {
            per_category: BTreeMap::new(),
            default_threshold,
        }
    }

    pub fn threshold(&self, category_id: u32) -> f64 {
        self.per_category
            .get(&category_id)
            .copied()
            .unwrap_or(self.default_threshold)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = std::iter::once(self.default_threshold)
            .chain(self.per_category.values().copied())
            .find(|t| !(0.0..=1.0).contains(t));
        match bad {
            Some(t) => Err(CuratorError::InvalidInput(format!(
                "threshold {t} outside [0, 1]"
            ))),
            None => Ok(()),
        }
    }

    pub fn keeps(&self, d: &Detection) -> bool {
        d.score >= self.threshold(d.category_id)
    }
}

/// Fits per-category thresholds by expected-count matching with the default
/// fallback of [`DEFAULT_THRESHOLD`].
pub fn fit_category_thresholds(
    labeled_gt: &[GroundTruthAnnotation],
    raw_detections: &[Detection],
    num_labeled_images: usize,
    num_unlabeled_images: usize,
) -> Result<CategoryThresholds> {
    fit_category_thresholds_with_default(
        labeled_gt,
        raw_detections,
        num_labeled_images,
        num_unlabeled_images,
        DEFAULT_THRESHOLD,
    )
}

/// For each category `c` the number of detections to keep on the unlabeled
/// set is `round(gt_count(c) / num_labeled * num_unlabeled)` (at least one
/// when `c` occurs in the labeled set). The threshold is the score of the
/// last kept detection, so exactly the top-ranked detections survive
/// `score >= threshold` (modulo score ties). A category with detections but no
/// labeled instances gets a threshold just above its best score.
pub fn fit_category_thresholds_with_default(
    labeled_gt: &[GroundTruthAnnotation],
    raw_detections: &[Detection],
    num_labeled_images: usize,
    num_unlabeled_images: usize,
    default_threshold: f64,
) -> Result<CategoryThresholds> {
    if num_labeled_images == 0 || num_unlabeled_images == 0 {
        return Err(CuratorError::InvalidInput(
            "threshold fitting needs at least one labeled and one unlabeled image".into(),
        ));
    }
    let mut out = CategoryThresholds::uniform(default_threshold);
    out.validate()?;
    if labeled_gt.is_empty() {
        return Ok(out);
    }

    let mut gt_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for g in labeled_gt {
        *gt_counts.entry(g.category_id).or_default() += 1;
    }
    let mut scores: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for d in raw_detections {
        scores.entry(d.category_id).or_default().push(d.score);
    }

    for (category, mut s) in scores {
        s.sort_by(|a, b| b.total_cmp(a));
        let gt = gt_counts.get(&category).copied().unwrap_or(0);
        let target = gt as f64 / num_labeled_images as f64 * num_unlabeled_images as f64;
        let keep = if gt == 0 {
            0
        } else {
            (target.round() as usize).max(1)
        };
        let threshold = if keep == 0 {
            next_up(s[0]).min(1.0)
        } else {
            s[keep.min(s.len()) - 1]
        };
        out.per_category.insert(category, threshold.clamp(0.0, 1.0));
    }
    Ok(out)
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

/// Applies per-category thresholds. Every image id present in the input
/// appears in the output, possibly with no detections. Output is ordered by
/// image id.
pub fn make_pseudo_labels(
    raw_detections: &[Detection],
    thresholds: &CategoryThresholds,
) -> Vec<ImagePseudoLabels> {
    group_by_image(raw_detections)
        .into_par_iter()
        .map(|(image_id, dets)| {
            let kept = dets.into_iter().filter(|d| thresholds.keeps(d)).collect();
            ImagePseudoLabels::new(image_id, kept)
        })
        .collect()
}

/// Like [`make_pseudo_labels`] but over an explicit image universe, so images
/// without any raw detection still get an (empty) entry. Detections on images
/// outside the universe are an error.
pub fn make_pseudo_labels_over(
    raw_detections: &[Detection],
    thresholds: &CategoryThresholds,
    image_ids: &BTreeSet<u64>,
) -> Result<Vec<ImagePseudoLabels>> {
    let mut grouped = group_by_image(raw_detections);
    let extra: Vec<u64> = grouped
        .keys()
        .filter(|id| !image_ids.contains(id))
        .copied()
        .collect();
    if !extra.is_empty() {
        return Err(CuratorError::ImageIdMismatch {
            context: "detections outside the unlabeled image set".into(),
            missing: Vec::new(),
            extra,
        });
    }
    Ok(image_ids
        .iter()
        .map(|&id| {
            let kept = grouped
                .remove(&id)
                .unwrap_or_default()
                .into_iter()
                .filter(|d| thresholds.keeps(d))
                .collect();
            ImagePseudoLabels::new(id, kept)
        })
        .collect())
}

/// Mean detection confidence of one image; 0 when there are no detections.
/// Larger means more certain, hence easier.
pub fn image_uncertainty(labels: &ImagePseudoLabels) -> f64 {
    mean_score(&labels.detections)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Easy images, most confident first.
    pub easy_image_ids: Vec<u64>,
    /// Remaining images in the same ranking order.
    pub difficult_image_ids: Vec<u64>,
    pub fraction_k: f64,
}

/// Number of easy images for fraction `k` of `n`: `ceil(k * n)`.
///
/// A small slack absorbs representation error, so `k = 2/3` on 3 images
/// gives 2 rather than 3.
pub fn easy_count(fraction_k: f64, n: usize) -> usize {
    let raw = fraction_k * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Ranks images by confidence (descending, ties by ascending image id) and
/// takes the first `ceil(k * n)` as easy.
pub fn select_easy(all_labels: &[ImagePseudoLabels], fraction_k: f64) -> Result<SelectionResult> {
    if !(fraction_k > 0.0 && fraction_k <= 1.0) {
        return Err(CuratorError::InvalidInput(format!(
            "easy fraction {fraction_k} outside (0, 1]"
        )));
    }
    select_top(all_labels, easy_count(fraction_k, all_labels.len()), fraction_k)
}

/// Selection with an explicit easy count. Used by the phase scheduler, which
/// computes `ceil(i * n / N)` in integers.
pub fn select_top(
    all_labels: &[ImagePseudoLabels],
    count: usize,
    fraction_k: f64,
) -> Result<SelectionResult> {
    let mut seen = BTreeSet::new();
    for l in all_labels {
        if !seen.insert(l.image_id) {
            return Err(CuratorError::InvalidInput(format!(
                "image {} listed twice",
                l.image_id
            )));
        }
    }
    let mut ranked: Vec<(f64, u64)> = all_labels
        .iter()
        .map(|l| (l.uncertainty_score, l.image_id))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let count = count.min(ranked.len());
    let ids: Vec<u64> = ranked.into_iter().map(|(_, id)| id).collect();
    Ok(SelectionResult {
        easy_image_ids: ids[..count].to_vec(),
        difficult_image_ids: ids[count..].to_vec(),
        fraction_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use proptest::prelude::*;

    fn det(image_id: u64, category_id: u32, score: f64) -> Detection {
        Detection::new(
            image_id,
            category_id,
            score,
            BoundingBox::new(0.0, 0.0, 10.0, 10.0),
        )
    }

    fn gt(image_id: u64, category_id: u32) -> GroundTruthAnnotation {
        GroundTruthAnnotation {
            image_id,
            category_id,
            bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0),
        }
    }

    /// Largest candidate threshold that still keeps at least `keep` detections.
    fn brute_force_threshold(scores: &[f64], keep: usize) -> f64 {
        let mut candidates = scores.to_vec();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        let mut best = candidates[0];
        for &t in &candidates {
            if scores.iter().filter(|&&s| s >= t).count() >= keep {
                best = t;
            }
        }
        best
    }

    #[test]
    fn fit_keeps_one_per_image() {
        let labeled = vec![gt(1, 3), gt(2, 3)];
        let raw = vec![det(10, 3, 0.9), det(10, 3, 0.4)];
        let t = fit_category_thresholds(&labeled, &raw, 2, 1).unwrap();
        let thr = t.threshold(3);
        assert!(thr > 0.4 && thr <= 0.9);
        assert_eq!(thr, brute_force_threshold(&[0.9, 0.4], 1));
        let kept = make_pseudo_labels(&raw, &t);
        assert_eq!(kept[0].detections.len(), 1);
    }

    #[test]
    fn fit_matches_brute_force_on_several_images() {
        // 2 instances per labeled image, 3 unlabeled images -> keep 6
        let labeled = vec![gt(1, 0), gt(1, 0), gt(2, 0), gt(2, 0)];
        let scores = [0.95, 0.2, 0.7, 0.66, 0.31, 0.88, 0.5, 0.12, 0.61, 0.43];
        let raw: Vec<_> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| det(10 + (i % 3) as u64, 0, s))
            .collect();
        let t = fit_category_thresholds(&labeled, &raw, 2, 3).unwrap();
        assert_eq!(t.threshold(0), brute_force_threshold(&scores, 6));
        assert_eq!(raw.iter().filter(|d| t.keeps(d)).count(), 6);
    }

    #[test]
    fn fit_defaults() {
        let t = fit_category_thresholds(&[gt(1, 0)], &[], 1, 1).unwrap();
        assert_eq!(t.threshold(0), DEFAULT_THRESHOLD);
        assert_eq!(t.threshold(7), DEFAULT_THRESHOLD);
        let t = fit_category_thresholds(&[], &[det(5, 2, 0.3)], 1, 1).unwrap();
        assert_eq!(t.threshold(2), DEFAULT_THRESHOLD);
        assert!(fit_category_thresholds(&[], &[], 0, 1).is_err());
    }

    #[test]
    fn category_without_gt_drops_everything() {
        let t = fit_category_thresholds(&[gt(1, 0)], &[det(5, 4, 0.8), det(5, 4, 0.6)], 1, 1).unwrap();
        assert!(t.threshold(4) > 0.8);
        assert!(make_pseudo_labels(&[det(5, 4, 0.8)], &t)[0].detections.is_empty());
    }

    #[test]
    fn pseudo_label_fixtures() {
        let t = CategoryThresholds::uniform(0.5);
        let out = make_pseudo_labels(&[det(1, 1, 0.9), det(1, 1, 0.3)], &t);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].detections.len(), 1);
        assert_eq!(out[0].uncertainty_score, 0.9);

        let out = make_pseudo_labels(&[det(4, 1, 0.2), det(4, 2, 0.1)], &t);
        assert!(out[0].detections.is_empty());
        assert_eq!(out[0].uncertainty_score, 0.0);
    }

    #[test]
    fn mixed_categories_match_naive_filter() {
        let mut t = CategoryThresholds::uniform(0.5);
        t.per_category.insert(1, 0.8);
        t.per_category.insert(2, 0.2);
        let raw = vec![
            det(1, 1, 0.79),
            det(1, 1, 0.81),
            det(1, 2, 0.25),
            det(2, 3, 0.5),
            det(2, 3, 0.49),
            det(2, 2, 0.1),
        ];
        let out = make_pseudo_labels(&raw, &t);
        let naive: Vec<Detection> = raw
            .iter()
            .filter(|d| {
                let thr = match d.category_id {
                    1 => 0.8,
                    2 => 0.2,
                    _ => 0.5,
                };
                d.score >= thr
            })
            .copied()
            .collect();
        assert_eq!(crate::model::flatten_labels(&out), naive);
    }

    #[test]
    fn pseudo_labels_over_universe() {
        let t = CategoryThresholds::uniform(0.5);
        let ids: BTreeSet<u64> = [1, 2, 3].into_iter().collect();
        let out = make_pseudo_labels_over(&[det(2, 0, 0.9)], &t, &ids).unwrap();
        assert_eq!(out.iter().map(|l| l.image_id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(make_pseudo_labels_over(&[det(9, 0, 0.9)], &t, &ids).is_err());
    }

    #[test]
    fn uncertainty_fixtures() {
        assert_eq!(
            image_uncertainty(&ImagePseudoLabels::new(1, vec![det(1, 0, 0.7)])),
            0.7
        );
        assert_eq!(image_uncertainty(&ImagePseudoLabels::empty(1)), 0.0);
    }

    fn labels(scores: &[(u64, f64)]) -> Vec<ImagePseudoLabels> {
        scores
            .iter()
            .map(|&(id, s)| ImagePseudoLabels::new(id, vec![det(id, 0, s)]))
            .collect()
    }

    #[test]
    fn select_fixtures() {
        let all = labels(&[(1, 0.2), (2, 0.9), (3, 0.1), (4, 0.8)]);
        let r = select_easy(&all, 0.5).unwrap();
        assert_eq!(r.easy_image_ids, vec![2, 4]);
        assert_eq!(r.difficult_image_ids, vec![1, 3]);
        assert_eq!(select_easy(&all, 1.0).unwrap().easy_image_ids.len(), 4);
        assert!(select_easy(&all, 0.0).is_err());
        assert!(select_easy(&all, 1.5).is_err());
        assert!(select_easy(&[], 0.5).unwrap().easy_image_ids.is_empty());
    }

    #[test]
    fn ties_break_by_image_id() {
        let all = labels(&[(9, 0.5), (3, 0.5), (7, 0.5), (1, 0.6), (5, 0.5)]);
        let r = select_easy(&all, 0.6).unwrap();
        // oracle: full sort on (score desc, id asc) then slice
        let mut oracle: Vec<(f64, u64)> = all.iter().map(|l| (l.uncertainty_score, l.image_id)).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expect: Vec<u64> = oracle.iter().take(3).map(|x| x.1).collect();
        assert_eq!(r.easy_image_ids, expect);
        assert_eq!(r.easy_image_ids, vec![1, 3, 5]);
    }

    #[test]
    fn easy_count_is_exact_for_phase_fractions() {
        assert_eq!(easy_count(2.0 / 3.0, 3), 2);
        assert_eq!(easy_count(1.0 / 3.0, 3), 1);
        assert_eq!(easy_count(0.5, 5), 3);
        assert_eq!(easy_count(0.1, 1), 1);
    }

    proptest! {
        #[test]
        fn fitted_threshold_monotone_in_gt_frequency(
            scores in proptest::collection::vec(0.0..1.0f64, 1..40),
            gt_count in 1usize..10,
            n_lab in 1usize..6,
            n_unlab in 1usize..6,
        ) {
            let raw: Vec<_> = scores.iter().map(|&s| det(100, 0, s)).collect();
            let one: Vec<_> = (0..gt_count).map(|_| gt(1, 0)).collect();
            let two: Vec<_> = (0..2 * gt_count).map(|_| gt(1, 0)).collect();
            let t1 = fit_category_thresholds(&one, &raw, n_lab, n_unlab).unwrap().threshold(0);
            let t2 = fit_category_thresholds(&two, &raw, n_lab, n_unlab).unwrap().threshold(0);
            prop_assert!(t2 <= t1);
        }

        #[test]
        fn uncertainty_permutation_invariant(mut scores in proptest::collection::vec(0.0..1.0f64, 0..20), seed in 0u64..1000) {
            let a = ImagePseudoLabels::new(1, scores.iter().map(|&s| det(1, 0, s)).collect());
            // deterministic shuffle
            let n = scores.len();
            for i in (1..n).rev() {
                let j = ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64)) % (i as u64 + 1)) as usize;
                scores.swap(i, j);
            }
            let b = ImagePseudoLabels::new(1, scores.iter().map(|&s| det(1, 0, s)).collect());
            prop_assert!((image_uncertainty(&a) - image_uncertainty(&b)).abs() < 1e-12);
        }

        #[test]
        fn selection_is_order_free_and_separating(
            raw in proptest::collection::vec((0u64..50, 0u8..5), 1..30),
            k in 0.01..1.0f64,
        ) {
            let mut seen = BTreeSet::new();
            let items: Vec<(u64, f64)> = raw.into_iter()
                .filter(|(id, _)| seen.insert(*id))
                .map(|(id, s)| (id, s as f64 / 4.0))
                .collect();
            let all = labels(&items);
            let mut rev = all.clone();
            rev.reverse();
            let a = select_easy(&all, k).unwrap();
            let b = select_easy(&rev, k).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.easy_image_ids.len(), (k * all.len() as f64 - 1e-9).ceil() as usize);
            let score = |id: u64| all.iter().find(|l| l.image_id == id).unwrap().uncertainty_score;
            let min_easy = a.easy_image_ids.iter().map(|&i| score(i)).fold(f64::INFINITY, f64::min);
            let max_diff = a.difficult_image_ids.iter().map(|&i| score(i)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_easy >= max_diff);
            let mut union: Vec<u64> = a.easy_image_ids.iter().chain(&a.difficult_image_ids).copied().collect();
            union.sort();
            let mut ids: Vec<u64> = all.iter().map(|l| l.image_id).collect();
            ids.sort();
            prop_assert_eq!(union, ids);
        }

        #[test]
        fn kept_scores_respect_thresholds(
            raw in proptest::collection::vec((0u64..5, 0u32..4, 0.0..1.0f64), 0..40),
            thr in proptest::collection::vec(0.0..1.0f64, 4),
        ) {
            let dets: Vec<_> = raw.iter().map(|&(i, c, s)| det(i, c, s)).collect();
            let mut t = CategoryThresholds::uniform(0.5);
            for (c, v) in thr.iter().enumerate() { t.per_category.insert(c as u32, *v); }
            for l in make_pseudo_labels(&dets, &t) {
                for d in &l.detections {
                    prop_assert!(d.score >= t.threshold(d.category_id));
                }
            }
        }
    }
}
