//! Shared generators and brute-force oracles for the integration tests.
#![allow(dead_code)]

use pseudo_curator::geometry::{iou, BoundingBox};
use pseudo_curator::model::{Detection, GroundTruthAnnotation};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let x = rng.gen_range(0.0..200.0);
    let y = rng.gen_range(0.0..200.0);
    let w = rng.gen_range(10.0..80.0);
    let h = rng.gen_range(10.0..80.0);
    BoundingBox::new(x, y, x + w, y + h)
}

pub fn jittered(rng: &mut ChaCha8Rng, b: &BoundingBox, rel: f64) -> BoundingBox {
    let sx = b.width() * rel;
    let sy = b.height() * rel;
    let x0 = b.x_min + rng.gen_range(-sx..=sx);
    let y0 = b.y_min + rng.gen_range(-sy..=sy);
    let x1 = (b.x_max + rng.gen_range(-sx..=sx)).max(x0 + 1.0);
    let y1 = (b.y_max + rng.gen_range(-sy..=sy)).max(y0 + 1.0);
    BoundingBox::new(x0, y0, x1, y1)
}

/// Per-category greedy NMS at `thr`, keeping at most `cap` boxes.
pub fn nms(mut dets: Vec<Detection>, thr: f64, cap: usize) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.len() == cap {
            break;
        }
        if kept
            .iter()
            .all(|k| k.category_id != d.category_id || iou(&k.bbox, &d.bbox) < thr)
        {
            kept.push(d);
        }
    }
    kept
}

/// Scene of shared objects seen by several detectors: each model reports a
/// jittered copy of most objects plus occasional false positives, then NMS.
pub fn detector_outputs(
    rng: &mut ChaCha8Rng,
    image_id: u64,
    num_models: usize,
    max_boxes: usize,
) -> (Vec<GroundTruthAnnotation>, Vec<Vec<Detection>>) {
    let num_objects = rng.gen_range(1..=max_boxes);
    let objects: Vec<(u32, BoundingBox)> = (0..num_objects)
        .map(|_| (rng.gen_range(0..3), rand_box(rng)))
        .collect();
    let gt = objects
        .iter()
        .map(|&(c, b)| GroundTruthAnnotation {
            image_id,
            category_id: c,
            bbox: b,
        })
        .collect();
    let models = (0..num_models)
        .map(|_| {
            let mut dets = Vec::new();
            for (c, b) in &objects {
                if rng.gen::<f64>() < 0.85 {
                    dets.push(Detection::new(
                        image_id,
                        *c,
                        rng.gen_range(0.05..1.0),
                        jittered(rng, b, 0.12),
                    ));
                }
            }
            for _ in 0..rng.gen_range(0..=2) {
                dets.push(Detection::new(
                    image_id,
                    rng.gen_range(0..3),
                    rng.gen_range(0.05..1.0),
                    rand_box(rng),
                ));
            }
            nms(dets, 0.5, max_boxes)
        })
        .collect();
    (gt, models)
}

/// Maximum number of disjoint pairs `(i, j)` with `eligible(i, j)`, by
/// exhaustive search.
pub fn max_matching(n_a: usize, n_b: usize, eligible: &dyn Fn(usize, usize) -> bool) -> usize {
    fn go(
        i: usize,
        n_a: usize,
        n_b: usize,
        used: &mut Vec<bool>,
        eligible: &dyn Fn(usize, usize) -> bool,
    ) -> usize {
        if i == n_a {
            return 0;
        }
        let mut best = go(i + 1, n_a, n_b, used, eligible);
        for j in 0..n_b {
            if !used[j] && eligible(i, j) {
                used[j] = true;
                best = best.max(1 + go(i + 1, n_a, n_b, used, eligible));
                used[j] = false;
            }
        }
        best
    }
    go(0, n_a, n_b, &mut vec![false; n_b], eligible)
}

pub fn same_detections(a: &[Detection], b: &[Detection], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.image_id == y.image_id
                && x.category_id == y.category_id
                && (x.score - y.score).abs() <= tol
                && (x.bbox.x_min - y.bbox.x_min).abs() <= tol
                && (x.bbox.y_min - y.bbox.y_min).abs() <= tol
                && (x.bbox.x_max - y.bbox.x_max).abs() <= tol
                && (x.bbox.y_max - y.bbox.y_max).abs() <= tol
        })
}
