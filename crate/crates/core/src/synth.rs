//! Synthetic datasets with planted easy/difficult structure.
//!
//! Each image is either easy or difficult. Every simulated model sees the same
//! ground truth and draws its own detections: each object is missed with
//! probability `fn_rate`, otherwise reported with Gaussian corner jitter and a
//! clamped Gaussian score; each object additionally spawns a random false
//! positive with probability `fp_rate`. Easy images use a gentler profile.
//! RoI features come from per-category clusters so same-category regions are
//! cosine-similar.
//!
//! All coordinates are snapped to a 1/16 pixel grid, which keeps the COCO
//! `[x, y, w, h]` conversion exact.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CuratorError, Result};
use crate::geometry::BoundingBox;
use crate::model::{Detection, GroundTruthAnnotation};
use crate::reweight::RoiFeatureRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub score_mean: f64,
    pub score_sigma: f64,
    /// Per-corner jitter, pixels.
    pub jitter_sigma: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
}

impl NoiseProfile {
    pub const fn noiseless() -> Self {
        Self {
            score_mean: 1.0,
            score_sigma: 0.0,
            jitter_sigma: 0.0,
            fp_rate: 0.0,
            fn_rate: 0.0,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        for (what, p) in [
            ("fp_rate", self.fp_rate),
            ("fn_rate", self.fn_rate),
            ("score_mean", self.score_mean),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CuratorError::InvalidInput(format!(
                    "{name}.{what} = {p} outside [0, 1]"
                )));
            }
        }
        if !(self.score_sigma >= 0.0 && self.jitter_sigma >= 0.0) {
            return Err(CuratorError::InvalidInput(format!(
                "{name}: sigmas must be non-negative"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub rng_seed: u64,
    pub num_images: usize,
    pub first_image_id: u64,
    pub num_categories: u32,
    /// Inclusive range of objects per image.
    pub boxes_per_image: (usize, usize),
    pub image_size: (f64, f64),
    /// Inclusive range of object side lengths, pixels.
    pub box_size: (f64, f64),
    pub easy_fraction_true: f64,
    pub easy: NoiseProfile,
    pub difficult: NoiseProfile,
    pub num_models: usize,
    pub feature_dim: usize,
    /// Norm of each cluster center, in units of `feature_sigma`.
    pub feature_separation: f64,
    pub feature_sigma: f64,
    pub background_rois_per_image: usize,
    /// Probability that an object's RoI is left unannotated (negative).
    pub missing_annotation_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            num_images: 400,
            first_image_id: 1,
            num_categories: 3,
            boxes_per_image: (2, 5),
            image_size: (640.0, 480.0),
            box_size: (40.0, 160.0),
            easy_fraction_true: 0.5,
            easy: NoiseProfile {
                score_mean: 0.85,
                score_sigma: 0.1,
                jitter_sigma: 2.0,
                fp_rate: 0.05,
                fn_rate: 0.05,
            },
            difficult: NoiseProfile {
                score_mean: 0.45,
                score_sigma: 0.1,
                jitter_sigma: 16.0,
                fp_rate: 1.0,
                fn_rate: 0.6,
            },
            num_models: 3,
            feature_dim: 8,
            feature_separation: 6.0,
            feature_sigma: 1.0,
            background_rois_per_image: 4,
            missing_annotation_rate: 0.1,
        }
    }
}

impl SynthConfig {
    /// Every image easy, detections identical to ground truth with score 1.
    pub fn noiseless(rng_seed: u64, num_images: usize) -> Self {
        Self {
            rng_seed,
            num_images,
            easy_fraction_true: 1.0,
            easy: NoiseProfile::noiseless(),
            difficult: NoiseProfile::noiseless(),
            missing_annotation_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.easy.validate("easy")?;
        self.difficult.validate("difficult")?;
        if self.easy.score_mean < self.difficult.score_mean {
            return Err(CuratorError::InvalidInput(
                "easy images must have a score mean at least as high as difficult ones".into(),
            ));
        }
        for (what, p) in [
            ("easy_fraction_true", self.easy_fraction_true),
            ("missing_annotation_rate", self.missing_annotation_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CuratorError::InvalidInput(format!("{what} = {p} outside [0, 1]")));
            }
        }
        if self.num_categories == 0 || self.num_models == 0 {
            return Err(CuratorError::InvalidInput(
                "need at least one category and one model".into(),
            ));
        }
        if self.boxes_per_image.0 > self.boxes_per_image.1 {
            return Err(CuratorError::InvalidInput(
                "boxes_per_image range is reversed".into(),
            ));
        }
        let (w, h) = self.image_size;
        let (lo, hi) = self.box_size;
        if !(lo > 0.0 && lo <= hi && hi <= w.min(h)) {
            return Err(CuratorError::InvalidInput(
                "box_size must be positive, ordered and fit inside the image".into(),
            ));
        }
        if self.feature_dim < self.num_categories as usize + 1 {
            return Err(CuratorError::DimensionMismatch {
                expected: self.num_categories as usize + 1,
                found: self.feature_dim,
            });
        }
        if !(self.feature_sigma >= 0.0 && self.feature_separation >= 0.0) {
            return Err(CuratorError::InvalidInput(
                "feature parameters must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub image_ids: Vec<u64>,
    pub ground_truth: Vec<GroundTruthAnnotation>,
    /// One detection list per simulated model.
    pub model_detections: Vec<Vec<Detection>>,
    pub roi_features: Vec<RoiFeatureRecord>,
    pub planted_easy: BTreeSet<u64>,
}

fn snap(x: f64) -> f64 {
    (x * 16.0).round() / 16.0
}

fn normal(mean: f64, sigma: f64) -> Normal<f64> {
    Normal::new(mean, sigma).expect("validated sigma")
}

fn random_box(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> BoundingBox {
    let (iw, ih) = cfg.image_size;
    let (lo, hi) = cfg.box_size;
    let w = rng.gen_range(lo..=hi);
    let h = rng.gen_range(lo..=hi);
    let x = rng.gen_range(0.0..=iw - w);
    let y = rng.gen_range(0.0..=ih - h);
    BoundingBox::new(snap(x), snap(y), snap(x + w), snap(y + h))
}

fn jitter(rng: &mut ChaCha8Rng, b: &BoundingBox, sigma: f64, cfg: &SynthConfig) -> BoundingBox {
    if sigma == 0.0 {
        return *b;
    }
    let n = normal(0.0, sigma);
    let (iw, ih) = cfg.image_size;
    let x0 = (b.x_min + n.sample(rng)).clamp(0.0, iw - 1.0);
    let y0 = (b.y_min + n.sample(rng)).clamp(0.0, ih - 1.0);
    let x1 = (b.x_max + n.sample(rng)).clamp(x0 + 1.0, iw);
    let y1 = (b.y_max + n.sample(rng)).clamp(y0 + 1.0, ih);
    BoundingBox::new(snap(x0), snap(y0), snap(x1), snap(y1))
}

fn draw_score(rng: &mut ChaCha8Rng, p: &NoiseProfile) -> f64 {
    normal(p.score_mean, p.score_sigma).sample(rng).clamp(0.0, 1.0)
}

fn shrink(b: &BoundingBox, factor: f64) -> BoundingBox {
    let dx = b.width() * (1.0 - factor) / 2.0;
    let dy = b.height() * (1.0 - factor) / 2.0;
    BoundingBox::new(
        snap(b.x_min + dx),
        snap(b.y_min + dy),
        snap(b.x_max - dx),
        snap(b.y_max - dy),
    )
}

fn cluster_feature(rng: &mut ChaCha8Rng, cluster: usize, cfg: &SynthConfig) -> Vec<f64> {
    let noise = normal(0.0, cfg.feature_sigma);
    (0..cfg.feature_dim)
        .map(|k| {
            let center = if k == cluster {
                cfg.feature_separation * cfg.feature_sigma
            } else {
                0.0
            };
            center + noise.sample(rng)
        })
        .collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates one split. Deterministic for a given config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let image_ids: Vec<u64> = (0..cfg.num_images as u64)
        .map(|i| cfg.first_image_id + i)
        .collect();

    let mut scene_rng = stream(cfg.rng_seed, 0);
    let mut order = image_ids.clone();
    order.shuffle(&mut scene_rng);
    let n_easy = (cfg.easy_fraction_true * cfg.num_images as f64).round() as usize;
    let planted_easy: BTreeSet<u64> = order[..n_easy].iter().copied().collect();

    let mut ground_truth = Vec::new();
    for &id in &image_ids {
        let count = scene_rng.gen_range(cfg.boxes_per_image.0..=cfg.boxes_per_image.1);
        for _ in 0..count {
            ground_truth.push(GroundTruthAnnotation {
                image_id: id,
                category_id: scene_rng.gen_range(0..cfg.num_categories),
                bbox: random_box(&mut scene_rng, cfg),
            });
        }
    }
    let gt_by_image = crate::model::group_gt_by_image(&ground_truth);

    let mut model_detections = Vec::with_capacity(cfg.num_models);
    for m in 0..cfg.num_models {
        let mut rng = stream(cfg.rng_seed, 1 + m as u64);
        let mut dets = Vec::new();
        for &id in &image_ids {
            let profile = if planted_easy.contains(&id) {
                &cfg.easy
            } else {
                &cfg.difficult
            };
            for g in gt_by_image.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
                if rng.gen::<f64>() >= profile.fn_rate {
                    let bbox = jitter(&mut rng, &g.bbox, profile.jitter_sigma, cfg);
                    dets.push(Detection::new(
                        id,
                        g.category_id,
                        draw_score(&mut rng, profile),
                        bbox,
                    ));
                }
                if rng.gen::<f64>() < profile.fp_rate {
                    let bbox = random_box(&mut rng, cfg);
                    let category = rng.gen_range(0..cfg.num_categories);
                    dets.push(Detection::new(id, category, draw_score(&mut rng, profile), bbox));
                }
            }
        }
        model_detections.push(dets);
    }

    let mut rng = stream(cfg.rng_seed, 10_000);
    let background = cfg.num_categories as usize;
    let mut roi_features = Vec::new();
    for &id in &image_ids {
        let mut next = 0u64;
        let mut push = |bbox: BoundingBox, is_positive: bool, feature: Vec<f64>| {
            roi_features.push(RoiFeatureRecord {
                roi_id: next,
                image_id: id,
                bbox,
                is_positive,
                feature,
            });
            next += 1;
        };
        for g in gt_by_image.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
            let annotated = rng.gen::<f64>() >= cfg.missing_annotation_rate;
            let f = cluster_feature(&mut rng, g.category_id as usize, cfg);
            push(g.bbox, annotated, f);
            let f = cluster_feature(&mut rng, g.category_id as usize, cfg);
            push(shrink(&g.bbox, 0.6), false, f);
        }
        for _ in 0..cfg.background_rois_per_image {
            let b = random_box(&mut rng, cfg);
            let f = cluster_feature(&mut rng, background, cfg);
            push(b, false, f);
        }
    }

    Ok(SynthDataset {
        image_ids,
        ground_truth,
        model_detections,
        roi_features,
        planted_easy,
    })
}

/// Two-cluster toy set for similarity learning. Every image holds one object
/// from each cluster; each object is a large box with two boxes nested inside
/// it, so same-object pairs are IoF-positive and cross-object pairs are
/// disjoint. Features are the cluster center (norm `separation * sigma` along
/// its own axis) plus isotropic noise.
pub fn generate_similarity_toy(
    rng_seed: u64,
    num_images: usize,
    feature_dim: usize,
    separation: f64,
    sigma: f64,
) -> Result<Vec<RoiFeatureRecord>> {
    if feature_dim < 2 {
        return Err(CuratorError::DimensionMismatch {
            expected: 2,
            found: feature_dim,
        });
    }
    let mut rng = stream(rng_seed, 20_000);
    let noise = normal(0.0, sigma);
    let mut out = Vec::new();
    for img in 0..num_images as u64 {
        let mut roi_id = 0;
        for cluster in 0..2usize {
            let x0 = 200.0 * cluster as f64;
            let outer = BoundingBox::new(x0, 0.0, x0 + 100.0, 100.0);
            for b in [outer, shrink(&outer, 0.8), shrink(&outer, 0.6)] {
                let feature = (0..feature_dim)
                    .map(|k| if k == cluster { separation * sigma } else { 0.0 } + noise.sample(&mut rng))
                    .collect();
                out.push(RoiFeatureRecord {
                    roi_id,
                    image_id: img,
                    bbox: b,
                    is_positive: false,
                    feature,
                });
                roi_id += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mean_score;

    #[test]
    fn noiseless_copies_ground_truth() {
        let cfg = SynthConfig::noiseless(4, 20);
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.planted_easy.len(), 20);
        for dets in &ds.model_detections {
            assert_eq!(dets.len(), ds.ground_truth.len());
            for (d, g) in dets.iter().zip(&ds.ground_truth) {
                assert_eq!(d.bbox, g.bbox);
                assert_eq!(d.category_id, g.category_id);
                assert_eq!(d.score, 1.0);
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig {
            num_images: 30,
            ..Default::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig {
            rng_seed: 1,
            ..cfg.clone()
        };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn easy_images_score_higher() {
        let ds = generate(&SynthConfig::default()).unwrap();
        let (mut easy, mut hard) = (Vec::new(), Vec::new());
        for d in &ds.model_detections[0] {
            if ds.planted_easy.contains(&d.image_id) {
                easy.push(*d);
            } else {
                hard.push(*d);
            }
        }
        assert!(mean_score(&easy) - mean_score(&hard) > 0.3);
    }

    #[test]
    fn bounds_and_ranges() {
        let cfg = SynthConfig {
            num_images: 50,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        for d in ds.model_detections.iter().flatten() {
            assert!((0.0..=1.0).contains(&d.score));
            assert!(d.bbox.x_min >= 0.0 && d.bbox.x_max <= cfg.image_size.0);
            assert!(d.bbox.y_min >= 0.0 && d.bbox.y_max <= cfg.image_size.1);
            assert!(d.bbox.is_valid());
        }
        assert!(ds.roi_features.iter().all(|r| r.feature.len() == cfg.feature_dim));
    }

    #[test]
    fn invalid_configs() {
        let dims = SynthConfig {
            feature_dim: 2,
            ..Default::default()
        };
        assert!(matches!(
            generate(&dims),
            Err(CuratorError::DimensionMismatch { .. })
        ));
        let mut inverted = SynthConfig::default();
        inverted.easy.score_mean = 0.1;
        assert!(generate(&inverted).is_err());
        let mut prob = SynthConfig::default();
        prob.difficult.fp_rate = 1.5;
        assert!(generate(&prob).is_err());
    }

    #[test]
    fn toy_layout() {
        let rois = generate_similarity_toy(1, 3, 4, 5.0, 1.0).unwrap();
        assert_eq!(rois.len(), 18);
        let labels = crate::embed::pair_labels(&rois[..6], 0.7);
        let positives = labels.iter().filter(|p| p.y).count();
        assert_eq!(positives, 6);
    }
}
