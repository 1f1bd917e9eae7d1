//! Similarity embedding trained from IoF-derived pair labels.
//!
//! The embedding is a bias-free linear map `u = W f`. Two RoIs of one image
//! form a positive pair when either box covers more than `t` of the other's
//! area. Training minimises the mean of
//! `y (1 - d)^2 + (1 - y) d^2` with `d = |u_i . u_j| / (|u_i| |u_j|)` by
//! full-batch gradient descent.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CuratorError, Result};
use crate::geometry::iof;
use crate::reweight::RoiFeatureRecord;

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity padded with zero rows or truncated to `rows x cols`.
    pub fn identity(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.data[i * cols + i] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CuratorError::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(CuratorError::InvalidInput(format!("non-finite matrix entry {v}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    /// `W f`.
    pub fn embed(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.cols {
            return Err(CuratorError::DimensionMismatch {
                expected: self.cols,
                found: f.len(),
            });
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(f).map(|(w, x)| w * x).sum())
            .collect())
    }
}

/// Free-function form of [`EmbeddingMatrix::embed`].
pub fn embed(w: &EmbeddingMatrix, f: &[f64]) -> Result<Vec<f64>> {
    w.embed(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLabel {
    pub i: u64,
    pub j: u64,
    pub y: bool,
}

/// All unordered RoI pairs of one image, ordered by `(i, j)` roi ids with
/// `i < j`. `y` is set when either box covers more than `t` of the other.
pub fn pair_labels(rois: &[RoiFeatureRecord], t: f64) -> Vec<PairLabel> {
    let mut sorted: Vec<&RoiFeatureRecord> = rois.iter().collect();
    sorted.sort_by_key(|r| r.roi_id);
    let mut out = Vec::with_capacity(sorted.len() * sorted.len().saturating_sub(1) / 2);
    for (a, ri) in sorted.iter().enumerate() {
        for rj in &sorted[a + 1..] {
            let y = iof(&ri.bbox, &rj.bbox) > t || iof(&rj.bbox, &ri.bbox) > t;
            out.push(PairLabel {
                i: ri.roi_id,
                j: rj.roi_id,
                y,
            });
        }
    }
    out
}

/// Per-pair contrastive loss.
pub fn sim_loss(d: f64, y: bool) -> f64 {
    if y {
        (1.0 - d) * (1.0 - d)
    } else {
        d * d
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingPair<'a> {
    pub fi: &'a [f64],
    pub fj: &'a [f64],
    pub y: bool,
}

fn project(w: &EmbeddingMatrix, f: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = w.row(r).iter().zip(f).map(|(a, b)| a * b).sum();
    }
}

/// Loss of a single pair, with its gradient accumulated into `grad` scaled
/// by `scale`. `u` and `v` are scratch buffers of length `rows`.
fn pair_term(
    w: &EmbeddingMatrix,
    p: &TrainingPair<'_>,
    scale: f64,
    grad: &mut [f64],
    u: &mut [f64],
    v: &mut [f64],
) -> f64 {
    project(w, p.fi, u);
    project(w, p.fj, v);
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let nu2: f64 = u.iter().map(|a| a * a).sum();
    let nv2: f64 = v.iter().map(|a| a * a).sum();
    if nu2 <= 0.0 || nv2 <= 0.0 {
        return sim_loss(0.0, p.y);
    }
    let norm = (nu2 * nv2).sqrt();
    let d = (dot.abs() / norm).min(1.0);
    let loss = sim_loss(d, p.y);
    let sign = if dot > 0.0 {
        1.0
    } else if dot < 0.0 {
        -1.0
    } else {
        0.0
    };
    if sign == 0.0 {
        return loss;
    }
    let dl_dd = if p.y { -2.0 * (1.0 - d) } else { 2.0 * d };
    let coef = scale * dl_dd * sign / norm;
    // dd/du = s/(|u||v|) (v - (u.v) u / |u|^2), symmetric for v
    let cols = w.cols();
    for r in 0..w.rows() {
        let gu = coef * (v[r] - dot * u[r] / nu2);
        let gv = coef * (u[r] - dot * v[r] / nv2);
        let row = &mut grad[r * cols..(r + 1) * cols];
        for ((g, a), b) in row.iter_mut().zip(p.fi).zip(p.fj) {
            *g += gu * a + gv * b;
        }
    }
    loss
}

/// Pairs per parallel work unit. Fixed, so the summation order (and hence
/// the result, bit for bit) does not depend on the thread count.
const CHUNK: usize = 256;

/// Mean pair loss and its gradient with respect to `W`.
///
/// At `u . v == 0` the subgradient 0 is used for the absolute value. Pairs
/// whose embedding has zero norm count with `d = 0` and contribute no gradient.
pub fn loss_and_gradient(w: &EmbeddingMatrix, pairs: &[TrainingPair<'_>]) -> Result<(f64, EmbeddingMatrix)> {
    if pairs.is_empty() {
        return Err(CuratorError::NoPairs);
    }
    if let Some(p) = pairs
        .iter()
        .find(|p| p.fi.len() != w.cols() || p.fj.len() != w.cols())
    {
        return Err(CuratorError::DimensionMismatch {
            expected: w.cols(),
            found: if p.fi.len() != w.cols() {
                p.fi.len()
            } else {
                p.fj.len()
            },
        });
    }
    let scale = 1.0 / pairs.len() as f64;
    let partials: Vec<(f64, Vec<f64>)> = pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; w.rows() * w.cols()];
            let (mut u, mut v) = (vec![0.0; w.rows()], vec![0.0; w.rows()]);
            let l = chunk
                .iter()
                .map(|p| pair_term(w, p, scale, &mut g, &mut u, &mut v))
                .sum::<f64>();
            (l, g)
        })
        .collect();
    let mut grad = EmbeddingMatrix::zeros(w.rows(), w.cols());
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        for (acc, x) in grad.data.iter_mut().zip(g) {
            *acc += x;
        }
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub iof_threshold: f64,
    /// Output dimension; `None` keeps the input dimension.
    pub embed_dim: Option<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub max_pairs_per_image: usize,
    pub rng_seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            iof_threshold: 0.7,
            embed_dim: None,
            learning_rate: 1e-2,
            epochs: 500,
            max_pairs_per_image: 10_000,
            rng_seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iof_threshold > 0.0 && self.iof_threshold < 1.0) {
            return Err(CuratorError::InvalidInput(format!(
                "IoF threshold {} outside (0, 1)",
                self.iof_threshold
            )));
        }
        if self.embed_dim == Some(0) {
            return Err(CuratorError::InvalidInput(
                "embedding dimension must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CuratorError::InvalidInput(
                "learning rate must be positive".into(),
            ));
        }
        if self.max_pairs_per_image == 0 {
            return Err(CuratorError::InvalidInput(
                "max_pairs_per_image must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub matrix: EmbeddingMatrix,
    pub num_pairs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Set when training ended above its starting loss.
    pub loss_increased: bool,
}

/// Labels pairs per image, subsamples each image to `max_pairs_per_image`
/// pairs, and returns them as `(index_i, index_j, y)` into `rois`.
fn collect_pairs(rois: &[RoiFeatureRecord], cfg: &EmbedConfig) -> Vec<(usize, usize, bool)> {
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (idx, r) in rois.iter().enumerate() {
        by_image.entry(r.image_id).or_default().push(idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out = Vec::new();
    for (_, mut members) in by_image {
        members.sort_by_key(|&i| rois[i].roi_id);
        let mut all = Vec::new();
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                let (bi, bj) = (&rois[i].bbox, &rois[j].bbox);
                let y = iof(bi, bj) > cfg.iof_threshold || iof(bj, bi) > cfg.iof_threshold;
                all.push((i, j, y));
            }
        }
        if all.len() > cfg.max_pairs_per_image {
            let mut picked = sample(&mut rng, all.len(), cfg.max_pairs_per_image).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|k| all[k]));
        } else {
            out.extend(all);
        }
    }
    out
}

/// Trains the embedding from identity initialisation by full-batch gradient
/// descent. Deterministic for fixed data and config.
pub fn train_embedding(rois: &[RoiFeatureRecord], cfg: &EmbedConfig) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let Some(first) = rois.first() else {
        return Err(CuratorError::NoPairs);
    };
    let dim = first.feature.len();
    if let Some(bad) = rois.iter().find(|r| r.feature.len() != dim) {
        return Err(CuratorError::DimensionMismatch {
            expected: dim,
            found: bad.feature.len(),
        });
    }
    let index_pairs = collect_pairs(rois, cfg);
    if index_pairs.is_empty() {
        return Err(CuratorError::NoPairs);
    }
    let pairs: Vec<TrainingPair<'_>> = index_pairs
        .iter()
        .map(|&(i, j, y)| TrainingPair {
            fi: &rois[i].feature,
            fj: &rois[j].feature,
            y,
        })
        .collect();

    let mut w = EmbeddingMatrix::identity(cfg.embed_dim.unwrap_or(dim), dim);
    let (initial_loss, mut grad) = loss_and_gradient(&w, &pairs)?;
    let mut loss = initial_loss;
    for _ in 0..cfg.epochs {
        for (x, g) in w.data.iter_mut().zip(&grad.data) {
            *x -= cfg.learning_rate * g;
        }
        (loss, grad) = loss_and_gradient(&w, &pairs)?;
    }
    let loss_increased = loss > initial_loss;
    if loss_increased {
        log::warn!("similarity training ended above its initial loss ({initial_loss} -> {loss})");
    }
    Ok(TrainingOutcome {
        matrix: w,
        num_pairs: pairs.len(),
        initial_loss,
        final_loss: loss,
        loss_increased,
    })
}

/// Mean pair loss of `w` over `rois` with the same pair construction as
/// training.
pub fn mean_pair_loss(w: &EmbeddingMatrix, rois: &[RoiFeatureRecord], cfg: &EmbedConfig) -> Result<f64> {
    let index_pairs = collect_pairs(rois, cfg);
    let pairs: Vec<TrainingPair<'_>> = index_pairs
        .iter()
        .map(|&(i, j, y)| TrainingPair {
            fi: &rois[i].feature,
            fj: &rois[j].feature,
            y,
        })
        .collect();
    Ok(loss_and_gradient(w, &pairs)?.0)
}
