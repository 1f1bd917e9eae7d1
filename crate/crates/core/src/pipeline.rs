//! The multi-phase curriculum loop as a resumable, on-disk state machine.
//!
//! A run directory holds `manifest.json` plus one `phase_<i>/` directory per
//! phase. Detector training happens outside: each phase is
//! `select -> emit -> (train externally) -> register`, and once every phase
//! has registered its model, `finalize` fuses the test predictions of all
//! models, phase 0 included.
//!
//! Every transition rewrites the manifest atomically, and a lock file keeps
//! a second process off the same run.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::embed::{train_embedding, EmbedConfig, EmbeddingMatrix};
use crate::error::{CuratorError, Result};
use crate::evaluation::{
    difficulty_report, mean_average_precision, DatasetDifficultySummary, DEFAULT_MATCH_IOU,
};
use crate::intersection::{intersect_all, IntersectionConfig};
use crate::io::{self, CocoAnnotation, CocoImage};
use crate::model::{flatten_labels, Detection};
use crate::pseudo_labels::{
    fit_category_thresholds, make_pseudo_labels_over, select_top, CategoryThresholds,
};
use crate::reweight::{build_weight_table_with, ReweightConfig, RoiFeatureRecord};
use crate::wbf::{fuse_dataset, WbfConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = "manifest.lock";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseStatus {
    Pending,
    Selected,
    Emitted,
    Trained,
    Predicted,
}

impl std::fmt::Display for PhaseStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PhaseStatus::Pending => "pending",
            PhaseStatus::Selected => "selected",
            PhaseStatus::Emitted => "emitted",
            PhaseStatus::Trained => "trained",
            PhaseStatus::Predicted => "predicted",
        };
        f.write_str(s)
    }
}

/// A trained model's hand-back files, relative to the run directory.
/// Phase 0 is the fully-supervised model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub phase: usize,
    /// Predictions on the unlabeled images.
    pub predictions: Option<PathBuf>,
    /// Predictions on the held-out test images.
    pub test_predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: usize,
    pub fraction_k: f64,
    /// Unlabeled-set predictions of the models this phase selected with.
    pub prediction_files: Vec<PathBuf>,
    pub selected_image_ids: Vec<u64>,
    pub consensus: Option<PathBuf>,
    pub training_set: Option<PathBuf>,
    pub weight_sidecar: Option<PathBuf>,
    pub embedding: Option<PathBuf>,
    pub status: PhaseStatus,
}

impl PhaseRecord {
    fn pending(phase: usize, num_phases: usize) -> Self {
        Self {
            phase,
            fraction_k: phase as f64 / num_phases as f64,
            prediction_files: Vec::new(),
            selected_image_ids: Vec::new(),
            consensus: None,
            training_set: None,
            weight_sidecar: None,
            embedding: None,
            status: PhaseStatus::Pending,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PipelineSettings {
    pub intersection: IntersectionConfig,
    pub reweight: ReweightConfig,
    /// `rng_seed` is ignored; each phase derives its own from the run seed.
    pub embed: EmbedConfig,
    pub wbf: WbfConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseManifest {
    pub version: u32,
    pub num_phases: usize,
    /// `num_phases + 1` once every phase is predicted.
    pub current_phase: usize,
    pub fraction_k: f64,
    pub seed: u64,
    pub labeled_gt: PathBuf,
    pub num_labeled_images: usize,
    pub unlabeled_image_ids: Vec<u64>,
    pub thresholds: CategoryThresholds,
    pub settings: PipelineSettings,
    pub models: Vec<ModelRecord>,
    pub phases: Vec<PhaseRecord>,
    pub warnings: Vec<String>,
    pub final_detections: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl PhaseManifest {
    pub fn is_complete(&self) -> bool {
        self.current_phase > self.num_phases
    }

    pub fn phase(&self, phase: usize) -> Option<&PhaseRecord> {
        self.phases.iter().find(|p| p.phase == phase)
    }

    /// Easy-image count of phase `i`: `ceil(i * n / N)` in integers.
    pub fn selection_count(&self, phase: usize) -> usize {
        let n = self.unlabeled_image_ids.len();
        (phase * n).div_ceil(self.num_phases)
    }

    fn warn_once(&mut self, msg: String) {
        if !self.warnings.contains(&msg) {
            warn!("{msg}");
            self.warnings.push(msg);
        }
    }
}

/// Removes the lock file when dropped.
#[derive(Debug)]
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CuratorError::Locked(path)),
            Err(e) => Err(CuratorError::io(&path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct InitOptions {
    pub num_phases: usize,
    pub fs_predictions: PathBuf,
    pub labeled_gt: PathBuf,
    pub out_dir: PathBuf,
    /// Unlabeled image universe: a JSON array of ids or a COCO file. Defaults
    /// to the image ids of `fs_predictions`.
    pub unlabeled_images: Option<PathBuf>,
    pub fs_test_predictions: Option<PathBuf>,
    pub seed: u64,
    pub settings: PipelineSettings,
}

impl InitOptions {
    pub fn new(num_phases: usize, fs_predictions: PathBuf, labeled_gt: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            num_phases,
            fs_predictions,
            labeled_gt,
            out_dir,
            unlabeled_images: None,
            fs_test_predictions: None,
            seed: 0,
            settings: PipelineSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EmitOptions {
    pub roi_features: Option<PathBuf>,
    /// Use this embedding instead of training one.
    pub embedding: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub num_models: usize,
    pub num_detections: usize,
    /// mAP@0.5 of each model's test predictions, by phase.
    pub model_map: Vec<Option<f64>>,
    pub ensemble_map: Option<f64>,
    pub difficulty: DatasetDifficultySummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalizeOutcome {
    pub detections: Vec<Detection>,
    pub report: Option<FinalReport>,
}

/// An open run directory holding the lock.
#[derive(Debug)]
pub struct Pipeline {
    root: PathBuf,
    manifest: PhaseManifest,
    _lock: LockGuard,
}

fn phase_dir(phase: usize) -> PathBuf {
    PathBuf::from(format!("phase_{phase}"))
}

fn read_image_universe(path: &Path) -> Result<BTreeSet<u64>> {
    let text = fs::read_to_string(path).map_err(|e| CuratorError::io(path, e))?;
    if let Ok(ids) = serde_json::from_str::<Vec<u64>>(&text) {
        return Ok(ids.into_iter().collect());
    }
    Ok(io::parse_coco(path, &text)?.image_ids().into_iter().collect())
}

impl Pipeline {
    /// Creates a run directory, fits the per-category thresholds from the
    /// fully-supervised predictions and starts phase 1 with `k = 1/N`.
    pub fn init(opts: &InitOptions) -> Result<Self> {
        if opts.num_phases == 0 {
            return Err(CuratorError::InvalidInput(
                "number of phases must be at least 1".into(),
            ));
        }
        opts.settings.intersection.validate()?;
        opts.settings.reweight.validate()?;
        opts.settings.embed.validate()?;
        let root = opts.out_dir.clone();
        fs::create_dir_all(&root).map_err(|e| CuratorError::io(&root, e))?;
        let lock = LockGuard::acquire(&root)?;
        if root.join(MANIFEST_FILE).exists() {
            return Err(CuratorError::State(format!(
                "{} already holds a run; use a fresh directory",
                root.display()
            )));
        }

        let fs_preds = io::read_detections(&opts.fs_predictions)?;
        let labeled = io::read_coco(&opts.labeled_gt)?;
        let universe: BTreeSet<u64> = match &opts.unlabeled_images {
            Some(p) => read_image_universe(p)?,
            None => fs_preds.iter().map(|d| d.image_id).collect(),
        };
        if universe.is_empty() {
            return Err(CuratorError::InvalidInput(
                "the unlabeled image set is empty".into(),
            ));
        }
        let overlap: Vec<u64> = labeled
            .image_ids()
            .into_iter()
            .filter(|id| universe.contains(id))
            .collect();
        if !overlap.is_empty() {
            return Err(CuratorError::ImageIdMismatch {
                context: "labeled and unlabeled image ids must be disjoint".into(),
                missing: Vec::new(),
                extra: overlap,
            });
        }
        let extra: Vec<u64> = fs_preds
            .iter()
            .map(|d| d.image_id)
            .filter(|id| !universe.contains(id))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if !extra.is_empty() {
            return Err(CuratorError::ImageIdMismatch {
                context: format!("{} versus the unlabeled image set", opts.fs_predictions.display()),
                missing: Vec::new(),
                extra,
            });
        }
        let thresholds = fit_category_thresholds(
            &labeled.ground_truth(),
            &fs_preds,
            labeled.images.len().max(1),
            universe.len(),
        )?;

        let dir0 = phase_dir(0);
        let preds_rel = dir0.join("predictions.json");
        io::write_detections(&root.join(&preds_rel), &fs_preds)?;
        let test_rel = match &opts.fs_test_predictions {
            Some(p) => {
                let rel = dir0.join("test_predictions.json");
                io::write_detections(&root.join(&rel), &io::read_detections(p)?)?;
                Some(rel)
            }
            None => None,
        };
        let gt_rel = PathBuf::from("labeled_gt.json");
        io::write_coco(&root.join(&gt_rel), &labeled)?;

        let mut settings = opts.settings.clone();
        settings.embed.rng_seed = opts.seed;
        let manifest = PhaseManifest {
            version: MANIFEST_VERSION,
            num_phases: opts.num_phases,
            current_phase: 1,
            fraction_k: 1.0 / opts.num_phases as f64,
            seed: opts.seed,
            labeled_gt: gt_rel,
            num_labeled_images: labeled.images.len(),
            unlabeled_image_ids: universe.into_iter().collect(),
            thresholds,
            settings,
            models: vec![ModelRecord {
                phase: 0,
                predictions: Some(preds_rel),
                test_predictions: test_rel,
            }],
            phases: vec![PhaseRecord::pending(1, opts.num_phases)],
            warnings: Vec::new(),
            final_detections: None,
            report: None,
        };
        let p = Self {
            root,
            manifest,
            _lock: lock,
        };
        p.persist()?;
        info!(
            "initialised {} phases over {} unlabeled images",
            p.manifest.num_phases,
            p.manifest.unlabeled_image_ids.len()
        );
        Ok(p)
    }

    /// Opens an existing run. `path` may be the run directory or its
    /// manifest file.
    pub fn open(path: &Path) -> Result<Self> {
        let root = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let lock = LockGuard::acquire(&root)?;
        let manifest: PhaseManifest = io::read_json(&root.join(MANIFEST_FILE))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(CuratorError::State(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        Ok(Self {
            root,
            manifest,
            _lock: lock,
        })
    }

    pub fn manifest(&self) -> &PhaseManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute location of a manifest-relative path.
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    fn persist(&self) -> Result<()> {
        io::write_json(&self.root.join(MANIFEST_FILE), &self.manifest)
    }

    fn current_mut(&mut self) -> Result<&mut PhaseRecord> {
        let i = self.manifest.current_phase;
        if self.manifest.is_complete() {
            return Err(CuratorError::State(format!(
                "all {} phases are complete; run finalize",
                self.manifest.num_phases
            )));
        }
        self.manifest
            .phases
            .iter_mut()
            .find(|p| p.phase == i)
            .ok_or_else(|| CuratorError::State(format!("manifest has no record for phase {i}")))
    }

    fn read_model_predictions(&self, m: &ModelRecord) -> Result<Vec<Detection>> {
        let rel = m.predictions.as_ref().ok_or_else(|| {
            CuratorError::State(format!(
                "model of phase {} has no unlabeled-set predictions; register them first",
                m.phase
            ))
        })?;
        let path = self.resolve(rel);
        if !path.exists() {
            return Err(CuratorError::State(format!(
                "prediction file of phase {} model is missing: {}",
                m.phase,
                path.display()
            )));
        }
        io::read_detections(&path)
    }

    /// Intersects the thresholded predictions of every model so far and marks
    /// the `ceil(i * n / N)` most confident images as easy.
    pub fn select(&mut self) -> Result<&PhaseRecord> {
        let i = self.manifest.current_phase;
        let status = self.current_mut()?.status;
        if status != PhaseStatus::Pending {
            return Err(CuratorError::State(format!("phase {i} is already {status}")));
        }
        let universe: BTreeSet<u64> = self.manifest.unlabeled_image_ids.iter().copied().collect();
        let models: Vec<ModelRecord> = self
            .manifest
            .models
            .iter()
            .filter(|m| m.phase < i)
            .cloned()
            .collect();
        if models.len() != i {
            return Err(CuratorError::State(format!(
                "phase {i} needs models of phases 0..{i}, found {}",
                models.len()
            )));
        }
        let mut outputs = Vec::with_capacity(models.len());
        for m in &models {
            let preds = self.read_model_predictions(m)?;
            outputs.push(make_pseudo_labels_over(
                &preds,
                &self.manifest.thresholds,
                &universe,
            )?);
        }
        let consensus = intersect_all(&outputs, &self.manifest.settings.intersection)?;
        let count = self.manifest.selection_count(i);
        let k = self.manifest.fraction_k;
        let selection = select_top(&consensus, count, k)?;

        let rel = phase_dir(i).join("consensus.json");
        io::write_detections(&self.resolve(&rel), &flatten_labels(&consensus))?;
        let rec = self.current_mut()?;
        rec.prediction_files = models.iter().filter_map(|m| m.predictions.clone()).collect();
        rec.selected_image_ids = selection.easy_image_ids;
        rec.consensus = Some(rel);
        rec.status = PhaseStatus::Selected;
        info!("phase {i}: selected {count} of {} images", universe.len());
        self.persist()?;
        self.current()
    }

    fn current(&self) -> Result<&PhaseRecord> {
        let i = self.manifest.current_phase;
        self.manifest
            .phase(i)
            .ok_or_else(|| CuratorError::State(format!("manifest has no record for phase {i}")))
    }

    /// Writes the phase training set (labeled ground truth plus the selected
    /// images' consensus pseudo labels) and, with RoI features, the
    /// similarity embedding and weight sidecar. Re-running on an emitted
    /// phase rewrites identical files.
    pub fn emit(&mut self, opts: &EmitOptions) -> Result<&PhaseRecord> {
        let i = self.manifest.current_phase;
        let rec = self.current_mut()?.clone();
        if !matches!(rec.status, PhaseStatus::Selected | PhaseStatus::Emitted) {
            return Err(CuratorError::State(format!(
                "phase {i} is {}; emit needs a selected phase",
                rec.status
            )));
        }
        let consensus_rel = rec
            .consensus
            .as_ref()
            .ok_or_else(|| CuratorError::State(format!("phase {i} has no consensus file")))?;
        let consensus = io::read_detections(&self.resolve(consensus_rel))?;
        let selected: BTreeSet<u64> = rec.selected_image_ids.iter().copied().collect();
        let pseudo: Vec<&Detection> = consensus
            .iter()
            .filter(|d| selected.contains(&d.image_id))
            .collect();

        let mut train = io::read_coco(&self.resolve(&self.manifest.labeled_gt))?;
        let first_id = train.annotations.iter().map(|a| a.id).max().unwrap_or(0) + 1;
        train.images.extend(selected.iter().map(|&id| CocoImage {
            id,
            file_name: None,
            width: None,
            height: None,
        }));
        for (id, d) in (first_id..).zip(pseudo) {
            train.annotations.push(CocoAnnotation {
                id,
                image_id: d.image_id,
                category_id: d.category_id,
                bbox: d.bbox.to_xywh(),
                area: Some(d.bbox.area()),
                iscrowd: Some(0),
                score: Some(d.score),
                pseudo: Some(true),
            });
        }
        let train_rel = phase_dir(i).join("train.json");
        io::write_coco(&self.resolve(&train_rel), &train)?;

        let (mut embedding_rel, mut sidecar_rel) = (None, None);
        match &opts.roi_features {
            Some(path) => {
                let rois = self.selected_rois(path, &selected)?;
                let embedding = match &opts.embedding {
                    Some(p) => Some(io::read_embedding(p)?),
                    None => self.train_phase_embedding(i, &rois)?,
                };
                if let Some(w) = &embedding {
                    let rel = phase_dir(i).join("embedding.txt");
                    io::write_embedding(&self.resolve(&rel), w)?;
                    embedding_rel = Some(rel);
                }
                let table =
                    build_weight_table_with(&rois, &self.manifest.settings.reweight, embedding.as_ref())?;
                let rel = phase_dir(i).join("weights.csv");
                io::write_weight_table(&self.resolve(&rel), &table)?;
                sidecar_rel = Some(rel);
            }
            None => self.manifest.warn_once(format!(
                "phase {i}: no RoI features given, weight sidecar skipped"
            )),
        }

        let rec = self.current_mut()?;
        rec.training_set = Some(train_rel);
        rec.embedding = embedding_rel;
        rec.weight_sidecar = sidecar_rel;
        rec.status = PhaseStatus::Emitted;
        self.persist()?;
        self.current()
    }

    /// RoIs of the selected images. Every selected image must have RoIs and
    /// no RoI may lie outside the unlabeled set.
    fn selected_rois(&self, path: &Path, selected: &BTreeSet<u64>) -> Result<Vec<RoiFeatureRecord>> {
        let rois = io::read_roi_features(path)?;
        let universe: BTreeSet<u64> = self.manifest.unlabeled_image_ids.iter().copied().collect();
        let with_rois: BTreeSet<u64> = rois.iter().map(|r| r.image_id).collect();
        let extra: Vec<u64> = with_rois.difference(&universe).copied().collect();
        let missing: Vec<u64> = selected.difference(&with_rois).copied().collect();
        if !extra.is_empty() || !missing.is_empty() {
            return Err(CuratorError::ImageIdMismatch {
                context: format!("RoI features in {} versus the selected images", path.display()),
                missing,
                extra,
            });
        }
        Ok(rois
            .into_iter()
            .filter(|r| selected.contains(&r.image_id))
            .collect())
    }

    fn train_phase_embedding(
        &mut self,
        phase: usize,
        rois: &[RoiFeatureRecord],
    ) -> Result<Option<EmbeddingMatrix>> {
        let mut cfg = self.manifest.settings.embed;
        cfg.rng_seed = self.manifest.seed.wrapping_add(phase as u64);
        match train_embedding(rois, &cfg) {
            Ok(outcome) => {
                if outcome.loss_increased {
                    self.manifest.warn_once(format!(
                        "phase {phase}: similarity loss rose from {} to {}",
                        outcome.initial_loss, outcome.final_loss
                    ));
                }
                Ok(Some(outcome.matrix))
            }
            Err(CuratorError::NoPairs) => {
                self.manifest.warn_once(format!(
                    "phase {phase}: no RoI pairs to train on, similarity uses raw features"
                ));
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Records that the external trainer has finished the current phase.
    pub fn mark_trained(&mut self) -> Result<&PhaseRecord> {
        let i = self.manifest.current_phase;
        let rec = self.current_mut()?;
        if rec.status != PhaseStatus::Emitted {
            return Err(CuratorError::State(format!(
                "phase {i} is {}; expected emitted",
                rec.status
            )));
        }
        rec.status = PhaseStatus::Trained;
        self.persist()?;
        self.current()
    }

    fn validate_predictions(&mut self, phase: usize, path: &Path) -> Result<Vec<Detection>> {
        let dets = io::read_detections(path)?;
        let universe: BTreeSet<u64> = self.manifest.unlabeled_image_ids.iter().copied().collect();
        let seen: BTreeSet<u64> = dets.iter().map(|d| d.image_id).collect();
        let extra: Vec<u64> = seen.difference(&universe).copied().collect();
        let missing: Vec<u64> = universe.difference(&seen).copied().collect();
        if !extra.is_empty() {
            return Err(CuratorError::ImageIdMismatch {
                context: format!("{} versus the unlabeled image set", path.display()),
                missing,
                extra,
            });
        }
        if !missing.is_empty() {
            self.manifest.warn_once(format!(
                "phase {phase}: predictions cover {} of {} unlabeled images",
                seen.len(),
                universe.len()
            ));
        }
        Ok(dets)
    }

    /// Hands back the model trained in `phase`. Unlabeled-set predictions are
    /// required except for the last phase. Registering advances to the next
    /// phase with `k = (i + 1) / N`.
    ///
    /// Test predictions may also be attached later to a model that has none,
    /// by passing only `test_predictions` for its phase.
    pub fn register(
        &mut self,
        phase: usize,
        predictions: Option<&Path>,
        test_predictions: Option<&Path>,
    ) -> Result<()> {
        if let Some(idx) = self.manifest.models.iter().position(|m| m.phase == phase) {
            let existing = &self.manifest.models[idx];
            return match (predictions, test_predictions) {
                (None, Some(test)) if existing.test_predictions.is_none() => {
                    let rel = phase_dir(phase).join("test_predictions.json");
                    io::write_detections(&self.resolve(&rel), &io::read_detections(test)?)?;
                    self.manifest.models[idx].test_predictions = Some(rel);
                    self.persist()
                }
                _ => Err(CuratorError::State(format!(
                    "phase {phase} is already registered; history is immutable"
                ))),
            };
        }
        let i = self.manifest.current_phase;
        if phase != i {
            return Err(CuratorError::State(format!(
                "cannot register phase {phase}; the current phase is {i}"
            )));
        }
        let status = self.current_mut()?.status;
        if !matches!(status, PhaseStatus::Emitted | PhaseStatus::Trained) {
            return Err(CuratorError::State(format!(
                "phase {i} is {status}; register needs an emitted or trained phase"
            )));
        }
        let n = self.manifest.num_phases;
        if predictions.is_none() && i < n {
            return Err(CuratorError::InvalidInput(format!(
                "phase {i} of {n} needs unlabeled-set predictions for the next selection"
            )));
        }
        if predictions.is_none() && test_predictions.is_none() {
            return Err(CuratorError::InvalidInput("nothing to register".into()));
        }

        let preds = predictions.map(|p| self.validate_predictions(i, p)).transpose()?;
        let test = test_predictions.map(io::read_detections).transpose()?;
        let dir = phase_dir(i);
        let mut record = ModelRecord {
            phase: i,
            predictions: None,
            test_predictions: None,
        };
        if let Some(d) = preds {
            let rel = dir.join("predictions.json");
            io::write_detections(&self.resolve(&rel), &d)?;
            record.predictions = Some(rel);
        }
        if let Some(d) = test {
            let rel = dir.join("test_predictions.json");
            io::write_detections(&self.resolve(&rel), &d)?;
            record.test_predictions = Some(rel);
        }
        self.manifest.models.push(record);
        self.current_mut()?.status = PhaseStatus::Predicted;
        self.manifest.current_phase = i + 1;
        if i < n {
            self.manifest.fraction_k = (i + 1) as f64 / n as f64;
            self.manifest.phases.push(PhaseRecord::pending(i + 1, n));
        }
        self.persist()
    }

    /// Fuses the test predictions of every model (phase 0 through N) and,
    /// given test ground truth, writes a report next to the detections.
    pub fn finalize(&mut self, wbf: Option<&WbfConfig>, test_gt: Option<&Path>) -> Result<FinalizeOutcome> {
        if !self.manifest.is_complete() {
            let i = self.manifest.current_phase;
            let status = self.current()?.status;
            return Err(CuratorError::State(format!(
                "phase {i} of {} is {status}; finalize needs every phase predicted",
                self.manifest.num_phases
            )));
        }
        let cfg = wbf.cloned().unwrap_or_else(|| self.manifest.settings.wbf.clone());
        let mut per_model = Vec::with_capacity(self.manifest.models.len());
        for m in &self.manifest.models {
            let rel = m.test_predictions.as_ref().ok_or_else(|| {
                CuratorError::State(format!("model of phase {} has no test predictions", m.phase))
            })?;
            per_model.push(io::read_detections(&self.resolve(rel))?);
        }
        let fused = fuse_dataset(&per_model, &cfg)?;
        let out_rel = PathBuf::from("final_detections.json");
        io::write_detections(&self.resolve(&out_rel), &fused)?;
        self.manifest.final_detections = Some(out_rel);

        let report = match test_gt {
            Some(path) => {
                let coco = io::read_coco(path)?;
                let gt = coco.ground_truth();
                let report = FinalReport {
                    num_models: per_model.len(),
                    num_detections: fused.len(),
                    model_map: per_model
                        .iter()
                        .map(|p| mean_average_precision(p, &gt, DEFAULT_MATCH_IOU))
                        .collect(),
                    ensemble_map: mean_average_precision(&fused, &gt, DEFAULT_MATCH_IOU),
                    difficulty: difficulty_report(&fused, &gt, coco.image_ids(), DEFAULT_MATCH_IOU, 0.0),
                };
                let rel = PathBuf::from("report.json");
                io::write_json(&self.resolve(&rel), &report)?;
                self.manifest.report = Some(rel);
                Some(report)
            }
            None => None,
        };
        self.persist()?;
        Ok(FinalizeOutcome {
            detections: fused,
            report,
        })
    }
}
