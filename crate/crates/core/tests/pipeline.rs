mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use pseudo_curator::error::CuratorError;
use pseudo_curator::intersection::{intersect_all, IntersectionConfig};
use pseudo_curator::io::{self, CocoDataset};
use pseudo_curator::model::{Detection, ImagePseudoLabels};
use pseudo_curator::pipeline::{EmitOptions, InitOptions, PhaseStatus, Pipeline, PipelineSettings};
use pseudo_curator::pseudo_labels::{make_pseudo_labels_over, select_top};
use pseudo_curator::synth::{generate, SynthConfig, SynthDataset};
use pseudo_curator::wbf::{fuse_dataset, WbfConfig};

struct World {
    dir: tempfile::TempDir,
    unlabeled: SynthDataset,
    test: SynthDataset,
}

fn world(num_models: usize) -> World {
    let dir = tempfile::tempdir().unwrap();
    let cfg = |seed, n, first| SynthConfig {
        rng_seed: seed,
        num_images: n,
        first_image_id: first,
        num_models,
        ..Default::default()
    };
    let labeled = generate(&cfg(1, 40, 1)).unwrap();
    let unlabeled = generate(&cfg(2, 60, 1000)).unwrap();
    let test = generate(&cfg(3, 30, 5000)).unwrap();
    let d = dir.path();
    io::write_coco(
        &d.join("labeled.json"),
        &CocoDataset::from_ground_truth(&labeled.image_ids, &labeled.ground_truth),
    )
    .unwrap();
    io::write_coco(
        &d.join("test_gt.json"),
        &CocoDataset::from_ground_truth(&test.image_ids, &test.ground_truth),
    )
    .unwrap();
    io::write_roi_features(&d.join("rois.jsonl"), &unlabeled.roi_features).unwrap();
    fs::write(
        d.join("ids.json"),
        serde_json::to_string(&unlabeled.image_ids).unwrap(),
    )
    .unwrap();
    for m in 0..num_models {
        io::write_detections(&d.join(format!("unl_{m}.json")), &unlabeled.model_detections[m]).unwrap();
        io::write_detections(&d.join(format!("test_{m}.json")), &test.model_detections[m]).unwrap();
    }
    World { dir, unlabeled, test }
}

fn init_opts(w: &World, num_phases: usize) -> InitOptions {
    let d = w.dir.path();
    let mut settings = PipelineSettings::default();
    settings.embed.epochs = 50;
    InitOptions {
        num_phases,
        fs_predictions: d.join("unl_0.json"),
        labeled_gt: d.join("labeled.json"),
        out_dir: d.join("run"),
        unlabeled_images: Some(d.join("ids.json")),
        fs_test_predictions: Some(d.join("test_0.json")),
        seed: 4,
        settings,
    }
}

fn manual_selection(models: &[Vec<Detection>], p: &Pipeline, count: usize, k: f64) -> Vec<u64> {
    let ids: BTreeSet<u64> = p.manifest().unlabeled_image_ids.iter().copied().collect();
    let outputs: Vec<Vec<ImagePseudoLabels>> = models
        .iter()
        .map(|m| make_pseudo_labels_over(m, &p.manifest().thresholds, &ids).unwrap())
        .collect();
    let consensus = intersect_all(&outputs, &IntersectionConfig::default()).unwrap();
    select_top(&consensus, count, k).unwrap().easy_image_ids
}

#[test]
fn three_phase_run_matches_manual_composition() {
    let w = world(3);
    let d = w.dir.path();
    let mut p = Pipeline::init(&init_opts(&w, 3)).unwrap();
    let n = w.unlabeled.image_ids.len();
    for phase in 1..=3usize {
        assert_eq!(p.manifest().fraction_k, phase as f64 / 3.0);
        let rec = p.select().unwrap().clone();
        assert_eq!(rec.selected_image_ids.len(), (phase * n).div_ceil(3));
        let manual = manual_selection(
            &w.unlabeled.model_detections[..phase],
            &p,
            rec.selected_image_ids.len(),
            rec.fraction_k,
        );
        assert_eq!(rec.selected_image_ids, manual, "phase {phase}");
        assert_eq!(rec.prediction_files.len(), phase);
        p.emit(&EmitOptions::default()).unwrap();
        p.mark_trained().unwrap();
        assert_eq!(p.manifest().phase(phase).unwrap().status, PhaseStatus::Trained);
        let preds = d.join(format!("unl_{}.json", phase % 3));
        let test = d.join(format!("test_{}.json", phase % 3));
        p.register(phase, Some(&preds), Some(&test)).unwrap();
    }
    assert!(p.manifest().is_complete());
    assert_eq!(
        p.manifest().warnings.len(),
        3,
        "one missing-feature warning per phase"
    );
    let out = p.finalize(None, Some(&d.join("test_gt.json"))).unwrap();
    let mut per_model = vec![w.test.model_detections[0].clone()];
    for phase in 1..=3 {
        per_model.push(w.test.model_detections[phase % 3].clone());
    }
    let manual = fuse_dataset(&per_model, &WbfConfig::default()).unwrap();
    assert_eq!(out.detections, manual);
    let report = out.report.unwrap();
    assert_eq!(report.num_models, 4);
    assert!(p.resolve(Path::new("report.json")).exists());
}

#[test]
fn sidecar_covers_selected_rois_only() {
    let w = world(2);
    let mut p = Pipeline::init(&init_opts(&w, 2)).unwrap();
    let selected: BTreeSet<u64> = p.select().unwrap().selected_image_ids.iter().copied().collect();
    let rec = p
        .emit(&EmitOptions {
            roi_features: Some(w.dir.path().join("rois.jsonl")),
            embedding: None,
        })
        .unwrap()
        .clone();
    let table = io::read_weight_table(&p.resolve(rec.weight_sidecar.as_ref().unwrap())).unwrap();
    let got: Vec<(u64, u64)> = table.rows.iter().map(|r| (r.image_id, r.roi_id)).collect();
    let want: BTreeSet<(u64, u64)> = w
        .unlabeled
        .roi_features
        .iter()
        .filter(|r| selected.contains(&r.image_id))
        .map(|r| (r.image_id, r.roi_id))
        .collect();
    assert_eq!(got, want.into_iter().collect::<Vec<_>>());
    assert!(p.manifest().warnings.is_empty());
}

#[test]
fn supplied_embedding_is_used_verbatim() {
    let w = world(2);
    let emb = w.dir.path().join("emb.txt");
    fs::write(&emb, "2 8\n1 0 0 0 0 0 0 0\n0 1 0 0 0 0 0 0\n").unwrap();
    let mut p = Pipeline::init(&init_opts(&w, 2)).unwrap();
    p.select().unwrap();
    let rec = p
        .emit(&EmitOptions {
            roi_features: Some(w.dir.path().join("rois.jsonl")),
            embedding: Some(emb.clone()),
        })
        .unwrap()
        .clone();
    let stored = fs::read_to_string(p.resolve(rec.embedding.as_ref().unwrap())).unwrap();
    assert_eq!(stored, fs::read_to_string(&emb).unwrap());
}

#[test]
fn missing_rois_for_selected_images_are_listed() {
    let w = world(2);
    let partial: Vec<_> = w
        .unlabeled
        .roi_features
        .iter()
        .filter(|r| r.image_id != 1000)
        .cloned()
        .collect();
    let path = w.dir.path().join("partial.jsonl");
    io::write_roi_features(&path, &partial).unwrap();
    let mut opts = init_opts(&w, 1);
    opts.out_dir = w.dir.path().join("run1");
    let mut p = Pipeline::init(&opts).unwrap();
    p.select().unwrap();
    let err = p
        .emit(&EmitOptions {
            roi_features: Some(path),
            embedding: None,
        })
        .unwrap_err();
    match err {
        CuratorError::ImageIdMismatch { missing, extra, .. } => {
            assert_eq!(missing, vec![1000]);
            assert!(extra.is_empty());
        }
        e => panic!("{e:?}"),
    }
    assert_eq!(p.manifest().phase(1).unwrap().status, PhaseStatus::Selected);
}

#[test]
fn resume_after_reopen() {
    let w = world(2);
    let opts = init_opts(&w, 2);
    {
        let mut p = Pipeline::init(&opts).unwrap();
        p.select().unwrap();
    }
    let mut p = Pipeline::open(&opts.out_dir).unwrap();
    assert_eq!(p.manifest().phase(1).unwrap().status, PhaseStatus::Selected);
    p.emit(&EmitOptions::default()).unwrap();
    drop(p);
    let mut p = Pipeline::open(&opts.out_dir).unwrap();
    p.register(1, Some(&w.dir.path().join("unl_1.json")), None)
        .unwrap();
    assert_eq!(p.manifest().current_phase, 2);
    assert!(p.finalize(None, None).is_err());
}

#[test]
fn finalize_needs_every_test_file() {
    let w = world(2);
    let mut opts = init_opts(&w, 1);
    opts.fs_test_predictions = None;
    let mut p = Pipeline::init(&opts).unwrap();
    p.select().unwrap();
    p.emit(&EmitOptions::default()).unwrap();
    p.register(1, None, Some(&w.dir.path().join("test_1.json")))
        .unwrap();
    let err = p.finalize(None, None).unwrap_err();
    assert!(err.to_string().contains("phase 0"), "{err}");
    p.register(0, None, Some(&w.dir.path().join("test_0.json")))
        .unwrap();
    assert!(p
        .register(0, None, Some(&w.dir.path().join("test_0.json")))
        .is_err());
    let out = p.finalize(None, None).unwrap();
    assert!(!out.detections.is_empty());
}

#[test]
fn identical_models_fuse_to_averages() {
    let w = world(1);
    let mut opts = init_opts(&w, 1);
    opts.fs_test_predictions = Some(w.dir.path().join("test_0.json"));
    let mut p = Pipeline::init(&opts).unwrap();
    p.select().unwrap();
    p.emit(&EmitOptions::default()).unwrap();
    p.register(1, None, Some(&w.dir.path().join("test_0.json")))
        .unwrap();
    let out = p.finalize(None, None).unwrap();
    let single = fuse_dataset(&[w.test.model_detections[0].clone()], &WbfConfig::default()).unwrap();
    assert!(common::same_detections(&out.detections, &single, 1e-12));
}
