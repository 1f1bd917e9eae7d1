// A complete two-phase run. Training is external: here each "trained" model
// is simulated by the next synthetic detector.

use pseudo_curator::io::{self, CocoDataset};
use pseudo_curator::pipeline::{EmitOptions, InitOptions, Pipeline};
use pseudo_curator::synth::{generate, SynthConfig};

pub fn run_example() -> pseudo_curator::Result<()> {
    let dir = std::env::temp_dir().join(format!("pseudo-curator-run-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let split = |seed, n, first| {
        generate(&SynthConfig {
            rng_seed: seed,
            num_images: n,
            first_image_id: first,
            ..Default::default()
        })
    };
    let labeled = split(1, 60, 1)?;
    let unlabeled = split(2, 120, 1000)?;
    let test = split(3, 60, 5000)?;

    let input = |name: &str| dir.join("inputs").join(name);
    io::write_coco(
        &input("labeled.json"),
        &CocoDataset::from_ground_truth(&labeled.image_ids, &labeled.ground_truth),
    )?;
    io::write_coco(
        &input("test_gt.json"),
        &CocoDataset::from_ground_truth(&test.image_ids, &test.ground_truth),
    )?;
    io::write_coco(
        &input("unlabeled.json"),
        &CocoDataset::from_ground_truth(&unlabeled.image_ids, &[]),
    )?;
    io::write_roi_features(&input("rois.jsonl"), &unlabeled.roi_features)?;
    for m in 0..3 {
        io::write_detections(&input(&format!("unl_{m}.json")), &unlabeled.model_detections[m])?;
        io::write_detections(&input(&format!("test_{m}.json")), &test.model_detections[m])?;
    }

    let mut opts = InitOptions::new(2, input("unl_0.json"), input("labeled.json"), dir.join("run"));
    opts.unlabeled_images = Some(input("unlabeled.json"));
    opts.fs_test_predictions = Some(input("test_0.json"));
    opts.settings.embed.epochs = 100;
    let mut run = Pipeline::init(&opts)?;

    for phase in 1..=2 {
        let rec = run.select()?;
        println!(
            "phase {phase}: k = {:.2}, {} easy images",
            rec.fraction_k,
            rec.selected_image_ids.len()
        );
        run.emit(&EmitOptions {
            roi_features: Some(input("rois.jsonl")),
            embedding: None,
        })?;
        let preds = input(&format!("unl_{phase}.json"));
        let test_preds = input(&format!("test_{phase}.json"));
        let preds = (phase < 2).then_some(preds.as_path());
        run.register(phase, preds, Some(&test_preds))?;
    }

    let out = run.finalize(None, Some(&input("test_gt.json")))?;
    let report = out.report.expect("ground truth given");
    for (i, ap) in report.model_map.iter().enumerate() {
        println!("model {i}: mAP {:.4}", ap.unwrap_or(0.0));
    }
    println!(
        "ensemble of {}: mAP {:.4}",
        report.num_models,
        report.ensemble_map.unwrap_or(0.0)
    );
    for w in &run.manifest().warnings {
        println!("warning: {w}");
    }
    drop(run);
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}

#[allow(dead_code)]
fn main() -> pseudo_curator::Result<()> {
    run_example()
}
