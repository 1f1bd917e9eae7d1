// Scores a detector against ground truth: per-image precision/recall, the
// easy/difficult split, and mAP.

use pseudo_curator::evaluation::{difficulty_report, mean_average_precision};
use pseudo_curator::synth::{generate, SynthConfig};

pub fn run_example() -> pseudo_curator::Result<()> {
    let data = generate(&SynthConfig {
        rng_seed: 5,
        num_images: 200,
        ..Default::default()
    })?;
    let preds = &data.model_detections[0];
    let summary = difficulty_report(
        preds,
        &data.ground_truth,
        data.image_ids.iter().copied(),
        0.5,
        0.0,
    );
    let agree = summary
        .reports
        .iter()
        .filter(|r| r.is_easy == data.planted_easy.contains(&r.image_id))
        .count();
    println!("easy fraction {:.3}", summary.easy_fraction);
    println!("agreement with planted split: {agree}/{}", summary.reports.len());
    for r in summary.reports.iter().take(5) {
        println!(
            "  image {:>3}: recall {:.2} precision {:.2} {}",
            r.image_id,
            r.recall,
            r.precision,
            if r.is_easy { "easy" } else { "difficult" }
        );
    }
    let map = mean_average_precision(preds, &data.ground_truth, 0.5).unwrap_or(0.0);
    println!("mAP@0.5 {map:.4}");
    assert!(summary.easy_fraction > 0.0 && summary.easy_fraction < 1.0);
    Ok(())
}

#[allow(dead_code)]
fn main() -> pseudo_curator::Result<()> {
    run_example()
}
