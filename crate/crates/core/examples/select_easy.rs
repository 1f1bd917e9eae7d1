// Thresholds raw detections into pseudo-labels and ranks images by their
// mean confidence; the top fraction is the "easy" set.

use pseudo_curator::pseudo_labels::{fit_category_thresholds, make_pseudo_labels, select_easy};
use pseudo_curator::synth::{generate, SynthConfig};

pub fn run_example() -> pseudo_curator::Result<()> {
    let labeled = generate(&SynthConfig {
        rng_seed: 1,
        num_images: 100,
        ..Default::default()
    })?;
    let unlabeled = generate(&SynthConfig {
        rng_seed: 2,
        num_images: 200,
        first_image_id: 1000,
        ..Default::default()
    })?;
    // Keep as many boxes per category as the labeled set's density predicts.
    let raw = &unlabeled.model_detections[0];
    let thresholds = fit_category_thresholds(&labeled.ground_truth, raw, 100, 200)?;
    println!("fitted thresholds: {:?}", thresholds.per_category);

    let labels = make_pseudo_labels(raw, &thresholds);
    let sel = select_easy(&labels, 0.5)?;
    let hits = sel
        .easy_image_ids
        .iter()
        .filter(|id| unlabeled.planted_easy.contains(id))
        .count();
    println!(
        "selected {} easy images, {} of them planted easy ({:.1}%)",
        sel.easy_image_ids.len(),
        hits,
        100.0 * hits as f64 / sel.easy_image_ids.len() as f64
    );
    assert_eq!(
        sel.easy_image_ids.len() + sel.difficult_image_ids.len(),
        labels.len()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> pseudo_curator::Result<()> {
    run_example()
}
