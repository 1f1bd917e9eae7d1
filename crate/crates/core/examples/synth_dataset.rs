// Generates a seeded synthetic corpus with a planted easy/difficult split
// and writes it in the on-disk formats the CLI reads.

use pseudo_curator::io::{self, CocoDataset};
use pseudo_curator::synth::{generate, SynthConfig};

pub fn run_example() -> pseudo_curator::Result<()> {
    let cfg = SynthConfig {
        rng_seed: 9,
        num_images: 20,
        ..Default::default()
    };
    let data = generate(&cfg)?;
    assert_eq!(data, generate(&cfg)?);
    println!(
        "{} images, {} objects, {} planted easy, {} RoIs",
        data.image_ids.len(),
        data.ground_truth.len(),
        data.planted_easy.len(),
        data.roi_features.len()
    );
    for (m, dets) in data.model_detections.iter().enumerate() {
        println!("model {m}: {} detections", dets.len());
    }

    let dir = std::env::temp_dir().join(format!("pseudo-curator-synth-{}", std::process::id()));
    io::write_coco(
        &dir.join("ground_truth.json"),
        &CocoDataset::from_ground_truth(&data.image_ids, &data.ground_truth),
    )?;
    io::write_detections(&dir.join("model_0.json"), &data.model_detections[0])?;
    io::write_roi_features(&dir.join("rois.jsonl"), &data.roi_features)?;
    let back = io::read_detections(&dir.join("model_0.json"))?;
    assert_eq!(back.len(), data.model_detections[0].len());
    println!("wrote {}", dir.display());
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}

#[allow(dead_code)]
fn main() -> pseudo_curator::Result<()> {
    run_example()
}
