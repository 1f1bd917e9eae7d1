// Learns a linear projection in which RoIs of the same object point the
// same way and RoIs of different objects are orthogonal.

use pseudo_curator::embed::{mean_pair_loss, pair_labels, train_embedding, EmbedConfig, EmbeddingMatrix};
use pseudo_curator::synth::generate_similarity_toy;

pub fn run_example() -> pseudo_curator::Result<()> {
    let rois = generate_similarity_toy(11, 50, 16, 5.0, 1.0)?;
    let first_image: Vec<_> = rois
        .iter()
        .filter(|r| r.image_id == rois[0].image_id)
        .cloned()
        .collect();
    let labels = pair_labels(&first_image, 0.7);
    println!(
        "image {}: {} pairs, {} positive",
        rois[0].image_id,
        labels.len(),
        labels.iter().filter(|p| p.y).count()
    );

    let cfg = EmbedConfig {
        learning_rate: 0.1,
        epochs: 200,
        rng_seed: 3,
        ..Default::default()
    };
    let identity = mean_pair_loss(&EmbeddingMatrix::identity(16, 16), &rois, &cfg)?;
    let out = train_embedding(&rois, &cfg)?;
    println!(
        "{} pairs; loss {:.4} -> {:.4} (identity projection: {:.4})",
        out.num_pairs, out.initial_loss, out.final_loss, identity
    );
    assert!(out.final_loss < out.initial_loss);
    assert!(!out.loss_increased);
    Ok(())
}

#[allow(dead_code)]
fn main() -> pseudo_curator::Result<()> {
    run_example()
}
