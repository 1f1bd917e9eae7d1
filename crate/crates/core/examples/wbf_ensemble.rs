// Weighted boxes fusion of several detectors' outputs. Clusters seen by
// fewer models are down-weighted.

use pseudo_curator::wbf::{fuse_image, WbfConfig};
use pseudo_curator::{BoundingBox, Detection};

fn det(score: f64, x0: f64, x1: f64) -> Detection {
    Detection::new(1, 0, score, BoundingBox::try_new(x0, 0.0, x1, 10.0).unwrap())
}

pub fn run_example() -> pseudo_curator::Result<()> {
    let per_model = vec![
        vec![det(0.9, 0.0, 10.0), det(0.4, 100.0, 110.0)],
        vec![det(0.6, 1.0, 11.0)],
        vec![det(0.3, 2.0, 12.0)],
    ];
    let fused = fuse_image(&per_model, &WbfConfig::default())?;
    for d in &fused {
        println!(
            "fused box x=[{:.3}, {:.3}] score {:.4}",
            d.bbox.x_min, d.bbox.x_max, d.score
        );
    }
    // Three members: coordinates are score-weighted, score is the plain mean.
    let x0 = (0.9 * 0.0 + 0.6 * 1.0 + 0.3 * 2.0) / 1.8;
    assert!((fused[0].bbox.x_min - x0).abs() < 1e-12);
    assert!((fused[0].score - 0.6).abs() < 1e-12);
    // One member out of three models.
    assert!((fused[1].score - 0.4 / 3.0).abs() < 1e-12);

    let weighted = WbfConfig {
        model_weights: vec![2.0, 1.0, 1.0],
        ..Default::default()
    };
    let fused = fuse_image(&per_model, &weighted)?;
    println!("with model 0 weighted twice: top score {:.4}", fused[0].score);
    Ok(())
}

#[allow(dead_code)]
fn main() -> pseudo_curator::Result<()> {
    run_example()
}
