// Consensus of several models: a pseudo-label survives only when every
// model predicts a same-category box that overlaps it.

use pseudo_curator::intersection::{intersect_all, IntersectionConfig, ScoreCombine};
use pseudo_curator::{BoundingBox, Detection, ImagePseudoLabels};

fn det(score: f64, x: f64) -> Detection {
    Detection::new(1, 0, score, BoundingBox::try_new(x, 0.0, x + 10.0, 10.0).unwrap())
}

pub fn run_example() -> pseudo_curator::Result<()> {
    let a = vec![ImagePseudoLabels::new(1, vec![det(0.9, 0.0), det(0.8, 50.0)])];
    let b = vec![ImagePseudoLabels::new(1, vec![det(0.6, 1.0)])];
    let c = vec![ImagePseudoLabels::new(1, vec![det(0.7, 0.5), det(0.95, 50.0)])];

    let cfg = IntersectionConfig::default();
    let consensus = intersect_all(&[a.clone(), b.clone(), c.clone()], &cfg)?;
    for d in &consensus[0].detections {
        println!("kept box {:?} score {:.2}", d.bbox.to_xywh(), d.score);
    }
    assert_eq!(consensus[0].detections.len(), 1);
    assert_eq!(consensus[0].detections[0].score, 0.6);

    let max_cfg = IntersectionConfig {
        score_combine: ScoreCombine::GeometricMean,
        ..cfg
    };
    let consensus = intersect_all(&[a, b, c], &max_cfg)?;
    println!(
        "with geometric-mean combine: score {:.2}",
        consensus[0].detections[0].score
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> pseudo_curator::Result<()> {
    run_example()
}
