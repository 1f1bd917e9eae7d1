// Soft sampling of background RoIs. Background that overlaps an annotated
// object is reliable and keeps its weight; background far from any
// annotation sits at the floor `a`; background that looks like an annotated
// object but sits elsewhere is probably a missed annotation and is
// suppressed.

use pseudo_curator::reweight::{build_weight_table, overlap_weight, ReweightConfig, RoiFeatureRecord};
use pseudo_curator::BoundingBox;

fn roi(roi_id: u64, x: f64, is_positive: bool, feature: Vec<f64>) -> RoiFeatureRecord {
    RoiFeatureRecord {
        roi_id,
        image_id: 7,
        bbox: BoundingBox::try_new(x, 0.0, x + 40.0, 40.0).unwrap(),
        is_positive,
        feature,
    }
}

pub fn run_example() -> pseudo_curator::Result<()> {
    let cfg = ReweightConfig::default();
    for v in [0.0, 0.25, 0.5, 0.75, 1.0] {
        println!("overlap weight at IoU {v:.2}: {:.6}", overlap_weight(v, &cfg));
    }

    let rois = vec![
        roi(1, 0.0, true, vec![1.0, 0.0, 0.0]),
        // Overlaps the annotated object.
        roi(2, 2.0, false, vec![0.98, 0.05, 0.0]),
        // Far away, looks like the object: an unannotated twin.
        roi(3, 300.0, false, vec![0.99, 0.0, 0.1]),
        // Far away, unrelated appearance: true background.
        roi(4, 500.0, false, vec![0.0, 0.0, 1.0]),
    ];
    let table = build_weight_table(&rois, &cfg)?;
    println!("roi  iou_max      D          weight");
    for r in &table.rows {
        println!(
            "{:>3}  {:.4}  {:.3e}  {:.3e}",
            r.roi_id, r.iou_max, r.similarity_uncertainty, r.weight
        );
    }
    let w: Vec<f64> = table.rows.iter().map(|r| r.weight).collect();
    assert_eq!(w[0], 1.0);
    assert!(w[1] > 0.99);
    assert!(w[2] < 1e-6);
    assert!((w[3] - cfg.a).abs() < 1e-6);
    Ok(())
}

#[allow(dead_code)]
fn main() -> pseudo_curator::Result<()> {
    run_example()
}
