// Box geometry: IoU, IoF and the COCO `[x, y, w, h]` conversion.

use pseudo_curator::{iof, iou, BoundingBox};

pub fn run_example() -> pseudo_curator::Result<()> {
    let outer = BoundingBox::try_new(0.0, 0.0, 100.0, 100.0)?;
    let inner = BoundingBox::from_xywh(10.0, 10.0, 50.0, 50.0)?;
    let shifted = BoundingBox::try_new(50.0, 0.0, 150.0, 100.0)?;

    println!("iou(outer, inner)   = {:.4}", iou(&outer, &inner));
    println!("iof(inner, outer)   = {:.4}", iof(&inner, &outer));
    println!("iou(outer, shifted) = {:.4}", iou(&outer, &shifted));
    println!("inner as xywh       = {:?}", inner.to_xywh());

    assert_eq!(iof(&inner, &outer), 1.0);
    assert!((iou(&outer, &shifted) - 1.0 / 3.0).abs() < 1e-12);
    assert!(BoundingBox::try_new(5.0, 0.0, 1.0, 1.0).is_err());
    Ok(())
}

#[allow(dead_code)]
fn main() -> pseudo_curator::Result<()> {
    run_example()
}
