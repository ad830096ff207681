//! Box arithmetic used everywhere else: IoU, expansion, NMS and mapping
//! between a crop's upscaled frame and its parent image.
//!
//!     cargo run --example geometry_basics

use cropzoom::geometry::{enclosing_box, iou, nms, project, reproject, scale_box, Box, Detection};

fn main() -> Result<(), std::boxed::Box<dyn std::error::Error>> {
    let a = Box::new(0.0, 0.0, 10.0, 10.0)?;
    let b = Box::new(5.0, 0.0, 15.0, 10.0)?;
    println!("iou(a, b) = {:.4}", iou(&a, &b));
    println!("a expanded by 5 in a 12x12 image: {:?}", scale_box(&a, 5.0, 12.0, 12.0)?.coords());
    println!("enclosing(a, b) = {:?}", enclosing_box(&[a, b])?.coords());

    let dets = vec![
        Detection::new(a, 0, 0.9)?,
        Detection::new(Box::new(1.0, 0.0, 11.0, 10.0)?, 0, 0.8)?,
        Detection::new(b, 0, 0.7)?,
        Detection::new(Box::new(1.0, 0.0, 11.0, 10.0)?, 1, 0.6)?,
    ];
    for d in nms(&dets, 0.5) {
        println!("kept class {} score {:.1} {:?}", d.class_id, d.score, d.bbox.coords());
    }

    let crop = Box::new(100.0, 100.0, 300.0, 200.0)?;
    let in_crop = Box::new(40.0, 20.0, 80.0, 60.0)?;
    let parent = reproject(&in_crop, &crop, (400.0, 200.0))?;
    println!("crop frame {:?} -> parent {:?}", in_crop.coords(), parent.coords());
    println!("and back {:?}", project(&parent, &crop, (400.0, 200.0))?.coords());
    Ok(())
}
