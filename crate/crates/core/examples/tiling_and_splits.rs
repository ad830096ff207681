//! Dataset preparation: tiling a large image, a seeded labeled split, and
//! crop augmentation that adds upscaled crop images to the training set.
//!
//!     cargo run --example tiling_and_splits

use std::collections::BTreeMap;

use cropzoom::croplab::{label_density_crops, CropParams};
use cropzoom::dataset::{
    augment_with_crops, generate_synthetic_dataset, split_dataset, tile_image, Annotation, ImageRecord, Provenance,
    SceneConfig, UpscalePolicy,
};
use cropzoom::geometry::{reproject, Box};

fn main() -> Result<(), std::boxed::Box<dyn std::error::Error>> {
    let mut big = ImageRecord::new(1, 2500.0, 2500.0);
    big.annotations.push(Annotation::gt(Box::new(1100.0, 1100.0, 1140.0, 1130.0)?, 0));
    big.annotations.push(Annotation::gt(Box::new(1480.0, 200.0, 1540.0, 240.0)?, 1));
    let mut next_id = 100;
    let out = tile_image(&big, 1500.0, 1000.0, &mut next_id)?;
    println!("{} tiles, {} annotations lost", out.tiles.len(), out.lost);
    for t in &out.tiles {
        if let Provenance::Tile { offset, .. } = t.provenance {
            let anns: Vec<_> = t.annotations.iter().map(|a| a.bbox.coords()).collect();
            println!("  tile {} at {:?}: {:?}", t.image_id, offset, anns);
        }
    }

    let scenes = generate_synthetic_dataset(&SceneConfig {
        num_scenes: 10,
        ..SceneConfig::default()
    })?;
    let ids: Vec<u64> = scenes.iter().map(|(r, _)| r.image_id).collect();
    let split = split_dataset(&ids, 0.2, 42)?;
    println!("\nlabeled {:?}, unlabeled {}", split.labeled, split.unlabeled.len());

    let labeled: Vec<ImageRecord> = scenes
        .iter()
        .filter(|(r, _)| split.labeled.contains(&r.image_id))
        .map(|(r, _)| r.clone())
        .collect();
    let params = CropParams::default();
    let crops: BTreeMap<u64, Vec<Box>> = labeled
        .iter()
        .map(|r| Ok((r.image_id, label_density_crops(&r.base_boxes(3), r.size(), &params)?)))
        .collect::<Result<_, cropzoom::error::GeometryError>>()?;
    let policy = UpscalePolicy::default();
    let augmented = augment_with_crops(&labeled, &crops, &policy, 3);
    for child in augmented.iter().skip(labeled.len()) {
        if let Provenance::Crop {
            parent_id,
            crop_box,
            upscale_size,
        } = &child.provenance
        {
            let worst = child
                .annotations
                .iter()
                .filter_map(|a| reproject(&a.bbox, crop_box, *upscale_size).ok())
                .map(|b| {
                    let parent = augmented.iter().find(|r| r.image_id == *parent_id).expect("parent kept");
                    parent
                        .annotations
                        .iter()
                        .map(|p| {
                            p.bbox
                                .coords()
                                .iter()
                                .zip(b.coords())
                                .map(|(x, y)| (x - y).abs())
                                .fold(0.0, f64::max)
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max);
            println!(
                "crop image {} of {parent_id}: {:.0}x{:.0}, {} objects, reprojection error {worst:.1e}",
                child.image_id,
                upscale_size.0,
                upscale_size.1,
                child.annotations.len()
            );
        }
    }
    Ok(())
}
