//! Density-crop labeling on a hand-made fixture and on a synthetic scene,
//! with both merge strategies.
//!
//!     cargo run --example crop_labeling

use cropzoom::croplab::{build_connections, label_density_clusters, CropParams, MergeStrategy};
use cropzoom::dataset::{SceneConfig, SceneSpec};
use cropzoom::geometry::{scale_box, Box};

fn main() -> Result<(), std::boxed::Box<dyn std::error::Error>> {
    let boxes = vec![
        Box::new(0.0, 0.0, 20.0, 20.0)?,
        Box::new(25.0, 0.0, 45.0, 20.0)?,
        Box::new(200.0, 200.0, 220.0, 220.0)?,
    ];
    let params = CropParams {
        sigma: 5.0,
        theta: 0.05,
        max_area_ratio: 0.5,
        merge_steps: 1,
        ..CropParams::default()
    };
    let scaled: Vec<_> = boxes
        .iter()
        .map(|b| scale_box(b, params.sigma, 500.0, 500.0))
        .collect::<Result<_, _>>()?;
    let graph = build_connections(&scaled, params.theta);
    println!("scaled IoU(0, 1) = {:.3}, connected: {}", graph.iou[0][1], graph.connected[0][1]);
    for c in label_density_clusters(&boxes, (500.0, 500.0), &params)? {
        println!("crop {:?} from boxes {:?}", c.crop.coords(), c.members);
    }

    let scene = SceneSpec::generate(&SceneConfig::default(), 1);
    println!(
        "\nscene 1: {} objects in {} generated clusters",
        scene.objects.len(),
        scene.clusters.len()
    );
    for strategy in [MergeStrategy::Component, MergeStrategy::Neighborhood] {
        let p = CropParams {
            strategy,
            ..CropParams::default()
        };
        let clusters = label_density_clusters(&scene.boxes(), scene.size(), &p)?;
        println!("{strategy:?}: {} crops", clusters.len());
        for c in clusters {
            let [x1, y1, x2, y2] = c.crop.coords();
            println!("  ({x1:.0}, {y1:.0}, {x2:.0}, {y2:.0}) with {} objects", c.members.len());
        }
    }
    Ok(())
}
