//! Runs a scripted detector with a size-dependent miss rate over synthetic
//! scenes, once on the full image and once with a zoomed second stage on the
//! predicted density crops.
//!
//!     cargo run --release --example oracle_multistage -- [num_scenes] [seed]

use cropzoom::dataset::{generate_synthetic_dataset, SceneConfig};
use cropzoom::detect::{OracleDetector, OracleNoiseModel};
use cropzoom::experiment::compare_stages;
use cropzoom::infer::InferenceConfig;
use cropzoom::metrics::EvalConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let num_scenes = args.next().map(|a| a.parse()).transpose()?.unwrap_or(100);
    let seed = args.next().map(|a| a.parse()).transpose()?.unwrap_or(7);

    let scene_cfg = SceneConfig {
        num_scenes,
        seed,
        ..SceneConfig::default()
    };
    let scenes: Vec<_> = generate_synthetic_dataset(&scene_cfg)?.into_iter().map(|(_, s)| s).collect();
    let oracle = OracleDetector::new(
        OracleNoiseModel {
            seed,
            ..OracleNoiseModel::default()
        },
        scene_cfg.num_classes,
    );

    let t = std::time::Instant::now();
    let cmp = compare_stages(&oracle, &scenes, &InferenceConfig::default(), &EvalConfig::default())?;
    println!("{:<14} {:>8} {:>8} {:>12}", "", "AP", "AP_s", "recall_s@.5");
    for (name, r, rec) in [
        ("single-stage", &cmp.single, cmp.small_recall_single),
        ("multistage", &cmp.multi, cmp.small_recall_multi),
    ] {
        println!(
            "{name:<14} {:>8.4} {:>8.4} {:>12.4}",
            r.ap.unwrap_or(0.0),
            r.ap_s.unwrap_or(0.0),
            rec
        );
    }
    println!("crops per image {:.2}, {:.2}s", cmp.crops_per_image, t.elapsed().as_secs_f64());
    Ok(())
}
