//! Trains the four variants on the synthetic benchmark and prints the final
//! teacher AP of each, plus pseudo-label counts after crop discovery.
//!
//! Usage: cargo run --release --example semi_supervised_benchmark [seeds]

use std::time::Instant;

use cropzoom::experiment::{run_variant, BenchmarkConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args().nth(1).map_or(Ok(3), |s| s.parse())?;
    let bench = BenchmarkConfig::default();
    let start = bench.trainer.crop_start_iter;
    for seed in 0..seeds {
        for v in Variant::ALL {
            let t = Instant::now();
            let r = run_variant(&bench, v, seed)?;
            let ap = |x: Option<f64>| x.map_or("-".into(), |v| format!("{:.2}", 100.0 * v));
            println!(
                "seed {seed} {:<16} AP {:>6} AP50 {:>6} APs {:>6} APm {:>6} APl {:>6} pseudo/img {:6.2} crops {:4} ({:.1}s)",
                v.to_string(),
                ap(r.report.ap),
                ap(r.report.ap50),
                ap(r.report.ap_s),
                ap(r.report.ap_m),
                ap(r.report.ap_l),
                r.state.mean_pseudo_per_image(start..usize::MAX),
                r.state.cached_crops(),
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
