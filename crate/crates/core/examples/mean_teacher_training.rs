//! One mean-teacher run with density crops on labeled and unlabeled images:
//! burn-in, pseudo-labeling, crop discovery, checkpoints and the per
//! iteration history.
//!
//!     cargo run --release --example mean_teacher_training -- [seed]

use cropzoom::experiment::{evaluate_backend, BenchmarkConfig, Variant};
use cropzoom::detect::{ToyDetector, ToyModel};
use cropzoom::teacher::{read_checkpoint, write_report, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let bench = BenchmarkConfig::default().seeded(seed);
    let mut cfg = Variant::SsodCropLU.trainer_config(&bench.trainer);
    cfg.checkpoint_every = 600;
    let data = bench.training_data(Variant::SsodCropLU)?;
    let model = ToyModel::new(bench.model.clone());
    println!(
        "{} labeled and {} unlabeled scenes; burn-in until {}, crop discovery from {}",
        data.labeled.len(),
        data.unlabeled.len(),
        cfg.burn_in_iters,
        cfg.crop_start_iter
    );

    let dir = tempfile::tempdir()?;
    let mut trainer = Trainer::new(cfg.clone(), &model, &data)?;
    println!("{} labeled views including crops and flips", trainer.labeled_views());
    let mut state = trainer.initial_state();
    trainer.run(&mut state, cfg.max_iters, Some(dir.path()))?;

    let mut tsv = Vec::new();
    write_report(&state.history, &mut tsv)?;
    let text = String::from_utf8(tsv)?;
    for line in text.lines().take(1).chain(text.lines().skip(1).step_by(300)) {
        println!("{line}");
    }
    println!(
        "pseudo boxes per unlabeled image: {:.2} before discovery, {:.2} after; {} cached crops",
        state.mean_pseudo_per_image(cfg.burn_in_iters..cfg.crop_start_iter),
        state.mean_pseudo_per_image(cfg.crop_start_iter..usize::MAX),
        state.cached_crops()
    );

    let mut ckpts: Vec<_> = std::fs::read_dir(dir.path())?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    ckpts.sort();
    if let Some(last) = ckpts.last() {
        let restored = read_checkpoint(last)?;
        println!("restored {} at iteration {}", last.display(), restored.iteration);
    }

    let det = ToyDetector::new(model, state.teacher.clone(), true);
    let report = evaluate_backend(&det, &bench.test_scenes()?, &bench.inference, &bench.eval, true)?;
    print!("{}", report.to_table());
    Ok(())
}
