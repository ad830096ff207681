//! COCO-style AP, the error-type profile and a multi-run comparison on a
//! small hand-made case.
//!
//!     cargo run --example evaluation_and_errors

use cropzoom::geometry::{Box, Detection};
use cropzoom::metrics::{build_eval_set, compare_runs, evaluate, EvalConfig};

fn main() -> Result<(), std::boxed::Box<dyn std::error::Error>> {
    let gts = vec![
        (1, Box::new(10.0, 10.0, 30.0, 30.0)?, 0),
        (1, Box::new(50.0, 50.0, 150.0, 150.0)?, 1),
        (2, Box::new(0.0, 0.0, 40.0, 40.0)?, 0),
    ];
    let dets = vec![
        // correct
        (1, Detection::new(Box::new(11.0, 10.0, 31.0, 30.0)?, 0, 0.9)?),
        // right place, wrong class
        (1, Detection::new(Box::new(52.0, 50.0, 150.0, 148.0)?, 0, 0.8)?),
        // duplicate of the first
        (1, Detection::new(Box::new(10.0, 11.0, 30.0, 31.0)?, 0, 0.7)?),
        // poorly localized
        (2, Detection::new(Box::new(20.0, 20.0, 60.0, 60.0)?, 0, 0.6)?),
        // nothing there
        (2, Detection::new(Box::new(200.0, 200.0, 220.0, 220.0)?, 1, 0.5)?),
    ];
    let set = build_eval_set(&gts, &[1, 2], &dets, 2)?;
    let report = evaluate(&set, 2, &EvalConfig::default());
    print!("{}", report.to_table());

    let perfect: Vec<_> = gts
        .iter()
        .map(|&(id, b, c)| Ok((id, Detection::new(b, c, 1.0)?)))
        .collect::<Result<_, cropzoom::error::GeometryError>>()?;
    let best = evaluate(&build_eval_set(&gts, &[1, 2], &perfect, 2)?, 2, &EvalConfig::default());
    let cmp = compare_runs(&[("noisy".into(), report), ("perfect".into(), best)])?;
    println!();
    print!("{}", cmp.to_table());
    Ok(())
}
