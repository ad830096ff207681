//! The command-line workflow end to end in a scratch directory: generate
//! data, split, train, run inference, evaluate and replay from a manifest.
//!
//!     cargo run --release --example cli_workflow

use cropzoom::cli::run_in;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let cwd = dir.path();
    let steps: &[&[&str]] = &[
        &["dataset", "gen", "--out", "data", "--num-scenes", "40"],
        &["dataset", "split", "--annotations", "data/annotations.json", "--out", "split.txt"],
        &["crops", "label", "--annotations", "data/annotations.json", "--out", "with_crops.json"],
        &[
            "train", "--scenes", "data/scenes.jsonl", "--split", "split.txt", "--out", "run",
            "--crop-labeled", "true", "--crop-unlabeled", "true",
        ],
        &["infer", "--scenes", "data/scenes.jsonl", "--checkpoint", "run/final.ckpt", "--out", "dets.jsonl"],
        &["eval", "--annotations", "data/annotations.json", "--detections", "dets.jsonl", "--out", "eval.json"],
        &["infer", "--scenes", "data/scenes.jsonl", "--oracle", "--out", "oracle.jsonl"],
        &["eval", "--annotations", "data/annotations.json", "--detections", "oracle.jsonl", "--out", "oracle.json"],
        &["report", "toy=eval.json", "oracle=oracle.json"],
        &["replay", "run/manifest.json", "--workers", "1"],
    ];
    for args in steps {
        println!("$ cropzoom {}", args.join(" "));
        run_in(std::iter::once("cropzoom").chain(args.iter().copied()), cwd)?;
        println!();
    }
    println!("{}", std::fs::read_to_string(cwd.join("run/manifest.json"))?.lines().take(12).collect::<Vec<_>>().join("\n"));
    Ok(())
}
