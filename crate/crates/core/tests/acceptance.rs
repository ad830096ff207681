//! Acceptance gate: one PASS/FAIL line per criterion. Run with
//! `cargo test --release --test acceptance -- --nocapture` to see the lines.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use cropzoom::cli::run_in;
use cropzoom::croplab::{label_density_clusters, CropParams, MergeStrategy};
use cropzoom::dataset::{generate_synthetic_dataset, SceneConfig};
use cropzoom::detect::{loss_sup, loss_unsup, Layout, OracleDetector, OracleNoiseModel, PseudoSample, Sample, WeightVector};
use cropzoom::experiment::{compare_stages, run_variant, BenchmarkConfig, Variant};
use cropzoom::geometry::{iou, nms, project, reproject, Detection};
use cropzoom::infer::InferenceConfig;
use cropzoom::manifest::RunManifest;
use cropzoom::metrics::{build_eval_set, evaluate_ap, EvalConfig};
use cropzoom::seed;
use cropzoom::teacher::{ema_update, Trainer, TrainingData};
use rand::Rng;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        name,
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

/// Criteria that cannot be met by construction, with the reason printed.
const UNATTAINABLE: &[&str] = &["absolute_results"];

fn absolute_results() -> Outcome {
    outcome(
        "absolute_results",
        false,
        "published Faster R-CNN numbers need GPU-scale training on real aerial imagery; \
         this toolkit reproduces the trends below with a linear toy detector instead",
    )
}

fn crop_labeling_matches_union_find() -> Outcome {
    let t = Instant::now();
    let mut rng = seed::rng(11, &[1]);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(100.0..600.0), rng.random_range(100.0..600.0));
        let n = rng.random_range(0..=20);
        let boxes: Vec<_> = (0..n).map(|_| random_box(&mut rng, w, h, 4.0, 60.0)).collect();
        let sigma = rng.random_range(0.0..=20.0);
        let theta = [0.05, 0.1, 0.3][rng.random_range(0..3)];
        let params = CropParams {
            merge_steps: 1,
            sigma,
            theta,
            max_area_ratio: 1.0,
            min_cluster: 2,
            strategy: MergeStrategy::Component,
        };
        let mut got: Vec<(Vec<usize>, [f64; 4])> = label_density_clusters(&boxes, (w, h), &params)
            .unwrap()
            .into_iter()
            .map(|c| {
                let mut m = c.members;
                m.sort();
                (m, c.crop.coords())
            })
            .collect();
        got.sort_by(|a, b| a.0.cmp(&b.0));
        if got != union_find_clusters(&boxes, (w, h), sigma, theta, 2) {
            mismatches += 1;
        }
    }
    let el = t.elapsed();
    outcome(
        "crop_labeling_oracle",
        mismatches == 0 && el < Duration::from_secs(5),
        format!("{mismatches}/1000 instances differ from union-find, {}", secs(el)),
    )
}

fn geometry_suite() -> Outcome {
    let mut rng = seed::rng(12, &[1]);
    let mut nms_bad = 0;
    for _ in 0..20 {
        let dets: Vec<Detection> = (0..200)
            .map(|_| {
                let b = random_box(&mut rng, 300.0, 300.0, 5.0, 80.0);
                let score = (rng.random_range(0..50) as f64) / 50.0 + 0.01;
                Detection::new(b, rng.random_range(0..3), score.min(1.0)).unwrap()
            })
            .collect();
        let thr = rng.random_range(0.2..0.8);
        if nms(&dets, thr) != brute_nms(&dets, thr) {
            nms_bad += 1;
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let crop = random_box(&mut rng, 1000.0, 1000.0, 10.0, 400.0);
        let size = (rng.random_range(50.0..2000.0), rng.random_range(50.0..2000.0));
        let p = random_box(&mut rng, size.0, size.1, 1.0, 300.0);
        let back = project(&reproject(&p, &crop, size).unwrap(), &crop, size).unwrap();
        for (a, b) in p.coords().iter().zip(back.coords()) {
            worst = worst.max((a - b).abs());
        }
    }
    let mut iou_bad = 0;
    for _ in 0..10_000 {
        let a = random_box(&mut rng, 100.0, 100.0, 0.5, 60.0);
        let b = random_box(&mut rng, 100.0, 100.0, 0.5, 60.0);
        let (x, y) = (iou(&a, &b), iou(&b, &a));
        if x != y || !(0.0..=1.0).contains(&x) || (iou(&a, &a) - 1.0).abs() > 1e-12 || (x - ref_iou(&a, &b)).abs() > 1e-12
        {
            iou_bad += 1;
        }
    }
    outcome(
        "geometry_suite",
        nms_bad == 0 && worst < 1e-9 && iou_bad == 0,
        format!("NMS mismatches {nms_bad}/20 (200 dets each), reproject max error {worst:.1e}, IoU violations {iou_bad}/10000"),
    )
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn gradient_checks() -> Outcome {
    let mut rng = seed::rng(13, &[1]);
    let mut worst = 0.0f64;
    let mut unsup_reg_nonzero = 0;
    let h = 1e-6;
    for _ in 0..100 {
        let layout = Layout {
            classes: rng.random_range(2..6),
            features: rng.random_range(2..9),
        };
        let values: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = WeightVector::from_values(layout, values).unwrap();
        let feats = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..layout.features).map(|_| rng.random_range(-2.0..2.0)).collect()
        };
        let n = rng.random_range(1..6);
        let sup: Vec<Sample> = (0..n)
            .map(|_| Sample {
                features: feats(&mut rng),
                class: rng.random_range(0..layout.classes),
                offsets: rng
                    .random_bool(0.7)
                    .then(|| [0; 4].map(|_| rng.random_range(-1.0..1.0))),
            })
            .collect();
        let unsup: Vec<PseudoSample> = (0..n)
            .map(|_| PseudoSample {
                features: feats(&mut rng),
                class: rng.random_range(0..layout.classes),
            })
            .collect();
        let beta = 0.1;
        let gs = loss_sup(&w, &sup, beta).unwrap().grad;
        let gu = loss_unsup(&w, &unsup).unwrap();
        let reg = layout.classifier_len()..layout.len();
        if gu.grad[reg].iter().any(|&g| g != 0.0) {
            unsup_reg_nonzero += 1;
        }
        for i in 0..layout.len() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus.values[i] += h;
            minus.values[i] -= h;
            let ns = (loss_sup(&plus, &sup, beta).unwrap().loss - loss_sup(&minus, &sup, beta).unwrap().loss) / (2.0 * h);
            let nu = (loss_unsup(&plus, &unsup).unwrap().loss - loss_unsup(&minus, &unsup).unwrap().loss) / (2.0 * h);
            worst = worst.max(relative_error(gs[i], ns)).max(relative_error(gu.grad[i], nu));
        }
    }
    outcome(
        "gradient_checks",
        worst < 1e-4 && unsup_reg_nonzero == 0,
        format!("max relative error {worst:.2e} over 100 draws, non-zero unsup regressor gradients in {unsup_reg_nonzero} draws"),
    )
}

fn ema_contract() -> Outcome {
    let mut rng = seed::rng(14, &[1]);
    let layout = Layout {
        classes: 5,
        features: 16,
    };
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
        WeightVector::from_values(layout, (0..layout.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let student = draw(&mut rng);
    let mut teacher = draw(&mut rng);
    let norm = |a: &WeightVector, b: &WeightVector| {
        a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let alpha = 0.9996;
    let d0 = norm(&teacher, &student);
    let mut worst = 0.0f64;
    for k in 1..=5000 {
        teacher = ema_update(&teacher, &student, alpha).unwrap();
        if k % 250 == 0 || k < 10 {
            worst = worst.max((norm(&teacher, &student) - alpha.powi(k) * d0).abs());
        }
    }
    let scalar = ema_update(
        &WeightVector::from_values(Layout { classes: 2, features: 1 }, vec![1.0; 6]).unwrap(),
        &WeightVector::zeros(Layout { classes: 2, features: 1 }),
        alpha,
    )
    .unwrap();
    let default_alpha = cropzoom::teacher::TrainerConfig::default().alpha;
    outcome(
        "ema_contract",
        worst <= 1e-12 && scalar.values[0] == 0.9996 && default_alpha == 0.9996,
        format!("max |dist - alpha^k d0| = {worst:.1e} up to k = 5000, default alpha {default_alpha}"),
    )
}

fn ap_evaluator() -> Outcome {
    let t = Instant::now();
    let mut rng = seed::rng(15, &[1]);
    let cfg = EvalConfig::default();
    let thrs = coco_thresholds();
    let mut perfect_ok = true;
    let mut worst = 0.0f64;
    let mut none_mismatch = 0;
    for inst in 0..200 {
        let images: Vec<u64> = (1..=rng.random_range(1..4)).collect();
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for &img in &images {
            for c in 0..2 {
                for _ in 0..rng.random_range(0..4) {
                    let side: f64 = [20.0, 32.0, 50.0, 96.0, 120.0][rng.random_range(0..5)] * rng.random_range(0.8..1.2);
                    let side = if rng.random_bool(0.2) { side.round() } else { side };
                    let x = rng.random_range(0.0..200.0);
                    let y = rng.random_range(0.0..200.0);
                    gts.push((img, rect(x, y, x + side, y + side), c));
                }
                let mine: Vec<_> = gts.iter().filter(|g| g.0 == img && g.2 == c).map(|g| g.1).collect();
                for _ in 0..rng.random_range(0..5) {
                    let b = if !mine.is_empty() && rng.random_bool(0.7) {
                        let g = mine[rng.random_range(0..mine.len())].coords();
                        let s = (g[2] - g[0]) * 0.25;
                        let dx = rng.random_range(-s..s);
                        let dy = rng.random_range(-s..s);
                        rect(g[0] + dx, g[1] + dy, g[2] + dx + rng.random_range(-s..s).max(1.0 - s), g[3] + dy)
                    } else {
                        random_box(&mut rng, 300.0, 300.0, 10.0, 130.0)
                    };
                    let score = rng.random_range(1..=10) as f64 / 10.0;
                    dets.push((img, Detection::new(b, c, score).unwrap()));
                }
            }
        }
        let max_dets = if inst % 5 == 0 { 2 } else { 100 };
        let ecfg = EvalConfig {
            max_detections: max_dets,
            ..cfg.clone()
        };
        let set = build_eval_set(&gts, &images, &dets, 2).unwrap();
        let got = evaluate_ap(&set, 2, &ecfg);
        let pairs = [
            (got.ap, ref_ap(&images, &gts, &dets, 2, &thrs, ALL, max_dets)),
            (got.ap50, ref_ap(&images, &gts, &dets, 2, &[0.5], ALL, max_dets)),
            (got.ap75, ref_ap(&images, &gts, &dets, 2, &[0.75], ALL, max_dets)),
            (got.ap_s, ref_ap(&images, &gts, &dets, 2, &thrs, SMALL, max_dets)),
            (got.ap_m, ref_ap(&images, &gts, &dets, 2, &thrs, MEDIUM, max_dets)),
            (got.ap_l, ref_ap(&images, &gts, &dets, 2, &thrs, LARGE, max_dets)),
        ];
        for (a, b) in pairs {
            match (a, b) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => none_mismatch += 1,
            }
        }
        if !gts.is_empty() {
            let perfect: Vec<_> = gts
                .iter()
                .map(|&(i, b, c)| (i, Detection::new(b, c, 0.9).unwrap()))
                .collect();
            let p = evaluate_ap(&build_eval_set(&gts, &images, &perfect, 2).unwrap(), 2, &cfg);
            perfect_ok &= p.ap == Some(1.0) && p.ap50 == Some(1.0);
        }
    }
    let el = t.elapsed();
    outcome(
        "ap_evaluator",
        perfect_ok && worst <= 1e-9 && none_mismatch == 0 && el < Duration::from_secs(10),
        format!(
            "perfect detections give exactly 1.0: {perfect_ok}; max deviation from exhaustive reference {worst:.1e} \
             on 200 instances ({none_mismatch} defined/undefined mismatches), {}",
            secs(el)
        ),
    )
}

fn multistage_trend() -> Outcome {
    let t = Instant::now();
    let scene_cfg = SceneConfig {
        num_scenes: 100,
        seed: 2024,
        ..SceneConfig::default()
    };
    let scenes: Vec<_> = generate_synthetic_dataset(&scene_cfg)
        .unwrap()
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let oracle = OracleDetector::new(
        OracleNoiseModel {
            seed: 2024,
            ..OracleNoiseModel::default()
        },
        scene_cfg.num_classes,
    );
    let cmp = compare_stages(&oracle, &scenes, &InferenceConfig::default(), &EvalConfig::default()).unwrap();
    let el = t.elapsed();
    let gain = cmp.small_recall_multi - cmp.small_recall_single;
    let (a1, a2) = (cmp.single.ap.unwrap_or(0.0), cmp.multi.ap.unwrap_or(0.0));
    outcome(
        "multistage_trend",
        gain >= 0.15 && a2 > a1 && el < Duration::from_secs(60),
        format!(
            "small recall {:.3} -> {:.3} (+{gain:.3}), AP {:.4} -> {:.4}, {}",
            cmp.small_recall_single,
            cmp.small_recall_multi,
            a1,
            a2,
            secs(el)
        ),
    )
}

fn pseudo_label_trend(bench: &BenchmarkConfig) -> Outcome {
    let n = bench.trainer.crop_start_iter;
    let mut wins = 0;
    let mut cells = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in 0..3 {
        let t = Instant::now();
        let with = run_variant(bench, Variant::SsodCropLU, seed).unwrap();
        let without = run_variant(bench, Variant::SsodCropL, seed).unwrap();
        slowest = slowest.max(t.elapsed());
        let plain = run_variant(bench, Variant::Ssod, seed).unwrap();
        let a = with.state.mean_pseudo_per_image(n..usize::MAX);
        let b = without.state.mean_pseudo_per_image(n..usize::MAX);
        let c = plain.state.mean_pseudo_per_image(n..usize::MAX);
        if a > b {
            wins += 1;
        }
        cells.push(format!("seed {seed}: {a:.2} vs {b:.2} (no crops at all: {c:.2})"));
    }
    outcome(
        "pseudo_label_trend",
        wins == 3 && slowest < Duration::from_secs(600),
        format!(
            "pseudo boxes per unlabeled image from iteration {n}, discovery on vs off: {}; {wins}/3 seeds, slowest pair {}",
            cells.join(", "),
            secs(slowest)
        ),
    )
}

fn semi_supervised_trend(bench: &BenchmarkConfig) -> Outcome {
    let mut outer = 0;
    let mut full = 0;
    let mut cells = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in 0..3 {
        let mut ap = Vec::new();
        for v in Variant::ALL {
            let t = Instant::now();
            let r = run_variant(bench, v, seed).unwrap();
            slowest = slowest.max(t.elapsed());
            ap.push(r.report.ap.unwrap_or(0.0));
        }
        if ap[0] < ap[1] && ap[1] < ap[3] {
            outer += 1;
        }
        if ap[0] < ap[1] && ap[1] < ap[2] && ap[2] < ap[3] {
            full += 1;
        }
        cells.push(format!(
            "seed {seed}: {:.2} / {:.2} / {:.2} / {:.2}",
            100.0 * ap[0],
            100.0 * ap[1],
            100.0 * ap[2],
            100.0 * ap[3]
        ));
    }
    outcome(
        "semi_supervised_trend",
        outer == 3 && slowest < Duration::from_secs(600),
        format!(
            "AP Supervised / SSOD / +Crop(L) / +Crop(L+U): {}; outer ordering {outer}/3, full chain {full}/3, slowest run {}",
            cells.join(", "),
            secs(slowest)
        ),
    )
}

fn degenerate_equivalence(bench: &BenchmarkConfig) -> Outcome {
    let b = bench.seeded(5);
    let model = cropzoom::detect::ToyModel::new(b.model.clone());
    let labeled_only = b.training_data(Variant::Supervised).unwrap();
    let with_unlabeled = b.training_data(Variant::Ssod).unwrap();
    let run = |cfg: cropzoom::teacher::TrainerConfig, data: &TrainingData| {
        let mut tr = Trainer::new(cfg.clone(), &model, data).unwrap();
        let mut s = tr.initial_state();
        tr.run(&mut s, cfg.max_iters, None).unwrap();
        s
    };
    let sup = run(Variant::Supervised.trainer_config(&b.trainer), &labeled_only);
    let mut degenerate = Variant::Ssod.trainer_config(&b.trainer);
    degenerate.lambda = 0.0;
    degenerate.alpha = 0.0;
    let a = run(degenerate.clone(), &labeled_only);
    let c = run(degenerate, &with_unlabeled);
    let bits = |w: &WeightVector| w.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same_a = bits(&a.teacher) == bits(&sup.teacher) && bits(&a.student) == bits(&sup.student);
    let same_c = bits(&c.teacher) == bits(&sup.teacher);
    outcome(
        "degenerate_equivalence",
        same_a && same_c,
        format!(
            "lambda=0, alpha=0 without unlabeled data bit-identical to supervised: {same_a}; \
             with unlabeled data present: {same_c}"
        ),
    )
}

fn cli(cwd: &Path, args: &[&str]) -> Result<(), cropzoom::cli::CliError> {
    run_in(std::iter::once("cropzoom").chain(args.iter().copied()), cwd)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let base = ["--set", "trainer.max_iters=600", "--set", "trainer.burn_in_iters=200", "--set",
        "trainer.crop_start_iter=400", "--set", "trainer.lr_decay_iter=500"];
    let mut steps: Vec<Vec<&str>> = vec![
        vec!["dataset", "gen", "--out", "data", "--num-scenes", "30", "--workers", "3"],
        vec!["train", "--scenes", "data/scenes.jsonl", "--out", "run", "--crop-labeled", "true",
            "--crop-unlabeled", "true", "--workers", "1"],
        vec!["infer", "--scenes", "data/scenes.jsonl", "--checkpoint", "run/final.ckpt", "--out", "dets.jsonl",
            "--workers", "1"],
    ];
    steps[1].extend(base);
    let mut ok = true;
    for s in &steps {
        ok &= cli(cwd, s).is_ok();
    }
    let read = |p: &str| std::fs::read(cwd.join(p)).unwrap_or_default();
    let first = (read("run/final.ckpt"), read("run/history.tsv"), read("dets.jsonl"));
    let mut replays = Vec::new();
    for workers in ["2", "8"] {
        let t = cli(cwd, &["replay", "run/manifest.json", "--workers", workers]).is_ok();
        let i = cli(cwd, &["replay", "dets.jsonl.manifest.json", "--workers", workers]).is_ok();
        replays.push(t && i);
    }
    let again = (read("run/final.ckpt"), read("run/history.tsv"), read("dets.jsonl"));
    let recorded = RunManifest::read(&cwd.join("run/manifest.json")).map(|m| m.workers).unwrap_or(0);
    outcome(
        "determinism",
        ok && replays.iter().all(|&r| r) && first == again && !first.0.is_empty(),
        format!(
            "train and infer recorded with 1 worker (manifest says {recorded}), replayed with 2 and 8: \
             digests reproduced {replays:?}, outputs byte-identical {}",
            first == again
        ),
    )
}

#[test]
fn acceptance() {
    let bench = BenchmarkConfig::default();
    let results = vec![
        absolute_results(),
        crop_labeling_matches_union_find(),
        geometry_suite(),
        gradient_checks(),
        ema_contract(),
        ap_evaluator(),
        multistage_trend(),
        pseudo_label_trend(&bench),
        semi_supervised_trend(&bench),
        degenerate_equivalence(&bench),
        determinism(),
    ];
    for r in &results {
        println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let unexpected: Vec<&str> = results
        .iter()
        .filter(|r| !r.pass && !UNATTAINABLE.contains(&r.name))
        .map(|r| r.name)
        .collect();
    assert!(unexpected.is_empty(), "failed criteria: {unexpected:?}");
}
