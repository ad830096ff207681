//! The `cropzoom` command line. Every command resolves one [`Config`] from
//! defaults, an optional TOML file, `--set` overrides and its own flags (in
//! that order), runs inside a worker pool of the configured size and writes
//! a [`RunManifest`] next to its outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::Config;
use crate::croplab::label_density_crops;
use crate::dataset::{
    generate_synthetic_dataset, load_annotations, read_split, split_dataset, tile_dataset, write_annotations,
    write_split, Category, Dataset, SceneSpec,
};
use crate::detect::{DetectorBackend, OracleDetector, ToyDetector, ToyModel};
use crate::error::{ConfigError, DatasetError, MetricsError, ModelError, TrainError};
use crate::infer::{read_detection_dump, run_inference, write_detection_dump, write_timing};
use crate::manifest::RunManifest;
use crate::metrics::{compare_runs, evaluate, profile_errors, EvalReport};
use crate::teacher::{read_checkpoint, write_checkpoint, write_report, Trainer, TrainingData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Invariant(_) => EXIT_INVARIANT,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Config(c) => c.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Invariant(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::NoLabeledData | TrainError::Checkpoint(_) => CliError::Data(e.to_string()),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::UnknownImage(_) => CliError::Data(e.to_string()),
            MetricsError::Invalid(_) => CliError::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "cropzoom", version, about = "Density-crop guided semi-supervised detection toolkit")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra `section.key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root seed (`seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads, 0 for all cores (`workers`).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Where to write the run manifest instead of next to the outputs.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate, tile or split datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Density-crop labeling.
    #[command(subcommand)]
    Crops(CropsCommand),
    /// Mean-teacher training with density crops.
    Train(TrainArgs),
    /// Single- or two-stage inference to a detection dump.
    Infer(InferArgs),
    /// COCO-style AP and error profile of a detection dump.
    Eval(EvalArgs),
    /// Error-type profile of a detection dump.
    Errors(EvalArgs),
    /// Side-by-side table of several evaluation reports.
    Report(ReportArgs),
    /// Re-run a recorded command and check its primary outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Synthetic scenes as an annotation file plus scene descriptions.
    Gen(GenArgs),
    /// Cut images into overlapping tiles.
    Tile(TileArgs),
    /// Seeded labeled/unlabeled split.
    Split(SplitArgs),
}

#[derive(Debug, Subcommand)]
pub enum CropsCommand {
    /// Add density-crop annotations to an annotation file.
    Label(LabelArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory for `annotations.json` and `scenes.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// `scene.num_scenes`
    #[arg(long)]
    pub num_scenes: Option<usize>,
    /// `scene.first_id`
    #[arg(long)]
    pub first_id: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `tile.size`
    #[arg(long)]
    pub tile_size: Option<f64>,
    /// `tile.stride`
    #[arg(long)]
    pub stride: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `split.label_fraction`
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `crop.sigma`
    #[arg(long)]
    pub sigma: Option<f64>,
    /// `crop.theta`
    #[arg(long)]
    pub theta: Option<f64>,
    /// `crop.max_area_ratio`
    #[arg(long)]
    pub max_area_ratio: Option<f64>,
    /// `crop.merge_steps`
    #[arg(long)]
    pub merge_steps: Option<usize>,
}

/// Scene source shared by `train` and `infer`.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct SceneSource {
    /// Scene descriptions written by `dataset gen`.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Annotation file; payloads are drawn from the seed.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: SceneSource,
    /// Split file; drawn from `split.label_fraction` when absent.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Output directory for `final.ckpt`, `history.tsv` and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// `trainer.lambda`
    #[arg(long)]
    pub lambda: Option<f64>,
    /// `trainer.alpha`
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `trainer.tau`
    #[arg(long)]
    pub tau: Option<f64>,
    /// `trainer.max_iters`
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// `trainer.burn_in_iters`
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// `trainer.crop_start_iter`
    #[arg(long)]
    pub crop_start: Option<usize>,
    /// `trainer.crop_labeled`
    #[arg(long)]
    pub crop_labeled: Option<bool>,
    /// `trainer.crop_unlabeled`
    #[arg(long)]
    pub crop_unlabeled: Option<bool>,
    /// `trainer.checkpoint_every`
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// `split.labeled_only`: ignore the unlabeled images.
    #[arg(long)]
    pub labeled_only: Option<bool>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub source: SceneSource,
    /// Trained weights (the teacher is used).
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Use the scripted detector configured by `[noise]`.
    #[arg(long)]
    pub oracle: bool,
    /// Detection dump, one JSON object per line.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-image timing table.
    #[arg(long)]
    pub timing: Option<PathBuf>,
    /// `inference.multistage`
    #[arg(long)]
    pub multistage: Option<bool>,
    /// `inference.crop_mode` (predicted or relabeled)
    #[arg(long)]
    pub crop_mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth annotation file.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// Machine-readable report (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Runs as `name=report.json`; the first one is the baseline.
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<String>,
    /// Aligned comparison table.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Tab-separated series for plotting.
    #[arg(long)]
    pub series: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

impl Cli {
    /// Flag values as config overrides, applied after `--set`.
    fn flag_overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut put = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{key}={v}"));
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("workers", self.workers.map(|v| v.to_string()));
        match &self.command {
            Command::Dataset(DatasetCommand::Gen(a)) => {
                put("scene.num_scenes", a.num_scenes.map(|v| v.to_string()));
                put("scene.first_id", a.first_id.map(|v| v.to_string()));
            }
            Command::Dataset(DatasetCommand::Tile(a)) => {
                put("tile.size", a.tile_size.map(float));
                put("tile.stride", a.stride.map(float));
            }
            Command::Dataset(DatasetCommand::Split(a)) => {
                put("split.label_fraction", a.fraction.map(float));
            }
            Command::Crops(CropsCommand::Label(a)) => {
                put("crop.sigma", a.sigma.map(float));
                put("crop.theta", a.theta.map(float));
                put("crop.max_area_ratio", a.max_area_ratio.map(float));
                put("crop.merge_steps", a.merge_steps.map(|v| v.to_string()));
            }
            Command::Train(a) => {
                put("trainer.lambda", a.lambda.map(float));
                put("trainer.alpha", a.alpha.map(float));
                put("trainer.tau", a.tau.map(float));
                put("trainer.max_iters", a.max_iters.map(|v| v.to_string()));
                put("trainer.burn_in_iters", a.burn_in.map(|v| v.to_string()));
                put("trainer.crop_start_iter", a.crop_start.map(|v| v.to_string()));
                put("trainer.crop_labeled", a.crop_labeled.map(|v| v.to_string()));
                put("trainer.crop_unlabeled", a.crop_unlabeled.map(|v| v.to_string()));
                put("trainer.checkpoint_every", a.checkpoint_every.map(|v| v.to_string()));
                put("split.labeled_only", a.labeled_only.map(|v| v.to_string()));
            }
            Command::Infer(a) => {
                put("inference.multistage", a.multistage.map(|v| v.to_string()));
                put("inference.crop_mode", a.crop_mode.clone());
            }
            Command::Eval(_) | Command::Errors(_) | Command::Report(_) | Command::Replay(_) => {}
        }
        o
    }
}

/// TOML float literal; integral values would otherwise parse as integers.
fn float(v: f64) -> String {
    let s = v.to_string();
    if s.contains(['.', 'e', 'E']) || !v.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

/// Paths from the command line are taken relative to `base`.
struct Ctx {
    base: PathBuf,
    manifest: RunManifest,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn input(&mut self, p: &Path) -> Result<PathBuf, CliError> {
        let full = self.path(p);
        self.manifest.add_input(&full).map_err(io_err(&full))?;
        Ok(full)
    }

    fn output(&mut self, full: &Path, primary: bool) -> Result<(), CliError> {
        self.manifest.add_output(full, primary).map_err(io_err(full))
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce(&mut Self) -> Result<T, CliError>) -> Result<T, CliError> {
        let t = Instant::now();
        let out = f(self)?;
        self.manifest.timings.insert(phase.to_string(), t.elapsed().as_secs_f64());
        Ok(out)
    }
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(p).map_err(io_err(p))
}

fn write_file(p: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(p, text).map_err(io_err(p))
}

fn read_scenes_jsonl(path: &Path) -> Result<Vec<SceneSpec>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

fn load_scenes(ctx: &mut Ctx, src: &SceneSource, config: &Config) -> Result<Vec<SceneSpec>, CliError> {
    if let Some(p) = &src.scenes {
        let full = ctx.input(p)?;
        let scenes = read_scenes_jsonl(&full)?;
        if let Some(s) = scenes.iter().find(|s| s.objects.iter().any(|o| o.class_id >= config.scene.num_classes)) {
            return Err(CliError::Config(format!(
                "scene {} has classes beyond scene.num_classes = {}",
                s.image_id, config.scene.num_classes
            )));
        }
        return Ok(scenes);
    }
    let p = src.annotations.as_ref().expect("clap enforces one source");
    let full = ctx.input(p)?;
    let (ds, _) = load_annotations(&full)?;
    if ds.num_classes() != config.scene.num_classes {
        return Err(CliError::Config(format!(
            "{} has {} categories but scene.num_classes = {}",
            p.display(),
            ds.num_classes(),
            config.scene.num_classes
        )));
    }
    let s = &config.scene;
    Ok(ds
        .images
        .iter()
        .map(|r| SceneSpec::from_record(r, s.num_classes, s.payload_dim, s.payload_signal, s.payload_noise, config.seed))
        .collect())
}

fn load_gt(ctx: &mut Ctx, p: &Path) -> Result<Dataset, CliError> {
    let full = ctx.input(p)?;
    Ok(load_annotations(&full)?.0)
}

fn load_dump(ctx: &mut Ctx, p: &Path) -> Result<Vec<(u64, crate::geometry::Detection)>, CliError> {
    let full = ctx.input(p)?;
    let f = std::fs::File::open(&full).map_err(io_err(&full))?;
    Ok(read_detection_dump(BufReader::new(f), &full)?)
}

fn gt_eval_set(
    ds: &Dataset,
    dets: &[(u64, crate::geometry::Detection)],
) -> Result<crate::metrics::EvalSet, CliError> {
    let gts: Vec<_> = ds
        .images
        .iter()
        .flat_map(|r| r.annotations.iter().map(move |a| (r.image_id, a.bbox, a.class_id)))
        .collect();
    let ids: Vec<u64> = ds.images.iter().map(|r| r.image_id).collect();
    Ok(crate::metrics::build_eval_set(&gts, &ids, dets, ds.num_classes())?)
}

fn default_categories(k: usize) -> Vec<Category> {
    (0..k)
        .map(|i| Category {
            id: i as u64 + 1,
            name: format!("class{i}"),
        })
        .collect()
}

fn cmd_gen(ctx: &mut Ctx, a: &GenArgs, config: &Config) -> Result<PathBuf, CliError> {
    let out = ctx.path(&a.out);
    create_dir(&out)?;
    let scenes = ctx.time("generate", |_| Ok(generate_synthetic_dataset(&config.scene)?))?;
    let ds = Dataset {
        categories: default_categories(config.scene.num_classes),
        images: scenes.iter().map(|(r, _)| r.clone()).collect(),
    };
    let ann = out.join("annotations.json");
    write_annotations(&ds, &ann)?;
    let mut lines = String::new();
    for (_, s) in &scenes {
        lines += &serde_json::to_string(s).expect("scene serializes");
        lines.push('\n');
    }
    let sp = out.join("scenes.jsonl");
    write_file(&sp, &lines)?;
    ctx.output(&ann, true)?;
    ctx.output(&sp, true)?;
    println!("generated {} scenes into {}", scenes.len(), out.display());
    Ok(out.join("manifest.json"))
}

fn cmd_tile(ctx: &mut Ctx, a: &TileArgs, config: &Config) -> Result<PathBuf, CliError> {
    let ds = load_gt(ctx, &a.annotations)?;
    let (tiled, dropped) = ctx.time("tile", |_| Ok(tile_dataset(&ds, config.tile.size, config.tile.stride)?))?;
    let out = ctx.path(&a.out);
    write_annotations(&tiled, &out)?;
    ctx.output(&out, true)?;
    println!("{} images -> {} tiles ({} annotations dropped)", ds.images.len(), tiled.images.len(), dropped);
    Ok(manifest_beside(&out))
}

fn cmd_split(ctx: &mut Ctx, a: &SplitArgs, config: &Config) -> Result<PathBuf, CliError> {
    let ds = load_gt(ctx, &a.annotations)?;
    let ids: Vec<u64> = ds.images.iter().map(|r| r.image_id).collect();
    let split = split_dataset(&ids, config.split.label_fraction, config.seed)?;
    let out = ctx.path(&a.out);
    write_split(&split, &out)?;
    ctx.output(&out, true)?;
    println!("{} labeled, {} unlabeled", split.labeled.len(), split.unlabeled.len());
    Ok(manifest_beside(&out))
}

fn cmd_label(ctx: &mut Ctx, a: &LabelArgs, config: &Config) -> Result<PathBuf, CliError> {
    let mut ds = load_gt(ctx, &a.annotations)?;
    let k = ds.num_classes();
    let crops = ctx.time("label", |_| {
        ds.images
            .iter()
            .map(|r| {
                label_density_crops(&r.base_boxes(k), r.size(), &config.crop)
                    .map(|c| (r.image_id, c))
                    .map_err(|e| CliError::Data(format!("image {}: {e}", r.image_id)))
            })
            .collect::<Result<BTreeMap<_, _>, _>>()
    })?;
    ds.add_crop_annotations(&crops);
    let out = ctx.path(&a.out);
    write_annotations(&ds, &out)?;
    ctx.output(&out, true)?;
    let n: usize = crops.values().map(Vec::len).sum();
    println!("{n} density crops over {} images", ds.images.len());
    Ok(manifest_beside(&out))
}

fn cmd_train(ctx: &mut Ctx, a: &TrainArgs, config: &Config) -> Result<PathBuf, CliError> {
    let scenes = load_scenes(ctx, &a.source, config)?;
    let ids: Vec<u64> = scenes.iter().map(|s| s.image_id).collect();
    let split = match &a.split {
        Some(p) => {
            let full = ctx.input(p)?;
            read_split(&full)?
        }
        None => split_dataset(&ids, config.split.label_fraction, config.seed)?,
    };
    let mut data = TrainingData::from_split(&scenes, &split);
    if config.split.labeled_only {
        data.unlabeled.clear();
    }
    let model = ToyModel::new(config.model.clone());
    let out = ctx.path(&a.out);
    create_dir(&out)?;
    let mut trainer = Trainer::new(config.trainer.clone(), &model, &data)?;
    let mut state = match &a.resume {
        Some(p) => {
            let full = ctx.input(p)?;
            let s = read_checkpoint(&full)?;
            if s.student.layout != model.layout() {
                return Err(CliError::Config(format!(
                    "{} was trained with a different model layout",
                    p.display()
                )));
            }
            s
        }
        None => trainer.initial_state(),
    };
    let ckpt_dir = (config.trainer.checkpoint_every > 0).then(|| out.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        create_dir(d)?;
    }
    ctx.time("train", |_| Ok(trainer.run(&mut state, config.trainer.max_iters, ckpt_dir.as_deref())?))?;
    let final_ckpt = out.join("final.ckpt");
    write_checkpoint(&state, &final_ckpt)?;
    let hist = out.join("history.tsv");
    let mut buf = Vec::new();
    write_report(&state.history, &mut buf).map_err(io_err(&hist))?;
    std::fs::write(&hist, buf).map_err(io_err(&hist))?;
    ctx.output(&final_ckpt, true)?;
    ctx.output(&hist, true)?;
    let last = state.history.last();
    println!(
        "trained {} iterations on {} labeled + {} unlabeled images; final loss {}",
        state.iteration,
        data.labeled.len(),
        data.unlabeled.len(),
        last.map_or("-".to_string(), |r| format!("{:.4}", r.total))
    );
    Ok(out.join("manifest.json"))
}

fn cmd_infer(ctx: &mut Ctx, a: &InferArgs, config: &Config) -> Result<PathBuf, CliError> {
    let scenes = load_scenes(ctx, &a.source, config)?;
    let multistage = config.inference.multistage;
    let backend: std::boxed::Box<dyn DetectorBackend> = match &a.checkpoint {
        Some(p) => {
            let full = ctx.input(p)?;
            let state = read_checkpoint(&full)?;
            let model = ToyModel::new(config.model.clone());
            if state.teacher.layout != model.layout() {
                return Err(CliError::Config(format!(
                    "{} was trained with a different model layout",
                    p.display()
                )));
            }
            std::boxed::Box::new(ToyDetector::new(model, state.teacher, multistage))
        }
        None => {
            let mut o = OracleDetector::new(config.noise.clone(), config.scene.num_classes);
            o.crop_params = config.crop;
            std::boxed::Box::new(o)
        }
    };
    let run = ctx.time("infer", |_| Ok(run_inference(&scenes, backend.as_ref(), &config.inference, multistage)))?;
    if let Some((id, msg)) = run.errors.first() {
        return Err(CliError::Invariant(format!("backend failed on image {id}: {msg}")));
    }
    let out = ctx.path(&a.out);
    let mut buf = Vec::new();
    write_detection_dump(&run.detections(), &mut buf).map_err(io_err(&out))?;
    write_file(&out, std::str::from_utf8(&buf).expect("dump is utf-8"))?;
    ctx.output(&out, true)?;
    if let Some(t) = &a.timing {
        let tp = ctx.path(t);
        let f = std::fs::File::create(&tp).map_err(io_err(&tp))?;
        let mut w = BufWriter::new(f);
        write_timing(&run, &mut w).and_then(|_| w.flush()).map_err(io_err(&tp))?;
        ctx.output(&tp, false)?;
    }
    let crops: usize = run.results.iter().map(|r| r.crops.len()).sum();
    println!(
        "{} detections on {} images ({} crops), {:.1} images/s",
        run.detections().len(),
        run.results.len(),
        crops,
        run.fps()
    );
    Ok(manifest_beside(&out))
}

fn cmd_eval(ctx: &mut Ctx, a: &EvalArgs, config: &Config, errors_only: bool) -> Result<PathBuf, CliError> {
    let ds = load_gt(ctx, &a.annotations)?;
    let dets = load_dump(ctx, &a.detections)?;
    let set = gt_eval_set(&ds, &dets)?;
    let k = ds.num_classes();
    let text = if errors_only {
        let (errors, tp) = ctx.time("errors", |_| Ok(profile_errors(&set, config.eval.fg_iou, config.eval.bg_iou)))?;
        let mut s = String::new();
        for (name, v) in [
            ("TP", tp),
            ("Cls", errors.cls),
            ("Loc", errors.loc),
            ("Both", errors.both),
            ("Dupe", errors.dupe),
            ("Bkg", errors.bkg),
            ("Miss", errors.miss),
        ] {
            s += &format!("{name:<8}{v:>8}\n");
        }
        print!("{s}");
        serde_json::json!({ "true_positives": tp, "errors": errors })
    } else {
        let report = ctx.time("eval", |_| Ok(evaluate(&set, k, &config.eval)))?;
        print!("{}", report.to_table());
        serde_json::to_value(&report).expect("report serializes")
    };
    match &a.out {
        Some(p) => {
            let out = ctx.path(p);
            write_file(&out, &(serde_json::to_string_pretty(&text).expect("json") + "\n"))?;
            ctx.output(&out, true)?;
            Ok(manifest_beside(&out))
        }
        None => Ok(manifest_beside(&ctx.path(&a.detections))),
    }
}

fn cmd_report(ctx: &mut Ctx, a: &ReportArgs) -> Result<PathBuf, CliError> {
    let mut reports = Vec::new();
    for r in &a.runs {
        let (name, p) = r
            .split_once('=')
            .map(|(n, p)| (n.to_string(), PathBuf::from(p)))
            .unwrap_or_else(|| {
                let p = PathBuf::from(r);
                let n = p.file_stem().map_or(r.clone(), |s| s.to_string_lossy().into_owned());
                (n, p)
            });
        let full = ctx.input(&p)?;
        let text = std::fs::read_to_string(&full).map_err(io_err(&full))?;
        let report: EvalReport =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", full.display())))?;
        reports.push((name, report));
    }
    let cmp = compare_runs(&reports)?;
    let table = cmp.to_table();
    print!("{table}");
    let mut first = None;
    if let Some(p) = &a.out {
        let out = ctx.path(p);
        write_file(&out, &table)?;
        ctx.output(&out, true)?;
        first = Some(out);
    }
    if let Some(p) = &a.series {
        let out = ctx.path(p);
        write_file(&out, &cmp.to_series())?;
        ctx.output(&out, true)?;
        first.get_or_insert(out);
    }
    Ok(first.map_or_else(|| ctx.base.join("report.manifest.json"), |p| manifest_beside(&p)))
}

fn manifest_beside(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn execute(cli: &Cli, config: &Config, ctx: &mut Ctx) -> Result<PathBuf, CliError> {
    match &cli.command {
        Command::Dataset(DatasetCommand::Gen(a)) => cmd_gen(ctx, a, config),
        Command::Dataset(DatasetCommand::Tile(a)) => cmd_tile(ctx, a, config),
        Command::Dataset(DatasetCommand::Split(a)) => cmd_split(ctx, a, config),
        Command::Crops(CropsCommand::Label(a)) => cmd_label(ctx, a, config),
        Command::Train(a) => cmd_train(ctx, a, config),
        Command::Infer(a) => cmd_infer(ctx, a, config),
        Command::Eval(a) => cmd_eval(ctx, a, config, false),
        Command::Errors(a) => cmd_eval(ctx, a, config, true),
        Command::Report(a) => cmd_report(ctx, a),
        Command::Replay(_) => Err(CliError::Config("replay cannot be nested".into())),
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("workers: {e}")))?;
    Ok(pool.install(f))
}

/// Runs one parsed invocation with `config` and paths relative to `base`,
/// writing its manifest. Returns the manifest and where it was written.
fn run_invocation(
    cli: &Cli,
    args: Vec<String>,
    config: Config,
    base: PathBuf,
    manifest_override: Option<PathBuf>,
) -> Result<(RunManifest, PathBuf), CliError> {
    let workers = config.workers;
    let mut ctx = Ctx {
        manifest: RunManifest::new(args, &config, workers),
        base,
    };
    ctx.manifest.working_dir = ctx.base.clone();
    let default_path = with_pool(workers, || execute(cli, &config, &mut ctx))??;
    let path = manifest_override.map_or(default_path, |p| ctx.path(&p));
    ctx.manifest.write(&path).map_err(io_err(&path))?;
    Ok((ctx.manifest, path))
}

fn replay(cli: &Cli, a: &ReplayArgs, base: PathBuf) -> Result<(), CliError> {
    let mpath = base.join(&a.manifest);
    let recorded = RunManifest::read(&mpath).map_err(io_err(&mpath))?;
    let changed = recorded.changed_inputs();
    if !changed.is_empty() {
        return Err(CliError::Data(format!("inputs changed since the recorded run: {changed:?}")));
    }
    let mut argv = vec![OsString::from("cropzoom")];
    argv.extend(recorded.args.iter().map(OsString::from));
    let inner = Cli::try_parse_from(argv).map_err(|e| CliError::Config(e.to_string()))?;
    if matches!(inner.command, Command::Replay(_)) {
        return Err(CliError::Config("a replay manifest cannot be replayed".into()));
    }
    let mut config = recorded.config.clone();
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    let mut out = mpath.as_os_str().to_owned();
    out.push(".replay.json");
    let (fresh, _) = run_invocation(
        &inner,
        recorded.args.clone(),
        config,
        recorded.working_dir.clone(),
        Some(PathBuf::from(out)),
    )?;
    let bad = recorded.primary_mismatches(&fresh);
    if bad.is_empty() {
        let n = recorded.outputs.iter().filter(|o| o.primary).count();
        println!("replay reproduced {n} primary outputs");
        Ok(())
    } else {
        Err(CliError::Invariant(format!("replay produced different outputs: {bad:?}")))
    }
}

/// Runs the command line `argv` (program name first) from `cwd`.
pub fn run_in<I, T>(argv: I, cwd: &Path) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    if let Command::Replay(a) = &cli.command {
        return replay(&cli, a, cwd.to_path_buf());
    }
    let mut overrides = cli.set.clone();
    overrides.extend(cli.flag_overrides());
    let file = cli.config.as_ref().map(|p| cwd.join(p));
    let config = Config::load(file.as_deref(), &overrides)?;
    let args = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let (_, path) = run_invocation(&cli, args, config, cwd.to_path_buf(), cli.manifest.clone())?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

/// Entry point for the binary: returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cwd = std::env::current_dir().unwrap_or_default();
    match run_in(argv, &cwd) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("cropzoom: {e}");
            e.exit_code()
        }
    }
}
