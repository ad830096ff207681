//! Mean-teacher training with density-crop discovery.
//!
//! Training starts with a supervised burn-in. The burn-in weights seed both
//! the student and the teacher. Afterwards the teacher pseudo-labels weakly
//! augmented unlabeled views, the student learns from those labels on
//! strongly augmented features, and the teacher follows the student by an
//! exponential moving average. From `crop_start_iter` on, the teacher's
//! confident detections on unlabeled images are clustered into density
//! crops whose upscaled views join the unlabeled pool.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::croplab::{label_density_crops, CropParams};
use crate::dataset::{Annotation, DatasetSplit, SceneSpec, Source, UpscalePolicy, MIN_VISIBLE_FRACTION};
use crate::detect::{
    assign_targets, loss_sup, loss_unsup, strong_augment, DetectorBackend, PseudoSample, Sample,
    StrongAugConfig, ToyDetector, ToyModel, View, ViewSamples, WeightVector,
};
use crate::error::{ConfigError, ModelError, TrainError};
use crate::geometry::{Box, Detection};
use crate::seed::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub lambda: f64,
    pub tau: f64,
    pub alpha: f64,
    pub burn_in_iters: usize,
    pub max_iters: usize,
    pub crop_start_iter: usize,
    pub crop_recompute_period: usize,
    /// Unlabeled images per labeled image in a batch.
    pub data_ratio: f64,
    /// Labeled images per batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_iter: Option<usize>,
    pub lr_decay_factor: f64,
    /// Label density crops on the labeled images and train on their
    /// upscaled views. Makes the model predict the crop class.
    pub crop_labeled: bool,
    /// Discover density crops on unlabeled images from pseudo-labels.
    pub crop_unlabeled: bool,
    pub crop_params: CropParams,
    pub upscale: UpscalePolicy,
    pub strong: StrongAugConfig,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lambda: 4.0,
            tau: 0.7,
            alpha: 0.9996,
            burn_in_iters: 1000,
            max_iters: 4000,
            crop_start_iter: 2000,
            crop_recompute_period: 10_000,
            data_ratio: 1.0,
            batch_size: 2,
            learning_rate: 0.05,
            lr_decay_iter: Some(3000),
            lr_decay_factor: 0.1,
            crop_labeled: false,
            crop_unlabeled: false,
            crop_params: CropParams::default(),
            upscale: UpscalePolicy::default(),
            strong: StrongAugConfig::default(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |f: &str, r: &str| Err(ConfigError::new(format!("trainer.{f}"), r));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err("lambda", "must be finite and >= 0");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return err("tau", "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return err("alpha", "must lie in [0, 1]");
        }
        if self.burn_in_iters > self.max_iters {
            return err("burn_in_iters", "must not exceed max_iters");
        }
        if self.crop_unlabeled
            && !(self.burn_in_iters < self.crop_start_iter && self.crop_start_iter <= self.max_iters)
        {
            return err("crop_start_iter", "need burn_in_iters < crop_start_iter <= max_iters");
        }
        if self.crop_recompute_period == 0 {
            return err("crop_recompute_period", "must be >= 1");
        }
        if !(self.data_ratio >= 0.0 && self.data_ratio.is_finite()) {
            return err("data_ratio", "must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate", "must be positive");
        }
        if !(self.lr_decay_factor > 0.0) {
            return err("lr_decay_factor", "must be positive");
        }
        self.crop_params.validate()?;
        self.upscale.validate()
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        match self.lr_decay_iter {
            Some(at) if iteration >= at => self.learning_rate * self.lr_decay_factor,
            _ => self.learning_rate,
        }
    }

    pub fn unlabeled_per_batch(&self) -> usize {
        (self.data_ratio * self.batch_size as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub scene: SceneSpec,
    /// Annotations in scene coordinates. Density crops use class
    /// `num_classes`.
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingData {
    pub labeled: Vec<LabeledImage>,
    pub unlabeled: Vec<SceneSpec>,
}

impl TrainingData {
    /// Labeled images keep their scene objects as annotations; unlabeled
    /// images keep only the scene.
    pub fn from_split(scenes: &[SceneSpec], split: &DatasetSplit) -> Self {
        let mut data = TrainingData::default();
        for s in scenes {
            if split.labeled.contains(&s.image_id) {
                data.labeled.push(LabeledImage {
                    scene: s.clone(),
                    annotations: s.to_record().annotations,
                });
            } else if split.unlabeled.contains(&s.image_id) {
                data.unlabeled.push(s.clone());
            }
        }
        data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropCacheEntry {
    pub crops: Vec<Box>,
    pub computed_at: usize,
}

/// One row of the run report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub total: f64,
    /// Base-class pseudo-labels per unlabeled image in the batch, counted
    /// over the image and its cached crop views.
    pub pseudo_per_image: f64,
    /// Cached unlabeled crops.
    pub crops: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub student: WeightVector,
    pub teacher: WeightVector,
    /// Next iteration to run.
    pub iteration: usize,
    pub burned_in: bool,
    pub crop_cache: BTreeMap<u64, CropCacheEntry>,
    pub history: Vec<IterationRecord>,
}

impl TrainerState {
    pub fn new(model: &ToyModel) -> Self {
        let w = WeightVector::zeros(model.layout());
        TrainerState {
            student: w.clone(),
            teacher: w,
            iteration: 0,
            burned_in: false,
            crop_cache: BTreeMap::new(),
            history: Vec::new(),
        }
    }

    /// Mean pseudo-labels per image over iterations in `range`.
    pub fn mean_pseudo_per_image(&self, range: std::ops::Range<usize>) -> f64 {
        let rows: Vec<_> = self.history.iter().filter(|r| range.contains(&r.iter)).collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().map(|r| r.pseudo_per_image).sum::<f64>() / rows.len() as f64
    }

    pub fn cached_crops(&self) -> usize {
        self.crop_cache.values().map(|e| e.crops.len()).sum()
    }
}

/// Keeps predictions with score strictly above `tau`. Density-crop
/// predictions pass through with their class id.
pub fn filter_pseudo_labels(preds: &[Detection], tau: f64) -> Vec<Annotation> {
    preds
        .iter()
        .filter(|d| d.score > tau)
        .map(|d| Annotation {
            bbox: d.bbox,
            class_id: d.class_id,
            source: Source::Pseudo,
        })
        .collect()
}

/// `alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &WeightVector, student: &WeightVector, alpha: f64) -> Result<WeightVector, ModelError> {
    if teacher.layout != student.layout || teacher.values.len() != student.values.len() {
        return Err(ModelError::WeightLength {
            expected: teacher.values.len(),
            got: student.values.len(),
        });
    }
    Ok(WeightVector {
        layout: teacher.layout,
        values: teacher
            .values
            .iter()
            .zip(&student.values)
            .map(|(t, s)| alpha * t + (1.0 - alpha) * s)
            .collect(),
    })
}

pub fn combined_loss(l_sup: f64, l_unsup: f64, lambda: f64) -> f64 {
    l_sup + lambda * l_unsup
}

/// Ground truth of a view: base-class annotations with at least half their
/// area visible, and density crops on whole-image views.
pub fn annotations_in_view(annotations: &[Annotation], view: &View, num_classes: usize) -> Vec<(Box, usize)> {
    annotations
        .iter()
        .filter(|a| a.class_id < num_classes || view.depth == 0)
        .filter_map(|a| {
            let full = view.to_view(&a.bbox);
            let clipped = view.clip(&full)?;
            (a.class_id >= num_classes || clipped.area() >= MIN_VISIBLE_FRACTION * full.area())
                .then_some((clipped, a.class_id))
        })
        .collect()
}

/// Refreshes the crop cache for `images` from the backend's confident
/// base-class detections on each whole image. Entries younger than
/// `crop_recompute_period` are kept. Returns the ids that were refreshed.
pub fn discover_unlabeled_crops(
    state: &mut TrainerState,
    images: &[&SceneSpec],
    backend: &dyn DetectorBackend,
    config: &TrainerConfig,
) -> Result<Vec<u64>, ModelError> {
    let it = state.iteration;
    if it < config.crop_start_iter {
        return Ok(Vec::new());
    }
    let mut todo: Vec<&SceneSpec> = images
        .iter()
        .copied()
        .filter(|s| {
            state
                .crop_cache
                .get(&s.image_id)
                .is_none_or(|e| it - e.computed_at >= config.crop_recompute_period)
        })
        .collect();
    todo.sort_by_key(|s| s.image_id);
    todo.dedup_by_key(|s| s.image_id);
    let found: Vec<Result<(u64, Vec<Box>), ModelError>> = todo
        .par_iter()
        .map(|scene| {
            let view = View::full(scene);
            let dets = backend.detect(scene, &view)?;
            let boxes: Vec<Box> = filter_pseudo_labels(&dets, config.tau)
                .into_iter()
                .filter(|a| a.class_id < backend.num_classes())
                .map(|a| view.to_parent(&a.bbox))
                .collect();
            let crops = label_density_crops(&boxes, scene.size(), &config.crop_params)?;
            Ok((scene.image_id, crops))
        })
        .collect();
    let mut refreshed = Vec::new();
    for r in found {
        let (id, crops) = r?;
        state.crop_cache.insert(id, CropCacheEntry { crops, computed_at: it });
        refreshed.push(id);
    }
    Ok(refreshed)
}

/// Precomputed training views and the schedule that consumes them.
pub struct Trainer<'a> {
    pub config: TrainerConfig,
    pub model: &'a ToyModel,
    pub data: &'a TrainingData,
    labeled_pool: Vec<[Vec<Sample>; 2]>,
    unlabeled_full: Vec<[ViewSamples; 2]>,
    unlabeled_crops: BTreeMap<u64, (usize, Vec<[ViewSamples; 2]>)>,
}

fn both_flips<T: Send>(view: View, f: impl Fn(View) -> T + Sync) -> [T; 2] {
    let (a, b) = rayon::join(|| f(view.with_flip(false)), || f(view.with_flip(true)));
    [a, b]
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainerConfig, model: &'a ToyModel, data: &'a TrainingData) -> Result<Self, TrainError> {
        config.validate()?;
        model.config.validate()?;
        if data.labeled.is_empty() {
            return Err(TrainError::NoLabeledData);
        }
        let k = model.config.num_classes;
        let crop_aware = config.crop_labeled;
        let labeled_views: Vec<(usize, View, Vec<Annotation>)> = data
            .labeled
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let mut anns: Vec<Annotation> =
                    img.annotations.iter().copied().filter(|a| a.class_id < k).collect();
                let mut views = Vec::new();
                if config.crop_labeled {
                    let base: Vec<Box> = anns.iter().map(|a| a.bbox).collect();
                    let crops = label_density_crops(&base, img.scene.size(), &config.crop_params)?;
                    for c in &crops {
                        views.push(View::crop(*c, config.upscale.size_for(c)));
                    }
                    anns.extend(crops.into_iter().map(|c| Annotation::gt(c, k)));
                }
                views.insert(0, View::full(&img.scene));
                Ok(views.into_iter().map(move |v| (i, v, anns.clone())).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>, TrainError>>()?
            .into_iter()
            .flatten()
            .collect();
        let labeled_pool = labeled_views
            .par_iter()
            .map(|(i, view, anns)| {
                let scene = &data.labeled[*i].scene;
                both_flips(*view, |v| {
                    let vs = model.view_samples(scene, &v, crop_aware);
                    model.labeled(&vs, &annotations_in_view(anns, &v, k))
                })
            })
            .collect();
        let unlabeled_full = data
            .unlabeled
            .par_iter()
            .map(|s| both_flips(View::full(s), |v| model.view_samples(s, &v, crop_aware)))
            .collect();
        Ok(Trainer {
            config,
            model,
            data,
            labeled_pool,
            unlabeled_full,
            unlabeled_crops: BTreeMap::new(),
        })
    }

    pub fn crop_aware(&self) -> bool {
        self.config.crop_labeled
    }

    /// Number of labeled training views, whole images and crops.
    pub fn labeled_views(&self) -> usize {
        self.labeled_pool.len()
    }

    pub fn initial_state(&self) -> TrainerState {
        TrainerState::new(self.model)
    }

    fn sync_crop_views(&mut self, state: &TrainerState) {
        let by_id: BTreeMap<u64, &SceneSpec> = self.data.unlabeled.iter().map(|s| (s.image_id, s)).collect();
        for (id, entry) in &state.crop_cache {
            if self.unlabeled_crops.get(id).is_some_and(|(at, _)| *at == entry.computed_at) {
                continue;
            }
            let Some(scene) = by_id.get(id) else { continue };
            let views = entry
                .crops
                .par_iter()
                .map(|c| {
                    both_flips(View::crop(*c, self.config.upscale.size_for(c)), |v| {
                        self.model.view_samples(scene, &v, false)
                    })
                })
                .collect();
            self.unlabeled_crops.insert(*id, (entry.computed_at, views));
        }
    }

    /// Runs iterations until `state.iteration == until` (capped at
    /// `max_iters`). Checkpoints land in `checkpoint_dir` when configured.
    pub fn run(
        &mut self,
        state: &mut TrainerState,
        until: usize,
        checkpoint_dir: Option<&Path>,
    ) -> Result<(), TrainError> {
        let until = until.min(self.config.max_iters);
        self.sync_crop_views(state);
        while state.iteration < until {
            self.step(state)?;
            let every = self.config.checkpoint_every;
            if let (Some(dir), true) = (checkpoint_dir, every > 0) {
                if state.iteration % every == 0 {
                    write_checkpoint(state, &checkpoint_path(dir, state.iteration))?;
                }
            }
        }
        if state.iteration >= self.config.max_iters && !state.burned_in {
            state.teacher = state.student.clone();
            state.burned_in = true;
        }
        Ok(())
    }

    fn step(&mut self, state: &mut TrainerState) -> Result<(), TrainError> {
        let cfg = &self.config;
        let it = state.iteration;
        let lr = cfg.learning_rate_at(it);
        let layout = self.model.layout();
        let k = self.model.config.num_classes;

        if it >= cfg.burn_in_iters && !state.burned_in {
            state.teacher = state.student.clone();
            state.burned_in = true;
        }

        let mut rng = seed::rng(cfg.seed, &[tag::LABELED_BATCH, it as u64]);
        let mut batch = Vec::new();
        for _ in 0..cfg.batch_size {
            let item = &self.labeled_pool[rng.random_range(0..self.labeled_pool.len())];
            let flip = rng.random_bool(0.5) as usize;
            batch.extend_from_slice(&item[flip]);
        }
        let (l_sup, mut grad) = if batch.is_empty() {
            (0.0, vec![0.0; layout.len()])
        } else {
            let out = loss_sup(&state.student, &batch, self.model.config.smooth_l1_beta)?;
            let n = batch.len() as f64;
            (out.loss / n, out.grad.into_iter().map(|g| g / n).collect())
        };

        let mut l_unsup = 0.0;
        let mut pseudo_per_image = 0.0;
        let n_unlabeled = cfg.unlabeled_per_batch();
        if state.burned_in && !self.unlabeled_full.is_empty() && n_unlabeled > 0 {
            let mut rng = seed::rng(cfg.seed, &[tag::UNLABELED_BATCH, it as u64]);
            let picks: Vec<(usize, usize)> = (0..n_unlabeled)
                .map(|_| {
                    let i = rng.random_range(0..self.unlabeled_full.len());
                    (i, rng.random_bool(0.5) as usize)
                })
                .collect();

            let teacher = ToyDetector::new(self.model.clone(), state.teacher.clone(), self.crop_aware());
            if cfg.crop_unlabeled {
                let images: Vec<&SceneSpec> = picks.iter().map(|&(i, _)| &self.data.unlabeled[i]).collect();
                let refreshed = discover_unlabeled_crops(state, &images, &teacher, cfg)?;
                if !refreshed.is_empty() {
                    self.sync_crop_views(state);
                }
            }
            let cfg = &self.config;

            let mut views: Vec<(usize, &ViewSamples)> = Vec::new();
            for (slot, &(i, flip)) in picks.iter().enumerate() {
                views.push((slot, &self.unlabeled_full[i][flip]));
                let id = self.data.unlabeled[i].image_id;
                if let Some((_, crops)) = self.unlabeled_crops.get(&id) {
                    views.extend(crops.iter().map(|c| (slot, &c[flip])));
                }
            }
            let teacher_w = &state.teacher;
            let labeled: Vec<(usize, Vec<PseudoSample>)> = views
                .par_iter()
                .enumerate()
                .map(|(v, &(slot, vs))| {
                    let dets = self.model.detect_samples(teacher_w, vs)?;
                    let pseudo = filter_pseudo_labels(&dets, cfg.tau);
                    let base = pseudo.iter().filter(|a| a.class_id < k).count();
                    let gts: Vec<(Box, usize)> = pseudo.iter().map(|a| (a.bbox, a.class_id)).collect();
                    let targets = assign_targets(
                        &vs.proposals,
                        &gts,
                        k,
                        layout.background(),
                        self.model.config.fg_iou,
                    );
                    let mut rng = seed::rng(cfg.seed, &[tag::STRONG, it as u64, slot as u64, v as u64]);
                    let samples = targets
                        .into_iter()
                        .zip(&vs.features)
                        .map(|((class, _), x)| PseudoSample {
                            features: strong_augment(x, &cfg.strong, &mut rng),
                            class,
                        })
                        .collect();
                    Ok((base, samples))
                })
                .collect::<Result<_, ModelError>>()?;
            let base_total: usize = labeled.iter().map(|(b, _)| b).sum();
            pseudo_per_image = base_total as f64 / n_unlabeled as f64;
            let samples: Vec<PseudoSample> = labeled.into_iter().flat_map(|(_, s)| s).collect();
            if !samples.is_empty() {
                let out = loss_unsup(&state.student, &samples)?;
                let n = samples.len() as f64;
                l_unsup = out.loss / n;
                if cfg.lambda > 0.0 {
                    for (g, u) in grad.iter_mut().zip(&out.grad) {
                        *g += cfg.lambda * (u / n);
                    }
                }
            }
        }
        let cfg = &self.config;

        let total = combined_loss(l_sup, l_unsup, cfg.lambda);
        if !total.is_finite() {
            return Err(TrainError::Diverged { iteration: it });
        }
        let teacher_print = state.teacher.fingerprint();
        for (w, g) in state.student.values.iter_mut().zip(&grad) {
            *w -= lr * g;
        }
        if !state.student.is_finite() {
            return Err(TrainError::Diverged { iteration: it });
        }
        if state.teacher.fingerprint() != teacher_print {
            return Err(TrainError::Invariant("teacher changed during the student step".into()));
        }
        if state.burned_in {
            state.teacher = ema_update(&state.teacher, &state.student, cfg.alpha)?;
        }
        state.history.push(IterationRecord {
            iter: it,
            l_sup,
            l_unsup,
            total,
            pseudo_per_image,
            crops: state.cached_crops(),
            lr,
        });
        state.iteration = it + 1;
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:07}.txt"))
}

/// Supervised burn-in alone: `burn_in_iters` steps on the labeled loss.
pub fn burn_in(
    config: &TrainerConfig,
    data: &TrainingData,
    model: &ToyModel,
) -> Result<(WeightVector, Vec<IterationRecord>), TrainError> {
    let cfg = TrainerConfig {
        max_iters: config.burn_in_iters,
        crop_unlabeled: false,
        ..config.clone()
    };
    let labeled_only = TrainingData {
        labeled: data.labeled.clone(),
        unlabeled: Vec::new(),
    };
    let mut trainer = Trainer::new(cfg, model, &labeled_only)?;
    let mut state = trainer.initial_state();
    trainer.run(&mut state, config.burn_in_iters, None)?;
    Ok((state.student, state.history))
}

/// Full schedule from scratch.
pub fn train(config: &TrainerConfig, data: &TrainingData, model: &ToyModel) -> Result<TrainerState, TrainError> {
    let mut trainer = Trainer::new(config.clone(), model, data)?;
    let mut state = trainer.initial_state();
    trainer.run(&mut state, config.max_iters, None)?;
    Ok(state)
}

/// Tab-separated run report, one row per iteration.
pub fn write_report(history: &[IterationRecord], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "iter\tl_sup\tl_unsup\ttotal\tpseudo_per_image\tcrops\tlr")?;
    for r in history {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.iter, r.l_sup, r.l_unsup, r.total, r.pseudo_per_image, r.crops, r.lr
        )?;
    }
    Ok(())
}

pub fn parse_report(text: &str) -> Result<Vec<IterationRecord>, String> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(format!("row {}: expected 7 columns, got {}", n + 1, f.len()));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("row {}: {e}", n + 1));
            let int = |i: usize| f[i].parse::<usize>().map_err(|e| format!("row {}: {e}", n + 1));
            Ok(IterationRecord {
                iter: int(0)?,
                l_sup: num(1)?,
                l_unsup: num(2)?,
                total: num(3)?,
                pseudo_per_image: num(4)?,
                crops: int(5)?,
                lr: num(6)?,
            })
        })
        .collect()
}
