//! The synthetic benchmark: generate scenes, split them, train one of the
//! four training variants and score the final teacher on held-out scenes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic_dataset, split_dataset, SceneConfig, SceneSpec};
use crate::detect::{DetectorBackend, ToyDetector, ToyModel, ToyModelConfig};
use crate::error::{ConfigError, TrainError};
use crate::infer::{run_inference, InferenceConfig};
use crate::metrics::{build_eval_set, evaluate, recall_ratio, AreaRange, EvalConfig, EvalReport, EvalSet};
use crate::teacher::{Trainer, TrainerConfig, TrainerState, TrainingData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Labeled images only, no teacher.
    Supervised,
    /// Mean teacher without density crops.
    Ssod,
    /// Mean teacher with density crops on labeled images.
    SsodCropL,
    /// Mean teacher with density crops on labeled and unlabeled images.
    SsodCropLU,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Supervised, Variant::Ssod, Variant::SsodCropL, Variant::SsodCropLU];

    pub fn trainer_config(&self, base: &TrainerConfig) -> TrainerConfig {
        let mut c = base.clone();
        match self {
            Variant::Supervised => {
                c.burn_in_iters = c.max_iters;
                c.lambda = 0.0;
                c.crop_labeled = false;
                c.crop_unlabeled = false;
            }
            Variant::Ssod => {
                c.crop_labeled = false;
                c.crop_unlabeled = false;
            }
            Variant::SsodCropL => {
                c.crop_labeled = true;
                c.crop_unlabeled = false;
            }
            Variant::SsodCropLU => {
                c.crop_labeled = true;
                c.crop_unlabeled = true;
            }
        }
        c
    }

    pub fn uses_unlabeled(&self) -> bool {
        !matches!(self, Variant::Supervised)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Supervised => "Supervised",
            Variant::Ssod => "SSOD",
            Variant::SsodCropL => "SSOD+Crop(L)",
            Variant::SsodCropLU => "SSOD+Crop(L+U)",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub scene: SceneConfig,
    pub test_scenes: usize,
    pub label_fraction: f64,
    pub model: ToyModelConfig,
    pub trainer: TrainerConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let scene = SceneConfig {
            num_scenes: 120,
            ..SceneConfig::default()
        };
        let model = ToyModelConfig {
            num_classes: scene.num_classes,
            payload_dim: scene.payload_dim,
            ..ToyModelConfig::default()
        };
        Self {
            scene,
            test_scenes: 40,
            label_fraction: 0.1,
            model,
            trainer: TrainerConfig {
                alpha: 0.99,
                lambda: 1.0,
                tau: 0.5,
                learning_rate: 0.3,
                data_ratio: 2.0,
                burn_in_iters: 600,
                max_iters: 2400,
                crop_start_iter: 1200,
                lr_decay_iter: Some(1800),
                ..TrainerConfig::default()
            },
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scene.validate()?;
        self.model.validate()?;
        self.trainer.validate()?;
        self.inference.validate()?;
        if self.model.num_classes != self.scene.num_classes {
            return Err(ConfigError::new("model.num_classes", "must equal scene.num_classes"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(ConfigError::new("label_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Copy with every random stream derived from `seed`.
    pub fn seeded(&self, seed: u64) -> BenchmarkConfig {
        let mut c = self.clone();
        c.scene.seed = seed;
        c.trainer.seed = seed;
        c.model.proposals.seed = seed;
        c.model.observation.seed = seed;
        c
    }

    pub fn train_scenes(&self) -> Result<Vec<SceneSpec>, ConfigError> {
        Ok(generate_synthetic_dataset(&self.scene)?.into_iter().map(|(_, s)| s).collect())
    }

    /// Held-out scenes with ids after the training scenes.
    pub fn test_scenes(&self) -> Result<Vec<SceneSpec>, ConfigError> {
        let cfg = SceneConfig {
            num_scenes: self.test_scenes,
            first_id: self.scene.first_id + self.scene.num_scenes as u64,
            ..self.scene.clone()
        };
        Ok(generate_synthetic_dataset(&cfg)?.into_iter().map(|(_, s)| s).collect())
    }

    pub fn training_data(&self, variant: Variant) -> Result<TrainingData, TrainError> {
        let scenes = self.train_scenes()?;
        let ids: Vec<u64> = scenes.iter().map(|s| s.image_id).collect();
        let split = split_dataset(&ids, self.label_fraction, self.scene.seed)
            .map_err(|e| ConfigError::new("label_fraction", e.to_string()))?;
        let mut data = TrainingData::from_split(&scenes, &split);
        if !variant.uses_unlabeled() {
            data.unlabeled.clear();
        }
        Ok(data)
    }
}

/// Ground truth and detections of `scenes` as an evaluation set.
pub fn eval_set(
    scenes: &[SceneSpec],
    dets: &[(u64, crate::geometry::Detection)],
    num_classes: usize,
) -> Result<EvalSet, crate::error::MetricsError> {
    let gts: Vec<_> = scenes
        .iter()
        .flat_map(|s| s.objects.iter().map(move |o| (s.image_id, o.bbox(), o.class_id)))
        .collect();
    let ids: Vec<u64> = scenes.iter().map(|s| s.image_id).collect();
    build_eval_set(&gts, &ids, dets, num_classes)
}

/// Scores a backend on `scenes`; crop-aware backends run two-stage
/// inference.
pub fn evaluate_backend(
    backend: &dyn DetectorBackend,
    scenes: &[SceneSpec],
    inference: &InferenceConfig,
    eval: &EvalConfig,
    multistage: bool,
) -> Result<EvalReport, TrainError> {
    let run = run_inference(scenes, backend, inference, multistage);
    if let Some((id, msg)) = run.errors.first() {
        return Err(TrainError::Model(crate::error::ModelError::Backend {
            image_id: *id,
            message: msg.clone(),
        }));
    }
    let set = eval_set(scenes, &run.detections(), backend.num_classes())
        .map_err(|e| TrainError::Invariant(e.to_string()))?;
    Ok(evaluate(&set, backend.num_classes(), eval))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
    pub state: TrainerState,
}

/// Trains one variant with every random stream derived from `seed` and
/// evaluates its final teacher.
pub fn run_variant(bench: &BenchmarkConfig, variant: Variant, seed: u64) -> Result<VariantResult, TrainError> {
    let b = bench.seeded(seed);
    b.validate()?;
    let cfg = variant.trainer_config(&b.trainer);
    let data = b.training_data(variant)?;
    let model = ToyModel::new(b.model.clone());
    let mut trainer = Trainer::new(cfg.clone(), &model, &data)?;
    let mut state = trainer.initial_state();
    trainer.run(&mut state, cfg.max_iters, None)?;
    let crop_aware = cfg.crop_labeled;
    let det = ToyDetector::new(model, state.teacher.clone(), crop_aware);
    let report = evaluate_backend(&det, &b.test_scenes()?, &b.inference, &b.eval, crop_aware)?;
    Ok(VariantResult {
        variant,
        seed,
        report,
        state,
    })
}

/// Single-stage against two-stage inference for one backend.
#[derive(Debug, Clone, PartialEq)]
pub struct StageComparison {
    pub single: EvalReport,
    pub multi: EvalReport,
    pub small_recall_single: f64,
    pub small_recall_multi: f64,
    pub crops_per_image: f64,
}

pub fn compare_stages(
    backend: &dyn DetectorBackend,
    scenes: &[SceneSpec],
    inference: &InferenceConfig,
    eval: &EvalConfig,
) -> Result<StageComparison, TrainError> {
    let k = backend.num_classes();
    let score = |multistage: bool| -> Result<(EvalReport, f64, f64), TrainError> {
        let run = run_inference(scenes, backend, inference, multistage);
        if let Some((id, msg)) = run.errors.first() {
            return Err(TrainError::Model(crate::error::ModelError::Backend {
                image_id: *id,
                message: msg.clone(),
            }));
        }
        let set = eval_set(scenes, &run.detections(), k).map_err(|e| TrainError::Invariant(e.to_string()))?;
        let crops: usize = run.results.iter().map(|r| r.crops.len()).sum();
        Ok((
            evaluate(&set, k, eval),
            recall_ratio(&set, eval.fg_iou, AreaRange::SMALL),
            crops as f64 / scenes.len().max(1) as f64,
        ))
    };
    let (single, small_recall_single, _) = score(false)?;
    let (multi, small_recall_multi, crops_per_image) = score(true)?;
    Ok(StageComparison {
        single,
        multi,
        small_recall_single,
        small_recall_multi,
        crops_per_image,
    })
}
