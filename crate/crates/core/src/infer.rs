//! Two-stage inference: detect on the whole image, pick density crops,
//! detect again on upscaled crops, map those detections back and fuse.

use std::io::{BufRead, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::croplab::{label_density_crops, CropParams};
use crate::dataset::{SceneSpec, UpscalePolicy};
use crate::detect::{DetectorBackend, View};
use crate::error::{ConfigError, DatasetError, ModelError};
use crate::geometry::{nms, Box, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Use the detector's own density-crop predictions.
    #[default]
    Predicted,
    /// Cluster confident base-class detections into crops.
    Relabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub crop_mode: CropMode,
    pub crop_score_threshold: f64,
    /// Score a base-class detection needs to seed crops in relabeled mode.
    pub base_score_threshold: f64,
    pub crop_params: CropParams,
    pub max_crops_per_image: usize,
    pub upscale: UpscalePolicy,
    pub fusion_nms: f64,
    /// Whether command-line inference runs the zoomed second stage.
    pub multistage: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            crop_mode: CropMode::Predicted,
            crop_score_threshold: 0.5,
            base_score_threshold: 0.5,
            crop_params: CropParams::default(),
            max_crops_per_image: 8,
            upscale: UpscalePolicy::default(),
            fusion_nms: 0.5,
            multistage: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("crop_score_threshold", self.crop_score_threshold),
            ("base_score_threshold", self.base_score_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::new(format!("inference.{name}"), "must lie in [0, 1]"));
            }
        }
        if !(self.fusion_nms > 0.0 && self.fusion_nms <= 1.0) {
            return Err(ConfigError::new("inference.fusion_nms", "must lie in (0, 1]"));
        }
        self.crop_params.validate()?;
        self.upscale.validate()
    }
}

/// Crops to zoom into, in image coordinates, at most
/// `max_crops_per_image`.
pub fn select_crops(
    first_pass: &[Detection],
    config: &InferenceConfig,
    image_size: (f64, f64),
    num_classes: usize,
) -> Result<Vec<Box>, ModelError> {
    let (w, h) = image_size;
    let mut crops: Vec<Box> = match config.crop_mode {
        CropMode::Predicted => {
            let mut cands: Vec<&Detection> = first_pass
                .iter()
                .filter(|d| d.class_id == num_classes && d.score > config.crop_score_threshold)
                .collect();
            cands.sort_by(|a, b| b.score.total_cmp(&a.score));
            cands.into_iter().filter_map(|d| d.bbox.clip(w, h)).collect()
        }
        CropMode::Relabeled => {
            let boxes: Vec<Box> = first_pass
                .iter()
                .filter(|d| d.class_id < num_classes && d.score > config.base_score_threshold)
                .map(|d| d.bbox)
                .collect();
            label_density_crops(&boxes, image_size, &config.crop_params)?
        }
    };
    crops.truncate(config.max_crops_per_image);
    Ok(crops)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultistageOutput {
    pub detections: Vec<Detection>,
    pub crops: Vec<Box>,
}

/// Whole-image detection with density-crop predictions removed, after NMS.
pub fn detect_single(
    scene: &SceneSpec,
    backend: &dyn DetectorBackend,
    config: &InferenceConfig,
) -> Result<Vec<Detection>, ModelError> {
    let k = backend.num_classes();
    let view = View::full(scene);
    let dets: Vec<Detection> = backend
        .detect(scene, &view)?
        .into_iter()
        .filter(|d| d.class_id < k)
        .collect();
    Ok(nms(&dets, config.fusion_nms))
}

pub fn detect_multistage(
    scene: &SceneSpec,
    backend: &dyn DetectorBackend,
    config: &InferenceConfig,
) -> Result<MultistageOutput, ModelError> {
    let k = backend.num_classes();
    let full = View::full(scene);
    let first = backend.detect(scene, &full)?;
    let first: Vec<Detection> = first
        .into_iter()
        .map(|d| Detection { bbox: full.to_parent(&d.bbox), ..d })
        .collect();
    let crops = select_crops(&first, config, scene.size(), k)?;
    let second: Vec<Vec<Detection>> = crops
        .par_iter()
        .map(|crop| {
            let view = View::crop(*crop, config.upscale.size_for(crop));
            Ok(backend
                .detect(scene, &view)?
                .into_iter()
                .filter(|d| d.class_id < k)
                .filter_map(|d| {
                    let b = view.to_parent(&d.bbox).intersection(crop)?;
                    Some(Detection { bbox: b, ..d })
                })
                .collect())
        })
        .collect::<Result<_, ModelError>>()?;
    let mut all: Vec<Detection> = first.into_iter().filter(|d| d.class_id < k).collect();
    all.extend(second.into_iter().flatten());
    let (w, h) = scene.size();
    let all: Vec<Detection> = all
        .into_iter()
        .filter_map(|d| Some(Detection { bbox: d.bbox.clip(w, h)?, ..d }))
        .collect();
    Ok(MultistageOutput {
        detections: nms(&all, config.fusion_nms),
        crops,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub image_id: u64,
    pub detections: Vec<Detection>,
    pub crops: Vec<Box>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InferenceRun {
    pub results: Vec<ImageResult>,
    /// Images the backend failed on, with the error message.
    pub errors: Vec<(u64, String)>,
}

impl InferenceRun {
    pub fn detections(&self) -> Vec<(u64, Detection)> {
        self.results
            .iter()
            .flat_map(|r| r.detections.iter().map(move |d| (r.image_id, *d)))
            .collect()
    }

    pub fn total_seconds(&self) -> f64 {
        self.results.iter().map(|r| r.seconds).sum()
    }

    pub fn fps(&self) -> f64 {
        let t = self.total_seconds();
        if t > 0.0 {
            self.results.len() as f64 / t
        } else {
            0.0
        }
    }
}

/// Runs inference over all scenes in parallel. Results keep scene order;
/// per-image failures are collected instead of aborting the run.
pub fn run_inference(
    scenes: &[SceneSpec],
    backend: &dyn DetectorBackend,
    config: &InferenceConfig,
    multistage: bool,
) -> InferenceRun {
    let outcomes: Vec<Result<ImageResult, (u64, String)>> = scenes
        .par_iter()
        .map(|scene| {
            let start = Instant::now();
            let out = if multistage {
                detect_multistage(scene, backend, config)
            } else {
                detect_single(scene, backend, config).map(|detections| MultistageOutput {
                    detections,
                    crops: Vec::new(),
                })
            };
            match out {
                Ok(o) => Ok(ImageResult {
                    image_id: scene.image_id,
                    detections: o.detections,
                    crops: o.crops,
                    seconds: start.elapsed().as_secs_f64(),
                }),
                Err(e) => Err((scene.image_id, e.to_string())),
            }
        })
        .collect();
    let mut run = InferenceRun::default();
    for o in outcomes {
        match o {
            Ok(r) => run.results.push(r),
            Err(e) => {
                log::warn!("inference failed on image {}: {}", e.0, e.1);
                run.errors.push(e);
            }
        }
    }
    run
}

#[derive(Serialize, Deserialize)]
struct DumpLine {
    image_id: u64,
    class_id: usize,
    score: f64,
    #[serde(rename = "box")]
    bbox: Box,
}

/// One JSON object per line: `image_id`, `class_id`, `score`, `box`.
pub fn write_detection_dump(dets: &[(u64, Detection)], out: &mut impl Write) -> std::io::Result<()> {
    for (image_id, d) in dets {
        let line = DumpLine {
            image_id: *image_id,
            class_id: d.class_id,
            score: d.score,
            bbox: d.bbox,
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detection_dump(
    input: impl BufRead,
    path: &std::path::Path,
) -> Result<Vec<(u64, Detection)>, DatasetError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let d: DumpLine = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push((d.image_id, Detection::new(d.bbox, d.class_id, d.score)?));
    }
    Ok(out)
}

/// Per-image timing as tab-separated text.
pub fn write_timing(run: &InferenceRun, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "image_id\tseconds\tcrops\tdetections")?;
    for r in &run.results {
        writeln!(out, "{}\t{:.6}\t{}\t{}", r.image_id, r.seconds, r.crops.len(), r.detections.len())?;
    }
    writeln!(out, "# images={} seconds={:.6} fps={:.3}", run.results.len(), run.total_seconds(), run.fps())
}
