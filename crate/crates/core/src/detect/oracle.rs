use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{DetectorBackend, View};
use crate::croplab::{label_density_crops, CropParams};
use crate::dataset::SceneSpec;
use crate::error::{ConfigError, ModelError};
use crate::geometry::{Box, Detection};
use crate::seed::{self, tag};

/// Miss probability as a function of object area in view pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MissCurve {
    /// `below` for areas under `area`, `above` otherwise.
    Step { area: f64, below: f64, above: f64 },
    /// Piecewise linear in log-area through `(area, probability)` knots,
    /// constant outside the first and last knot.
    Knots { points: Vec<(f64, f64)> },
}

impl Default for MissCurve {
    fn default() -> Self {
        MissCurve::Knots {
            points: vec![(100.0, 0.9), (400.0, 0.5), (1600.0, 0.05)],
        }
    }
}

impl MissCurve {
    pub fn never() -> Self {
        MissCurve::Step {
            area: 0.0,
            below: 0.0,
            above: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        match self {
            MissCurve::Step { area, below, above } => {
                if !(*area >= 0.0 && in_unit(*below) && in_unit(*above)) {
                    return Err(ConfigError::new("miss", "probabilities must lie in [0, 1]"));
                }
                if above > below {
                    return Err(ConfigError::new("miss", "must not increase with area"));
                }
            }
            MissCurve::Knots { points } => {
                if points.is_empty() {
                    return Err(ConfigError::new("miss.points", "need at least one knot"));
                }
                for w in points.windows(2) {
                    if !(w[0].0 < w[1].0) || w[1].1 > w[0].1 {
                        return Err(ConfigError::new(
                            "miss.points",
                            "areas must increase and probabilities must not",
                        ));
                    }
                }
                if points.iter().any(|&(a, p)| !(a > 0.0 && in_unit(p))) {
                    return Err(ConfigError::new("miss.points", "areas > 0, probabilities in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn probability(&self, area: f64) -> f64 {
        match self {
            MissCurve::Step { area: a, below, above } => {
                if area < *a {
                    *below
                } else {
                    *above
                }
            }
            MissCurve::Knots { points } => {
                let first = points[0];
                let last = points[points.len() - 1];
                if area <= first.0 {
                    return first.1;
                }
                if area >= last.0 {
                    return last.1;
                }
                let la = area.ln();
                for w in points.windows(2) {
                    let (a0, p0) = w[0];
                    let (a1, p1) = w[1];
                    if area <= a1 {
                        let t = (la - a0.ln()) / (a1.ln() - a0.ln());
                        return p0 + t * (p1 - p0);
                    }
                }
                last.1
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleNoiseModel {
    pub miss: MissCurve,
    /// Exponent applied to the view's area scale before looking up the miss
    /// curve; 1 means the full upscale counts.
    pub upscale_relief: f64,
    pub jitter_std: f64,
    pub score_mean: f64,
    pub score_std: f64,
    pub false_positives: f64,
    pub fp_score_mean: f64,
    pub fp_score_std: f64,
    pub crop_detections: bool,
    pub crop_score_mean: f64,
    pub crop_score_std: f64,
    pub seed: u64,
}

impl Default for OracleNoiseModel {
    fn default() -> Self {
        Self {
            miss: MissCurve::default(),
            upscale_relief: 1.0,
            jitter_std: 1.5,
            score_mean: 0.8,
            score_std: 0.1,
            false_positives: 2.0,
            fp_score_mean: 0.3,
            fp_score_std: 0.1,
            crop_detections: true,
            crop_score_mean: 0.8,
            crop_score_std: 0.1,
            seed: 0,
        }
    }
}

impl OracleNoiseModel {
    /// Emits every object exactly, with score 1 and nothing else.
    pub fn noiseless() -> Self {
        Self {
            miss: MissCurve::never(),
            jitter_std: 0.0,
            score_mean: 1.0,
            score_std: 0.0,
            false_positives: 0.0,
            crop_detections: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.miss.validate()?;
        if !(self.jitter_std >= 0.0 && self.score_std >= 0.0 && self.fp_score_std >= 0.0) {
            return Err(ConfigError::new("noise", "standard deviations must be >= 0"));
        }
        if !(self.false_positives >= 0.0) {
            return Err(ConfigError::new("noise.false_positives", "must be >= 0"));
        }
        if !(self.upscale_relief >= 0.0) {
            return Err(ConfigError::new("noise.upscale_relief", "must be >= 0"));
        }
        Ok(())
    }
}

/// Scripted detector: reports ground truth through the noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleDetector {
    pub noise: OracleNoiseModel,
    pub num_classes: usize,
    pub crop_params: CropParams,
}

impl OracleDetector {
    pub fn new(noise: OracleNoiseModel, num_classes: usize) -> Self {
        Self {
            noise,
            num_classes,
            crop_params: CropParams::default(),
        }
    }

    fn score(rng: &mut impl Rng, mean: f64, std: f64) -> f64 {
        let s = if std > 0.0 {
            Normal::new(mean, std).expect("std checked").sample(rng)
        } else {
            mean
        };
        s.clamp(0.01, 1.0)
    }

    fn jitter(&self, rng: &mut impl Rng, b: &Box, view: &View) -> Box {
        if self.noise.jitter_std == 0.0 {
            return *b;
        }
        let n = Normal::new(0.0, self.noise.jitter_std).expect("std checked");
        let c = b.coords();
        Box::new(
            c[0] + n.sample(rng),
            c[1] + n.sample(rng),
            c[2] + n.sample(rng),
            c[3] + n.sample(rng),
        )
        .ok()
        .and_then(|j| view.clip(&j))
        .unwrap_or(*b)
    }
}

impl DetectorBackend for OracleDetector {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn crop_aware(&self) -> bool {
        self.noise.crop_detections
    }

    fn detect(&self, scene: &SceneSpec, view: &View) -> Result<Vec<Detection>, ModelError> {
        let key = view.key();
        let flip = view.flip as u64;
        let (sx, sy) = view.scale();
        let area_gain = (sx * sy).powf(self.noise.upscale_relief - 1.0);
        let mut out = Vec::new();

        for (i, bbox) in view.visible_objects(scene) {
            let mut rng = seed::rng(self.noise.seed, &[tag::ORACLE, scene.image_id, key, flip, i as u64]);
            let effective_area = bbox.area() * area_gain;
            let missed = rng.random::<f64>() < self.noise.miss.probability(effective_area);
            let jittered = self.jitter(&mut rng, &bbox, view);
            let score = Self::score(&mut rng, self.noise.score_mean, self.noise.score_std);
            if !missed {
                out.push(Detection::new(jittered, scene.objects[i].class_id, score)?);
            }
        }

        if self.noise.false_positives > 0.0 && self.num_classes > 0 {
            let mut rng = seed::rng(self.noise.seed, &[tag::FALSE_POS, scene.image_id, key, flip]);
            let n = Poisson::new(self.noise.false_positives)
                .expect("rate checked")
                .sample(&mut rng) as usize;
            let (w, h) = view.out_size;
            for _ in 0..n {
                let side = rng.random_range(8f64.ln()..64f64.ln()).exp().min(0.5 * w.min(h));
                let x = rng.random_range(0.0..(w - side).max(1e-9));
                let y = rng.random_range(0.0..(h - side).max(1e-9));
                let class_id = rng.random_range(0..self.num_classes);
                let score = Self::score(&mut rng, self.noise.fp_score_mean, self.noise.fp_score_std);
                if let Ok(b) = Box::new(x, y, x + side, y + side) {
                    if let Some(b) = view.clip(&b) {
                        out.push(Detection::new(b, class_id, score)?);
                    }
                }
            }
        }

        if self.noise.crop_detections && view.depth == 0 {
            let crops = label_density_crops(&scene.boxes(), scene.size(), &self.crop_params)?;
            for (k, crop) in crops.iter().enumerate() {
                let Some(in_view) = view.clip(&view.to_view(crop)) else {
                    continue;
                };
                let mut rng = seed::rng(
                    self.noise.seed,
                    &[tag::CROP_DET, scene.image_id, key, flip, k as u64],
                );
                let jittered = self.jitter(&mut rng, &in_view, view);
                let score = Self::score(&mut rng, self.noise.crop_score_mean, self.noise.crop_score_std);
                out.push(Detection::new(jittered, self.num_classes, score)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SceneConfig, SceneObject};

    fn square_scene(sides: &[f64]) -> SceneSpec {
        let objects = sides
            .iter()
            .enumerate()
            .map(|(i, &s)| SceneObject {
                center: (50.0 + 100.0 * i as f64, 50.0),
                size: (s, s),
                class_id: i % 2,
                payload: vec![0.0; 2],
            })
            .collect();
        SceneSpec {
            image_id: 1,
            width: 100.0 * sides.len() as f64,
            height: 100.0,
            objects,
            clusters: vec![],
            seed: 0,
        }
    }

    #[test]
    fn noiseless_reports_ground_truth() {
        let scene = SceneSpec::generate(&SceneConfig::default(), 4);
        let oracle = OracleDetector::new(OracleNoiseModel::noiseless(), 3);
        let dets = oracle.detect(&scene, &View::full(&scene)).unwrap();
        let visible = View::full(&scene).visible_objects(&scene);
        assert_eq!(dets.len(), visible.len());
        for (d, (i, b)) in dets.iter().zip(visible) {
            assert_eq!(d.bbox, b);
            assert_eq!(d.class_id, scene.objects[i].class_id);
            assert_eq!(d.score, 1.0);
        }
    }

    #[test]
    fn forced_miss_lifted_by_upscale() {
        let noise = OracleNoiseModel {
            miss: MissCurve::Step {
                area: 32.0 * 32.0,
                below: 1.0,
                above: 0.0,
            },
            ..OracleNoiseModel::noiseless()
        };
        let oracle = OracleDetector::new(noise, 2);
        let scene = square_scene(&[7.0, 8.0, 40.0]);
        let at1 = oracle.detect(&scene, &View::full(&scene)).unwrap();
        assert_eq!(at1.len(), 1);
        let at4 = oracle.detect(&scene, &View::full_scaled(&scene, 4.0)).unwrap();
        // 8x8 reaches 32x32 at 4x, 7x7 does not
        assert_eq!(at4.len(), 2);
    }

    #[test]
    fn deterministic_per_seed() {
        let scene = SceneSpec::generate(&SceneConfig::default(), 9);
        let oracle = OracleDetector::new(OracleNoiseModel::default(), 3);
        let v = View::full(&scene);
        assert_eq!(oracle.detect(&scene, &v).unwrap(), oracle.detect(&scene, &v).unwrap());
        let other = OracleDetector::new(
            OracleNoiseModel {
                seed: 1,
                ..OracleNoiseModel::default()
            },
            3,
        );
        assert_ne!(oracle.detect(&scene, &v).unwrap(), other.detect(&scene, &v).unwrap());
    }

    #[test]
    fn crop_detections_use_reserved_class() {
        let cfg = SceneConfig::default();
        let scene = SceneSpec::generate(&cfg, 2);
        let oracle = OracleDetector::new(
            OracleNoiseModel {
                crop_detections: true,
                ..OracleNoiseModel::noiseless()
            },
            cfg.num_classes,
        );
        let dets = oracle.detect(&scene, &View::full(&scene)).unwrap();
        assert!(dets.iter().any(|d| d.class_id == cfg.num_classes));
    }

    #[test]
    fn miss_curve_shape() {
        let c = MissCurve::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.probability(10.0), 0.9);
        assert_eq!(c.probability(1e6), 0.05);
        assert!((c.probability(200.0) - 0.7).abs() < 1e-12);
        let mut prev = 1.0;
        for a in 1..4000 {
            let p = c.probability(a as f64);
            assert!(p <= prev + 1e-15);
            prev = p;
        }
        let bad = MissCurve::Knots {
            points: vec![(10.0, 0.1), (20.0, 0.5)],
        };
        assert!(bad.validate().is_err());
    }
}
