//! Desk-scale stand-in for aerial imagery.
//!
//! A scene is a list of objects with a box, a class and an abstract feature
//! payload. Small objects are grouped in Gaussian clusters and large objects
//! are scattered uniformly. Everything is a pure function of the seed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Annotation, ImageRecord};
use crate::error::ConfigError;
use crate::geometry::Box;
use crate::seed::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_scenes: usize,
    pub first_id: u64,
    pub width: f64,
    pub height: f64,
    pub num_classes: usize,
    pub payload_dim: usize,
    pub clusters: (usize, usize),
    pub cluster_objects: (usize, usize),
    pub cluster_spread: f64,
    pub small_size: (f64, f64),
    pub scattered: (usize, usize),
    pub large_size: (f64, f64),
    pub payload_signal: f64,
    pub payload_noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_scenes: 100,
            first_id: 1,
            width: 800.0,
            height: 600.0,
            num_classes: 3,
            payload_dim: 24,
            clusters: (2, 3),
            cluster_objects: (6, 12),
            cluster_spread: 18.0,
            small_size: (8.0, 16.0),
            scattered: (3, 6),
            large_size: (40.0, 110.0),
            payload_signal: 1.0,
            payload_noise: 0.35,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |f: &str, r: &str| Err(ConfigError::new(format!("scene.{f}"), r));
        if !(self.width > 0.0 && self.height > 0.0) {
            return err("width", "scene size must be positive");
        }
        if self.num_classes == 0 {
            return err("num_classes", "must be >= 1");
        }
        if self.payload_dim < self.num_classes {
            return err("payload_dim", "must be >= num_classes");
        }
        for (name, (lo, hi)) in [
            ("clusters", self.clusters),
            ("cluster_objects", self.cluster_objects),
            ("scattered", self.scattered),
        ] {
            if lo > hi {
                return err(name, "range is reversed");
            }
        }
        for (name, (lo, hi)) in [("small_size", self.small_size), ("large_size", self.large_size)] {
            if !(lo > 0.0 && lo <= hi) {
                return err(name, "range must be positive and ordered");
            }
            if hi >= self.width.min(self.height) {
                return err(name, "objects must fit in the scene");
            }
        }
        if !(self.cluster_spread >= 0.0) {
            return err("cluster_spread", "must be >= 0");
        }
        if !(self.payload_noise >= 0.0 && self.payload_signal.is_finite()) {
            return err("payload_noise", "must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub class_id: usize,
    pub payload: Vec<f64>,
}

impl SceneObject {
    pub fn bbox(&self) -> Box {
        let (cx, cy) = self.center;
        let (w, h) = self.size;
        Box::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
            .expect("object sizes are positive")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDescriptor {
    pub center: (f64, f64),
    pub spread: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<SceneObject>,
    pub clusters: Vec<ClusterDescriptor>,
    pub seed: u64,
}

fn payload(rng: &mut impl Rng, class_id: usize, dim: usize, signal: f64, noise: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..dim)
        .map(|d| {
            let base = if d == class_id { signal } else { 0.0 };
            base + noise * normal.sample(rng)
        })
        .collect()
}

fn place(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        0.5 * (lo + hi)
    }
}

fn count(rng: &mut impl Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

impl SceneSpec {
    pub fn size(&self) -> (f64, f64) {
        (self.width, self.height)
    }

    pub fn boxes(&self) -> Vec<Box> {
        self.objects.iter().map(SceneObject::bbox).collect()
    }

    pub fn generate(config: &SceneConfig, image_id: u64) -> SceneSpec {
        let scene_seed = seed::mix(config.seed, &[tag::SCENE, image_id]);
        let mut rng = seed::rng(scene_seed, &[]);
        let mut pay_rng = seed::rng(scene_seed, &[tag::PAYLOAD]);
        let (w, h) = (config.width, config.height);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut objects = Vec::new();
        let mut clusters = Vec::new();

        let n_clusters = count(&mut rng, config.clusters);
        let margin = 3.0 * config.cluster_spread + config.small_size.1;
        for _ in 0..n_clusters {
            let center = (place(&mut rng, margin, w - margin), place(&mut rng, margin, h - margin));
            let n = count(&mut rng, config.cluster_objects);
            for _ in 0..n {
                let side = place(&mut rng, config.small_size.0, config.small_size.1);
                let aspect = place(&mut rng, 0.75, 1.33);
                let size = (side * aspect.sqrt(), side / aspect.sqrt());
                let cx = center.0 + config.cluster_spread * normal.sample(&mut rng);
                let cy = center.1 + config.cluster_spread * normal.sample(&mut rng);
                let class_id = rng.random_range(0..config.num_classes);
                objects.push(SceneObject {
                    center: (
                        cx.clamp(0.5 * size.0, w - 0.5 * size.0),
                        cy.clamp(0.5 * size.1, h - 0.5 * size.1),
                    ),
                    size,
                    class_id,
                    payload: payload(
                        &mut pay_rng,
                        class_id,
                        config.payload_dim,
                        config.payload_signal,
                        config.payload_noise,
                    ),
                });
            }
            clusters.push(ClusterDescriptor {
                center,
                spread: config.cluster_spread,
                count: n,
            });
        }

        let n_large = count(&mut rng, config.scattered);
        for _ in 0..n_large {
            let side = place(&mut rng, config.large_size.0, config.large_size.1);
            let aspect = place(&mut rng, 0.6, 1.66);
            let size = (side * aspect.sqrt(), side / aspect.sqrt());
            let cx = place(&mut rng, 0.5 * size.0, w - 0.5 * size.0);
            let cy = place(&mut rng, 0.5 * size.1, h - 0.5 * size.1);
            let class_id = rng.random_range(0..config.num_classes);
            objects.push(SceneObject {
                center: (cx, cy),
                size,
                class_id,
                payload: payload(
                    &mut pay_rng,
                    class_id,
                    config.payload_dim,
                    config.payload_signal,
                    config.payload_noise,
                ),
            });
        }

        SceneSpec {
            image_id,
            width: w,
            height: h,
            objects,
            clusters,
            seed: scene_seed,
        }
    }

    /// Scene for an annotated image without a generator behind it: objects
    /// are the base-class annotations, payloads are drawn from the seed.
    pub fn from_record(
        record: &ImageRecord,
        num_classes: usize,
        payload_dim: usize,
        signal: f64,
        noise: f64,
        seed: u64,
    ) -> SceneSpec {
        let scene_seed = seed::mix(seed, &[tag::SCENE, record.image_id]);
        let mut pay_rng = seed::rng(scene_seed, &[tag::PAYLOAD]);
        let objects = record
            .annotations
            .iter()
            .filter(|a| a.class_id < num_classes)
            .map(|a| SceneObject {
                center: a.bbox.center(),
                size: (a.bbox.width(), a.bbox.height()),
                class_id: a.class_id,
                payload: payload(&mut pay_rng, a.class_id, payload_dim.max(num_classes), signal, noise),
            })
            .collect();
        SceneSpec {
            image_id: record.image_id,
            width: record.width,
            height: record.height,
            objects,
            clusters: Vec::new(),
            seed: scene_seed,
        }
    }

    pub fn to_record(&self) -> ImageRecord {
        let mut rec = ImageRecord::new(self.image_id, self.width, self.height);
        rec.annotations = self
            .objects
            .iter()
            .map(|o| Annotation::gt(o.bbox(), o.class_id))
            .collect();
        rec
    }
}

/// Generates `config.num_scenes` scenes with consecutive ids.
pub fn generate_synthetic_dataset(config: &SceneConfig) -> Result<Vec<(ImageRecord, SceneSpec)>, ConfigError> {
    config.validate()?;
    Ok((0..config.num_scenes as u64)
        .map(|i| {
            let scene = SceneSpec::generate(config, config.first_id + i);
            (scene.to_record(), scene)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scenes() {
        let cfg = SceneConfig {
            num_scenes: 3,
            clusters: (0, 0),
            scattered: (0, 0),
            ..SceneConfig::default()
        };
        let out = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|(r, _)| r.annotations.is_empty()));
    }

    #[test]
    fn deterministic_bytes() {
        let cfg = SceneConfig {
            num_scenes: 5,
            seed: 11,
            ..SceneConfig::default()
        };
        let a = serde_json::to_string(&generate_synthetic_dataset(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_synthetic_dataset(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = SceneConfig { seed: 12, ..cfg };
        let c = serde_json::to_string(&generate_synthetic_dataset(&other).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn objects_inside_scene() {
        let cfg = SceneConfig {
            num_scenes: 40,
            cluster_spread: 60.0,
            ..SceneConfig::default()
        };
        for (rec, scene) in generate_synthetic_dataset(&cfg).unwrap() {
            for a in &rec.annotations {
                assert!(a.bbox.x1() >= 0.0 && a.bbox.y1() >= 0.0);
                assert!(a.bbox.x2() <= scene.width && a.bbox.y2() <= scene.height);
            }
        }
    }

    #[test]
    fn cluster_spread_statistics() {
        // two clusters of ten: squared distance between members of a cluster
        // averages 4 * spread^2
        let spread = 20.0;
        let mut sum = 0.0;
        let mut n = 0.0;
        for seed in 0..100 {
            let cfg = SceneConfig {
                num_scenes: 1,
                clusters: (2, 2),
                cluster_objects: (10, 10),
                scattered: (0, 0),
                cluster_spread: spread,
                seed,
                ..SceneConfig::default()
            };
            let (rec, scene) = generate_synthetic_dataset(&cfg).unwrap().remove(0);
            assert_eq!(rec.annotations.len(), 20);
            assert_eq!(scene.clusters.len(), 2);
            for c in 0..2 {
                let members = &scene.objects[c * 10..(c + 1) * 10];
                for i in 0..10 {
                    for j in (i + 1)..10 {
                        let dx = members[i].center.0 - members[j].center.0;
                        let dy = members[i].center.1 - members[j].center.1;
                        sum += dx * dx + dy * dy;
                        n += 1.0;
                    }
                }
            }
        }
        let ratio = (sum / n) / (4.0 * spread * spread);
        assert!((ratio - 1.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn payload_peaks_at_class() {
        let cfg = SceneConfig {
            num_scenes: 10,
            payload_noise: 0.05,
            ..SceneConfig::default()
        };
        for (_, scene) in generate_synthetic_dataset(&cfg).unwrap() {
            for o in &scene.objects {
                let argmax = o
                    .payload
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                assert_eq!(argmax, o.class_id);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SceneConfig {
            payload_dim: 1,
            ..SceneConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SceneConfig {
            clusters: (3, 1),
            ..SceneConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
