//! Detector backends.
//!
//! A backend looks at a [`View`] of a synthetic scene (the whole image or an
//! upscaled crop, optionally mirrored) and returns detections in view
//! coordinates. Two backends ship with the crate: a scripted oracle with a
//! size-dependent miss model and a trainable linear detector.

pub mod features;
mod oracle;
mod toy;

pub use features::{
    extract_features, FeatureLayout, ObservationConfig, ObservedObject, ViewObservation, PAYLOAD_OFFSET,
};
pub use oracle::{MissCurve, OracleDetector, OracleNoiseModel};
pub use toy::{
    assign_targets, decode_box, encode_box, loss_sup, loss_unsup, strong_augment, toy_forward,
    Forward, Layout, LossOutput, ProposalConfig, PseudoSample, Sample, StrongAugConfig,
    ToyDetector, ToyModel, ToyModelConfig, ViewSamples, WeightVector,
};

use crate::dataset::{SceneSpec, MIN_VISIBLE_FRACTION};
use crate::error::ModelError;
use crate::geometry::{project, reproject, Box, Detection};
use crate::seed;

/// The detector contract shared by inference and training.
pub trait DetectorBackend: Send + Sync {
    /// Number of base classes; class id `num_classes()` is the density crop.
    fn num_classes(&self) -> usize;

    /// Whether the backend emits density-crop detections.
    fn crop_aware(&self) -> bool;

    /// Detections in view coordinates. Deterministic for a given scene, view
    /// and backend state.
    fn detect(&self, scene: &SceneSpec, view: &View) -> Result<Vec<Detection>, ModelError>;
}

/// A rectangular window of a scene resampled to `out_size`, optionally
/// mirrored horizontally. `depth` is 0 for whole images and 1 for crops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub window: Box,
    pub out_size: (f64, f64),
    pub flip: bool,
    pub depth: u8,
}

impl View {
    pub fn full(scene: &SceneSpec) -> View {
        View {
            window: Box::new(0.0, 0.0, scene.width, scene.height).expect("scene has positive size"),
            out_size: (scene.width, scene.height),
            flip: false,
            depth: 0,
        }
    }

    /// Whole scene resampled by a uniform factor.
    pub fn full_scaled(scene: &SceneSpec, factor: f64) -> View {
        View {
            out_size: (scene.width * factor, scene.height * factor),
            ..View::full(scene)
        }
    }

    pub fn crop(window: Box, out_size: (f64, f64)) -> View {
        View {
            window,
            out_size,
            flip: false,
            depth: 1,
        }
    }

    pub fn with_flip(self, flip: bool) -> View {
        View { flip, ..self }
    }

    pub fn scale(&self) -> (f64, f64) {
        (
            self.out_size.0 / self.window.width(),
            self.out_size.1 / self.window.height(),
        )
    }

    /// Geometric mean of the two axis scales.
    pub fn upscale(&self) -> f64 {
        let (sx, sy) = self.scale();
        (sx * sy).sqrt()
    }

    /// Parent box into view coordinates (not clipped).
    pub fn to_view(&self, b: &Box) -> Box {
        let p = project(b, &self.window, self.out_size).expect("view size is positive");
        if self.flip {
            let w = self.out_size.0;
            Box::new(w - p.x2(), p.y1(), w - p.x1(), p.y2()).expect("mirroring keeps area")
        } else {
            p
        }
    }

    /// View box back into parent coordinates.
    pub fn to_parent(&self, b: &Box) -> Box {
        let unflipped = if self.flip {
            let w = self.out_size.0;
            Box::new(w - b.x2(), b.y1(), w - b.x1(), b.y2()).expect("mirroring keeps area")
        } else {
            *b
        };
        reproject(&unflipped, &self.window, self.out_size).expect("view size is positive")
    }

    pub fn clip(&self, b: &Box) -> Option<Box> {
        b.clip(self.out_size.0, self.out_size.1)
    }

    /// Identifies the pixels of the view; mirroring is not part of the key.
    pub fn key(&self) -> u64 {
        let c = self.window.coords();
        seed::mix(
            self.depth as u64,
            &[
                c[0].to_bits(),
                c[1].to_bits(),
                c[2].to_bits(),
                c[3].to_bits(),
                self.out_size.0.to_bits(),
                self.out_size.1.to_bits(),
            ],
        )
    }

    /// Scene objects with at least half their area inside the view, as
    /// `(object index, clipped box in view coordinates)`.
    pub fn visible_objects(&self, scene: &SceneSpec) -> Vec<(usize, Box)> {
        scene
            .objects
            .iter()
            .enumerate()
            .filter_map(|(i, o)| {
                let full = self.to_view(&o.bbox());
                let clipped = self.clip(&full)?;
                (clipped.area() >= MIN_VISIBLE_FRACTION * full.area()).then_some((i, clipped))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SceneConfig, SceneSpec};

    #[test]
    fn view_round_trip_with_flip() {
        let crop = Box::new(100.0, 50.0, 300.0, 150.0).unwrap();
        let v = View::crop(crop, (400.0, 200.0)).with_flip(true);
        let b = Box::new(120.0, 60.0, 140.0, 80.0).unwrap();
        let there = v.to_view(&b);
        assert_eq!(there, Box::new(320.0, 20.0, 360.0, 60.0).unwrap());
        let back = v.to_parent(&there);
        for (x, y) in back.coords().iter().zip(b.coords()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(v.upscale(), 2.0);
    }

    #[test]
    fn key_ignores_flip() {
        let scene = SceneSpec::generate(&SceneConfig::default(), 1);
        let v = View::full(&scene);
        assert_eq!(v.key(), v.with_flip(true).key());
        assert_ne!(v.key(), View::full_scaled(&scene, 2.0).key());
    }
}
