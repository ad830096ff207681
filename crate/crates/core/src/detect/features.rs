use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::View;
use crate::dataset::SceneSpec;
use crate::error::ConfigError;
use crate::geometry::{iou, Box};
use crate::seed::{self, tag};

pub const BIAS: usize = 0;
pub const LOG_AREA: usize = 1;
pub const ASPECT: usize = 2;
pub const CENTER_X: usize = 3;
pub const CENTER_Y: usize = 4;
pub const MAX_IOU: usize = 5;
pub const COUNT: usize = 6;
pub const COVER: usize = 7;
/// Four box hints (dx, dy, dw, dh) from the best-overlapping observed object.
pub const HINT: usize = 8;
pub const PAYLOAD_OFFSET: usize = 12;

const HINT_CLAMP: f64 = 2.0;
const ASPECT_CLAMP: f64 = 3.0;
/// Counts saturate near 32 objects.
const COUNT_SCALE: f64 = 3.496_507_561_466_480_4; // ln 33

/// Feature vector layout: fixed geometry block followed by the payload block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub payload_dim: usize,
}

impl FeatureLayout {
    pub fn len(&self) -> usize {
        PAYLOAD_OFFSET + self.payload_dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// How noisily the detector perceives objects in a view. Noise shrinks as
/// the object's area in view pixels grows, so upscaled crops see more.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    pub payload_noise: f64,
    pub reference_area: f64,
    pub min_noise: f64,
    pub max_noise: f64,
    /// Relative box noise at the reference area.
    pub box_noise: f64,
    pub seed: u64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            payload_noise: 0.5,
            reference_area: 1024.0,
            min_noise: 0.1,
            max_noise: 2.0,
            box_noise: 0.08,
            seed: 0,
        }
    }
}

impl ObservationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.payload_noise >= 0.0 && self.box_noise >= 0.0) {
            return Err(ConfigError::new("observation", "noise levels must be >= 0"));
        }
        if !(self.reference_area > 0.0) {
            return Err(ConfigError::new("observation.reference_area", "must be positive"));
        }
        if !(self.min_noise >= 0.0 && self.min_noise <= self.max_noise) {
            return Err(ConfigError::new("observation.min_noise", "must satisfy 0 <= min <= max"));
        }
        Ok(())
    }

    /// Size factor applied to both payload and box noise.
    pub fn factor(&self, area: f64) -> f64 {
        (self.reference_area / area).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedObject {
    pub index: usize,
    pub class_id: usize,
    /// True box in view coordinates, clipped.
    pub bbox: Box,
    /// Noisy box the detector perceives.
    pub observed: Box,
    /// Noisy payload shrunk toward zero by `1 / (1 + noise^2)`.
    pub payload: Vec<f64>,
}

/// Everything a backend perceives of a scene through one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewObservation {
    pub view: View,
    pub payload_dim: usize,
    pub objects: Vec<ObservedObject>,
}

fn mirror(b: &Box, width: f64) -> Box {
    Box::new(width - b.x2(), b.y1(), width - b.x1(), b.y2()).expect("mirroring keeps area")
}

impl ViewObservation {
    /// Noise is drawn per (object, view pixels); mirrored views see the same
    /// draw mirrored.
    pub fn new(scene: &SceneSpec, view: &View, payload_dim: usize, cfg: &ObservationConfig) -> Self {
        let plain = view.with_flip(false);
        let key = view.key();
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let objects = plain
            .visible_objects(scene)
            .into_iter()
            .map(|(index, bbox)| {
                let obj = &scene.objects[index];
                let mut rng = seed::rng(cfg.seed, &[tag::OBSERVE, scene.image_id, key, index as u64]);
                let f = cfg.factor(bbox.area());
                let pn = (cfg.payload_noise * f).clamp(cfg.min_noise, cfg.max_noise);
                let shrink = 1.0 / (1.0 + pn * pn);
                let payload = (0..payload_dim)
                    .map(|d| shrink * (obj.payload.get(d).copied().unwrap_or(0.0) + pn * unit.sample(&mut rng)))
                    .collect();
                let bn = (cfg.box_noise * f).min(0.5);
                let (cx, cy) = bbox.center();
                let (w, h) = (bbox.width(), bbox.height());
                let ocx = cx + w * bn * unit.sample(&mut rng);
                let ocy = cy + h * bn * unit.sample(&mut rng);
                let ow = w * (bn * unit.sample(&mut rng)).exp();
                let oh = h * (bn * unit.sample(&mut rng)).exp();
                let observed = Box::new(ocx - 0.5 * ow, ocy - 0.5 * oh, ocx + 0.5 * ow, ocy + 0.5 * oh)
                    .expect("observed size is positive");
                let (bbox, observed) = if view.flip {
                    (mirror(&bbox, view.out_size.0), mirror(&observed, view.out_size.0))
                } else {
                    (bbox, observed)
                };
                ObservedObject {
                    index,
                    class_id: obj.class_id,
                    bbox,
                    observed,
                    payload,
                }
            })
            .collect();
        ViewObservation {
            view: *view,
            payload_dim,
            objects,
        }
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            payload_dim: self.payload_dim,
        }
    }
}

/// Features of a proposal box (view coordinates). See the index constants
/// for the layout.
pub fn extract_features(obs: &ViewObservation, proposal: &Box) -> Vec<f64> {
    let mut x = vec![0.0; obs.layout().len()];
    let (vw, vh) = obs.view.out_size;
    let (w, h) = (proposal.width(), proposal.height());
    let (cx, cy) = proposal.center();
    x[BIAS] = 1.0;
    x[LOG_AREA] = proposal.area().ln() / 10.0;
    x[ASPECT] = (w / h).ln().clamp(-ASPECT_CLAMP, ASPECT_CLAMP) / ASPECT_CLAMP;
    x[CENTER_X] = cx / vw;
    x[CENTER_Y] = cy / vh;

    let mut best: Option<(f64, &ObservedObject)> = None;
    let mut count = 0usize;
    let mut covered = 0.0;
    for o in &obs.objects {
        let inter = proposal.intersection_area(&o.bbox);
        if inter <= 0.0 {
            continue;
        }
        covered += inter;
        if inter >= 0.5 * o.bbox.area() {
            count += 1;
        }
        let v = iou(proposal, &o.bbox);
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, o));
        }
        for (d, p) in o.payload.iter().enumerate() {
            x[PAYLOAD_OFFSET + d] += v * p;
        }
    }
    x[COUNT] = (1.0 + count as f64).ln() / COUNT_SCALE;
    x[COVER] = (covered / proposal.area()).min(1.0);
    if let Some((v, o)) = best {
        x[MAX_IOU] = v;
        let (ox, oy) = o.observed.center();
        let hint = [
            (ox - cx) / w,
            (oy - cy) / h,
            (o.observed.width() / w).ln(),
            (o.observed.height() / h).ln(),
        ];
        for (k, v) in hint.into_iter().enumerate() {
            x[HINT + k] = v.clamp(-HINT_CLAMP, HINT_CLAMP);
        }
    }
    x
}
