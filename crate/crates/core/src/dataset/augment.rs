use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Annotation, ImageRecord, Provenance, MIN_VISIBLE_FRACTION};
use crate::error::ConfigError;
use crate::geometry::{project, Box};

/// Output size of an upscaled crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpscalePolicy {
    /// Scale so the shorter crop edge becomes `target`, capped at
    /// `max_factor`.
    ShorterEdge { target: f64, max_factor: f64 },
    /// Multiply both sides by a constant.
    Factor { factor: f64 },
    /// Resize to a fixed size regardless of aspect.
    Fixed { width: f64, height: f64 },
}

impl Default for UpscalePolicy {
    fn default() -> Self {
        UpscalePolicy::ShorterEdge {
            target: 600.0,
            max_factor: 4.0,
        }
    }
}

impl UpscalePolicy {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ok = match *self {
            UpscalePolicy::ShorterEdge { target, max_factor } => target > 0.0 && max_factor > 0.0,
            UpscalePolicy::Factor { factor } => factor > 0.0,
            UpscalePolicy::Fixed { width, height } => width > 0.0 && height > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ConfigError::new("upscale", "sizes and factors must be positive"))
        }
    }

    /// Rounded output size for a crop, at least one pixel per side.
    pub fn size_for(&self, crop: &Box) -> (f64, f64) {
        let (w, h) = (crop.width(), crop.height());
        let (ow, oh) = match *self {
            UpscalePolicy::ShorterEdge { target, max_factor } => {
                let f = (target / w.min(h)).min(max_factor);
                (w * f, h * f)
            }
            UpscalePolicy::Factor { factor } => (w * factor, h * factor),
            UpscalePolicy::Fixed { width, height } => (width, height),
        };
        (ow.round().max(1.0), oh.round().max(1.0))
    }
}

/// Child record for one crop of `parent`. Annotations of classes below
/// `num_classes` that keep at least half their area inside the crop are
/// mapped into upscaled crop coordinates and clipped.
pub fn crop_child(
    parent: &ImageRecord,
    crop: &Box,
    policy: &UpscalePolicy,
    num_classes: usize,
    image_id: u64,
) -> ImageRecord {
    let (ow, oh) = policy.size_for(crop);
    let mut annotations = Vec::new();
    for a in parent.annotations.iter().filter(|a| a.class_id < num_classes) {
        let Some(inside) = a.bbox.intersection(crop) else {
            continue;
        };
        if inside.area() < MIN_VISIBLE_FRACTION * a.bbox.area() {
            continue;
        }
        let mapped = project(&a.bbox, crop, (ow, oh)).expect("crop size is positive");
        if let Some(bbox) = mapped.clip(ow, oh) {
            annotations.push(Annotation { bbox, ..*a });
        }
    }
    ImageRecord {
        image_id,
        file_name: format!(
            "{}_crop_{}_{}_{}_{}",
            parent.file_name,
            crop.x1(),
            crop.y1(),
            crop.x2(),
            crop.y2()
        ),
        width: ow,
        height: oh,
        annotations,
        provenance: Provenance::Crop {
            parent_id: parent.image_id,
            crop_box: *crop,
            upscale_size: (ow, oh),
        },
    }
}

/// Appends one upscaled child record per crop after the unchanged parents.
/// Child ids continue after the largest parent id, in parent then crop order.
pub fn augment_with_crops(
    records: &[ImageRecord],
    crops: &BTreeMap<u64, Vec<Box>>,
    policy: &UpscalePolicy,
    num_classes: usize,
) -> Vec<ImageRecord> {
    let mut next = records.iter().map(|r| r.image_id).max().map_or(1, |m| m + 1);
    let mut out = records.to_vec();
    for parent in records {
        for crop in crops.get(&parent.image_id).into_iter().flatten() {
            out.push(crop_child(parent, crop, policy, num_classes, next));
            next += 1;
        }
    }
    out
}
