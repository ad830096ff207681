//! Annotation records, COCO-style I/O, tiling, splits, crop augmentation and
//! the synthetic scene generator.

mod augment;
mod coco;
mod split;
pub mod synthetic;
mod tiling;

pub use augment::{augment_with_crops, crop_child, UpscalePolicy};
pub use coco::{load_annotations, parse_annotations, to_coco_json, write_annotations, LoadReport};
pub use split::{read_split, split_dataset, write_split, DatasetSplit};
pub use synthetic::{generate_synthetic_dataset, ClusterDescriptor, SceneConfig, SceneObject, SceneSpec};
pub use tiling::{tile_dataset, tile_image, tile_offsets, TileOutput};

use serde::{Deserialize, Serialize};

use crate::geometry::Box;

/// Name of the extra category that marks density crops in annotation files.
pub const CROP_CATEGORY_NAME: &str = "density_crop";

/// Share of an annotation's area that must fall inside a tile or crop for the
/// annotation to be carried into it.
pub const MIN_VISIBLE_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: Box,
    pub class_id: usize,
    pub source: Source,
}

impl Annotation {
    pub fn gt(bbox: Box, class_id: usize) -> Self {
        Self {
            bbox,
            class_id,
            source: Source::GroundTruth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Original,
    Tile {
        parent_id: u64,
        offset: (f64, f64),
    },
    Crop {
        parent_id: u64,
        crop_box: Box,
        upscale_size: (f64, f64),
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub file_name: String,
    pub width: f64,
    pub height: f64,
    pub annotations: Vec<Annotation>,
    pub provenance: Provenance,
}

impl ImageRecord {
    pub fn new(image_id: u64, width: f64, height: f64) -> Self {
        Self {
            image_id,
            file_name: format!("{image_id:06}.png"),
            width,
            height,
            annotations: Vec::new(),
            provenance: Provenance::Original,
        }
    }

    pub fn size(&self) -> (f64, f64) {
        (self.width, self.height)
    }

    pub fn boxes_of_class(&self, class_id: usize) -> Vec<Box> {
        self.annotations
            .iter()
            .filter(|a| a.class_id == class_id)
            .map(|a| a.bbox)
            .collect()
    }

    /// Boxes of every class below `num_classes` (the base classes).
    pub fn base_boxes(&self, num_classes: usize) -> Vec<Box> {
        self.annotations
            .iter()
            .filter(|a| a.class_id < num_classes)
            .map(|a| a.bbox)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// Images plus the base categories; internal class `i` is `categories[i]`
/// and class `categories.len()` is the density crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<Category>,
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn crop_class(&self) -> usize {
        self.categories.len()
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.image_id == id)
    }

    pub fn next_image_id(&self) -> u64 {
        self.images.iter().map(|r| r.image_id).max().map_or(1, |m| m + 1)
    }

    /// Adds density crops as crop-class annotations on each image.
    pub fn add_crop_annotations(&mut self, crops: &std::collections::BTreeMap<u64, Vec<Box>>) {
        let crop_class = self.crop_class();
        for rec in &mut self.images {
            if let Some(list) = crops.get(&rec.image_id) {
                rec.annotations
                    .extend(list.iter().map(|&b| Annotation::gt(b, crop_class)));
            }
        }
    }
}
