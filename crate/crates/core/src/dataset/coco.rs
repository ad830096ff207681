use std::collections::HashMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Annotation, Category, Dataset, ImageRecord, Provenance, Source, CROP_CATEGORY_NAME};
use crate::error::DatasetError;
use crate::geometry::Box;

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<Category>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: f64,
    height: f64,
    #[serde(default)]
    file_name: String,
    #[serde(default, skip_serializing_if = "is_original")]
    provenance: Provenance,
}

fn is_original(p: &Provenance) -> bool {
    matches!(p, Provenance::Original)
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default)]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "is_gt")]
    source: Source,
}

fn is_gt(s: &Source) -> bool {
    matches!(s, Source::GroundTruth)
}

/// What was dropped while loading.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub zero_area_dropped: usize,
}

pub fn load_annotations(path: &Path) -> Result<(Dataset, LoadReport), DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_annotations(&text, path)
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<(Dataset, LoadReport), DatasetError> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let mut base: Vec<Category> = file
        .categories
        .iter()
        .filter(|c| c.name != CROP_CATEGORY_NAME)
        .cloned()
        .collect();
    base.sort_by_key(|c| c.id);
    let crop_id = file
        .categories
        .iter()
        .find(|c| c.name == CROP_CATEGORY_NAME)
        .map(|c| c.id);
    let mut class_of: HashMap<u64, usize> =
        base.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    if let Some(id) = crop_id {
        class_of.insert(id, base.len());
    }

    let mut images = Vec::with_capacity(file.images.len());
    let mut index = HashMap::new();
    for img in file.images {
        if !(img.width > 0.0 && img.height > 0.0) {
            return Err(DatasetError::ImageSize(img.id));
        }
        index.insert(img.id, images.len());
        images.push(ImageRecord {
            image_id: img.id,
            file_name: img.file_name,
            width: img.width,
            height: img.height,
            annotations: Vec::new(),
            provenance: img.provenance,
        });
    }

    let mut report = LoadReport::default();
    for ann in file.annotations {
        let class_id = *class_of
            .get(&ann.category_id)
            .ok_or(DatasetError::UnknownCategory {
                annotation_id: ann.id,
                category_id: ann.category_id,
            })?;
        let &slot = index.get(&ann.image_id).ok_or(DatasetError::UnknownImage {
            annotation_id: ann.id,
            image_id: ann.image_id,
        })?;
        let rec = &mut images[slot];
        let [x, y, w, h] = ann.bbox;
        let clipped = Box::from_xywh(x, y, w, h)
            .ok()
            .and_then(|b| b.clip(rec.width, rec.height));
        match clipped {
            Some(bbox) => rec.annotations.push(Annotation {
                bbox,
                class_id,
                source: ann.source,
            }),
            None => report.zero_area_dropped += 1,
        }
    }
    if report.zero_area_dropped > 0 {
        warn!(
            "{}: dropped {} zero-area annotations",
            path.display(),
            report.zero_area_dropped
        );
    }
    Ok((
        Dataset {
            categories: base,
            images,
        },
        report,
    ))
}

fn crop_category(dataset: &Dataset) -> Category {
    Category {
        id: dataset.categories.iter().map(|c| c.id).max().unwrap_or(0) + 1,
        name: CROP_CATEGORY_NAME.to_string(),
    }
}

pub fn to_coco_json(dataset: &Dataset) -> String {
    let crop_cat = crop_category(dataset);
    let has_crops = dataset
        .images
        .iter()
        .flat_map(|r| &r.annotations)
        .any(|a| a.class_id == dataset.crop_class());
    let mut categories = dataset.categories.clone();
    if has_crops {
        categories.push(crop_cat.clone());
    }
    let mut annotations = Vec::new();
    let mut next_id = 1;
    for rec in &dataset.images {
        for a in &rec.annotations {
            let category_id = if a.class_id == dataset.crop_class() {
                crop_cat.id
            } else {
                dataset.categories[a.class_id].id
            };
            annotations.push(CocoAnnotation {
                id: next_id,
                image_id: rec.image_id,
                category_id,
                bbox: a.bbox.to_xywh(),
                area: Some(a.bbox.area()),
                iscrowd: 0,
                source: a.source,
            });
            next_id += 1;
        }
    }
    let file = CocoFile {
        images: dataset
            .images
            .iter()
            .map(|r| CocoImage {
                id: r.image_id,
                width: r.width,
                height: r.height,
                file_name: r.file_name.clone(),
                provenance: r.provenance.clone(),
            })
            .collect(),
        annotations,
        categories,
    };
    serde_json::to_string_pretty(&file).expect("dataset serializes")
}

pub fn write_annotations(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    std::fs::write(path, to_coco_json(dataset) + "\n").map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}
