use rayon::prelude::*;

use super::{Annotation, Dataset, ImageRecord, Provenance, MIN_VISIBLE_FRACTION};
use crate::error::ConfigError;
use crate::geometry::Box;

/// Sliding-window start positions along one axis; the last window is pulled
/// back so it ends on the image edge.
pub fn tile_offsets(extent: f64, tile: f64, stride: f64) -> Vec<f64> {
    if extent <= tile {
        return vec![0.0];
    }
    let mut out = Vec::new();
    let mut x = 0.0;
    loop {
        if x + tile >= extent {
            let last = extent - tile;
            if out.last().map_or(true, |&p: &f64| p < last) {
                out.push(last);
            }
            break;
        }
        out.push(x);
        x += stride;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileOutput {
    pub tiles: Vec<ImageRecord>,
    /// Parent annotations that made it into no tile.
    pub lost: usize,
}

/// Splits one image into overlapping tiles. Tile ids are taken from
/// `next_id` in row-major order.
pub fn tile_image(
    record: &ImageRecord,
    tile: f64,
    stride: f64,
    next_id: &mut u64,
) -> Result<TileOutput, ConfigError> {
    if !(tile > 0.0) {
        return Err(ConfigError::new("tile.size", "must be positive"));
    }
    if !(stride > 0.0 && stride <= tile) {
        return Err(ConfigError::new("tile.stride", "must lie in (0, tile]"));
    }
    let xs = tile_offsets(record.width, tile, stride);
    let ys = tile_offsets(record.height, tile, stride);
    let tw = tile.min(record.width);
    let th = tile.min(record.height);
    let mut seen = vec![false; record.annotations.len()];
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &oy in &ys {
        for &ox in &xs {
            let window = Box::new(ox, oy, ox + tw, oy + th).expect("tile has positive size");
            let mut annotations = Vec::new();
            for (i, a) in record.annotations.iter().enumerate() {
                let Some(inside) = a.bbox.intersection(&window) else {
                    continue;
                };
                if inside.area() >= MIN_VISIBLE_FRACTION * a.bbox.area() {
                    seen[i] = true;
                    annotations.push(Annotation {
                        bbox: inside.translate(-ox, -oy).expect("shifted box keeps its area"),
                        ..*a
                    });
                }
            }
            let id = *next_id;
            *next_id += 1;
            tiles.push(ImageRecord {
                image_id: id,
                file_name: format!("{}_{}_{}", record.file_name, ox, oy),
                width: tw,
                height: th,
                annotations,
                provenance: Provenance::Tile {
                    parent_id: record.image_id,
                    offset: (ox, oy),
                },
            });
        }
    }
    Ok(TileOutput {
        tiles,
        lost: seen.iter().filter(|s| !**s).count(),
    })
}

/// Tiles every image of a dataset. Ids continue after the largest existing id
/// and follow input order, independent of the worker count.
pub fn tile_dataset(dataset: &Dataset, tile: f64, stride: f64) -> Result<(Dataset, usize), ConfigError> {
    let per_image: Vec<TileOutput> = dataset
        .images
        .par_iter()
        .map(|rec| {
            let mut scratch = 0;
            tile_image(rec, tile, stride, &mut scratch)
        })
        .collect::<Result<_, _>>()?;
    let mut next = dataset.next_image_id();
    let mut lost = 0;
    let mut images = Vec::new();
    for out in per_image {
        lost += out.lost;
        for mut t in out.tiles {
            t.image_id = next;
            next += 1;
            images.push(t);
        }
    }
    Ok((
        Dataset {
            categories: dataset.categories.clone(),
            images,
        },
        lost,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets() {
        assert_eq!(tile_offsets(1000.0, 1500.0, 1000.0), vec![0.0]);
        assert_eq!(tile_offsets(2500.0, 1500.0, 1000.0), vec![0.0, 1000.0]);
        assert_eq!(tile_offsets(3000.0, 1500.0, 1000.0), vec![0.0, 1000.0, 1500.0]);
        assert_eq!(tile_offsets(1500.0, 1500.0, 1000.0), vec![0.0]);
    }

    #[test]
    fn small_image_single_tile() {
        let rec = ImageRecord::new(1, 1000.0, 1000.0);
        let mut id = 10;
        let out = tile_image(&rec, 1500.0, 1000.0, &mut id).unwrap();
        assert_eq!(out.tiles.len(), 1);
        assert_eq!(out.tiles[0].size(), (1000.0, 1000.0));
        assert_eq!(id, 11);
    }

    #[test]
    fn four_tiles_and_shifted_annotation() {
        let mut rec = ImageRecord::new(1, 2500.0, 2500.0);
        rec.annotations
            .push(Annotation::gt(Box::new(1800.0, 200.0, 1850.0, 260.0).unwrap(), 0));
        let mut id = 1;
        let out = tile_image(&rec, 1500.0, 1000.0, &mut id).unwrap();
        let offs: Vec<_> = out
            .tiles
            .iter()
            .map(|t| match t.provenance {
                Provenance::Tile { offset, .. } => offset,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(
            offs,
            vec![(0.0, 0.0), (1000.0, 0.0), (0.0, 1000.0), (1000.0, 1000.0)]
        );
        let holders: Vec<_> = out.tiles.iter().filter(|t| !t.annotations.is_empty()).collect();
        assert_eq!(holders.len(), 1);
        assert_eq!(
            holders[0].annotations[0].bbox,
            Box::new(800.0, 200.0, 850.0, 260.0).unwrap()
        );
        assert_eq!(out.lost, 0);
    }

    #[test]
    fn straddling_annotation_follows_majority() {
        let mut rec = ImageRecord::new(1, 2000.0, 1000.0);
        rec.annotations
            .push(Annotation::gt(Box::new(1460.0, 10.0, 1560.0, 20.0).unwrap(), 0));
        let mut id = 1;
        let out = tile_image(&rec, 1500.0, 1000.0, &mut id).unwrap();
        // tiles start at 0 and 500; the box is 40% inside the first, fully in the second
        assert_eq!(out.tiles[0].annotations.len(), 0);
        assert_eq!(out.tiles[1].annotations.len(), 1);
    }

    #[test]
    fn rejects_bad_stride() {
        let rec = ImageRecord::new(1, 100.0, 100.0);
        let mut id = 1;
        assert!(tile_image(&rec, 50.0, 60.0, &mut id).is_err());
        assert!(tile_image(&rec, 0.0, 0.0, &mut id).is_err());
    }
}
