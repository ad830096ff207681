//! Density crop labeling.
//!
//! Boxes are grown by `sigma`, connected when their IoU exceeds `theta`, and
//! greedily merged around the most connected box. The merge runs for
//! `merge_steps` rounds, each round treating the previous crops as boxes, and
//! drops crops whose area ratio to the image exceeds `max_area_ratio`.

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, GeometryError};
use crate::geometry::{enclosing_box, pairwise_iou, scale_box, Box};

/// How far a merge reaches from the selected box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    /// Take every box reachable from the selected box through live
    /// connections (its connected component).
    #[default]
    Component,
    /// Take the selected box and its direct neighbours only.
    Neighborhood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropParams {
    pub merge_steps: usize,
    pub sigma: f64,
    pub theta: f64,
    pub max_area_ratio: f64,
    pub min_cluster: usize,
    pub strategy: MergeStrategy,
}

impl Default for CropParams {
    fn default() -> Self {
        Self {
            merge_steps: 3,
            sigma: 15.0,
            theta: 0.1,
            max_area_ratio: 0.3,
            min_cluster: 2,
            strategy: MergeStrategy::Component,
        }
    }
}

impl CropParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.merge_steps < 1 {
            return Err(ConfigError::new("crop.merge_steps", "must be >= 1"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(ConfigError::new("crop.sigma", "must be finite and >= 0"));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(ConfigError::new("crop.theta", "must lie in (0, 1)"));
        }
        if !(self.max_area_ratio > 0.0 && self.max_area_ratio <= 1.0) {
            return Err(ConfigError::new("crop.max_area_ratio", "must lie in (0, 1]"));
        }
        if self.min_cluster < 2 {
            return Err(ConfigError::new("crop.min_cluster", "must be >= 2"));
        }
        Ok(())
    }
}

/// IoU matrix and the thresholded, symmetric adjacency derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionGraph {
    pub iou: Vec<Vec<f64>>,
    pub connected: Vec<Vec<bool>>,
}

impl ConnectionGraph {
    pub fn len(&self) -> usize {
        self.connected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.connected.is_empty()
    }

    fn degree(&self, i: usize) -> usize {
        self.connected[i].iter().filter(|&&c| c).count()
    }

    fn isolate(&mut self, i: usize) {
        let n = self.len();
        for j in 0..n {
            self.connected[i][j] = false;
            self.connected[j][i] = false;
        }
    }
}

pub fn build_connections(boxes: &[Box], theta: f64) -> ConnectionGraph {
    let iou = pairwise_iou(boxes);
    let connected = iou
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &v)| i != j && v > theta)
                .collect()
        })
        .collect();
    ConnectionGraph { iou, connected }
}

/// One crop and the indices of the boxes it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedCrop {
    pub crop: Box,
    pub members: Vec<usize>,
}

/// Repeatedly picks the box with the most live connections (lowest index on
/// ties), encloses it with its merge set, and removes every member from the
/// graph. Crops are returned in discovery order.
pub fn merge_once(
    boxes: &[Box],
    graph: &ConnectionGraph,
    strategy: MergeStrategy,
) -> Vec<MergedCrop> {
    let mut live = graph.clone();
    let n = live.len();
    let mut out = Vec::new();
    loop {
        let mut best = None;
        let mut best_degree = 0;
        for m in 0..n {
            let d = live.degree(m);
            if d > best_degree {
                best_degree = d;
                best = Some(m);
            }
        }
        let Some(seed) = best else { break };

        let mut members = match strategy {
            MergeStrategy::Neighborhood => {
                let mut v = vec![seed];
                v.extend((0..n).filter(|&j| live.connected[seed][j]));
                v
            }
            MergeStrategy::Component => {
                let mut seen = vec![false; n];
                let mut stack = vec![seed];
                seen[seed] = true;
                let mut v = Vec::new();
                while let Some(i) = stack.pop() {
                    v.push(i);
                    for j in 0..n {
                        if live.connected[i][j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
                v
            }
        };
        members.sort_unstable();
        let member_boxes: Vec<Box> = members.iter().map(|&i| boxes[i]).collect();
        let crop = enclosing_box(&member_boxes).expect("merge set contains the seed");
        for &i in &members {
            live.isolate(i);
        }
        out.push(MergedCrop { crop, members });
    }
    out
}

/// A density crop with the input boxes it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct CropCluster {
    pub crop: Box,
    pub members: Vec<usize>,
}

fn fits(crop: &Box, image_area: f64, max_ratio: f64) -> bool {
    crop.area() / image_area <= max_ratio
}

fn dedup(clusters: Vec<CropCluster>) -> Vec<CropCluster> {
    let mut out: Vec<CropCluster> = Vec::with_capacity(clusters.len());
    for c in clusters {
        if let Some(existing) = out.iter_mut().find(|e| e.crop == c.crop) {
            existing.members.extend(c.members);
            existing.members.sort_unstable();
            existing.members.dedup();
        } else {
            out.push(c);
        }
    }
    out
}

/// One merge round over existing crops: merged crops first, then the crops
/// that did not merge, unchanged.
fn merge_round(current: Vec<CropCluster>, params: &CropParams, image_area: f64) -> Vec<CropCluster> {
    let boxes: Vec<Box> = current.iter().map(|c| c.crop).collect();
    let graph = build_connections(&boxes, params.theta);
    let merged = merge_once(&boxes, &graph, params.strategy);
    let mut used = vec![false; current.len()];
    let mut next = Vec::with_capacity(current.len());
    for m in merged {
        let mut members = Vec::new();
        for &i in &m.members {
            used[i] = true;
            members.extend_from_slice(&current[i].members);
        }
        members.sort_unstable();
        members.dedup();
        next.push(CropCluster {
            crop: m.crop,
            members,
        });
    }
    next.extend(
        current
            .into_iter()
            .zip(used)
            .filter(|(_, u)| !u)
            .map(|(c, _)| c),
    );
    next.retain(|c| fits(&c.crop, image_area, params.max_area_ratio));
    dedup(next)
}

/// Full crop labeling with member bookkeeping (indices into `boxes`).
pub fn label_density_clusters(
    boxes: &[Box],
    image_size: (f64, f64),
    params: &CropParams,
) -> Result<Vec<CropCluster>, GeometryError> {
    let (w, h) = image_size;
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let image_area = w * h;
    let scaled = boxes
        .iter()
        .map(|b| scale_box(b, params.sigma, w, h))
        .collect::<Result<Vec<_>, _>>()?;

    let graph = build_connections(&scaled, params.theta);
    let mut current: Vec<CropCluster> = merge_once(&scaled, &graph, params.strategy)
        .into_iter()
        .filter(|m| m.members.len() >= params.min_cluster)
        .filter(|m| fits(&m.crop, image_area, params.max_area_ratio))
        .map(|m| CropCluster {
            crop: m.crop,
            members: m.members,
        })
        .collect();
    current = dedup(current);

    for _ in 1..params.merge_steps {
        let before = current.len();
        current = merge_round(current, params, image_area);
        if current.len() == before {
            // no merge happened; later rounds would see the same graph
            break;
        }
    }
    Ok(current)
}

/// Density crops for the boxes of one image.
pub fn label_density_crops(
    boxes: &[Box],
    image_size: (f64, f64),
    params: &CropParams,
) -> Result<Vec<Box>, GeometryError> {
    Ok(label_density_clusters(boxes, image_size, params)?
        .into_iter()
        .map(|c| c.crop)
        .collect())
}

/// Runs the later merge rounds over existing crops: no expansion, no
/// minimum cluster size, unmerged crops kept.
pub fn refine_crops(crops: &[Box], image_size: (f64, f64), params: &CropParams) -> Vec<Box> {
    let image_area = image_size.0 * image_size.1;
    let mut current: Vec<CropCluster> = crops
        .iter()
        .enumerate()
        .map(|(i, &crop)| CropCluster {
            crop,
            members: vec![i],
        })
        .filter(|c| fits(&c.crop, image_area, params.max_area_ratio))
        .collect();
    current = dedup(current);
    for _ in 0..params.merge_steps {
        let before = current.len();
        current = merge_round(current, params, image_area);
        if current.len() == before {
            break;
        }
    }
    current.into_iter().map(|c| c.crop).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> Box {
        Box::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn connections() {
        let g = build_connections(&[bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 30.0)], 0.1);
        assert!(g.connected.iter().flatten().all(|&c| !c));

        let pair = [bx(0.0, 0.0, 10.0, 10.0), bx(5.0, 0.0, 15.0, 10.0)];
        let g = build_connections(&pair, 0.1);
        assert!(g.connected[0][1] && g.connected[1][0]);
        assert!(!g.connected[0][0] && !g.connected[1][1]);
        let g = build_connections(&pair, 0.5);
        assert!(g.connected.iter().flatten().all(|&c| !c));
    }

    #[test]
    fn merge_without_connections_is_empty() {
        let boxes = [bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 30.0)];
        let g = build_connections(&boxes, 0.1);
        assert!(merge_once(&boxes, &g, MergeStrategy::Neighborhood).is_empty());
        assert!(merge_once(&boxes, &g, MergeStrategy::Component).is_empty());
    }

    #[test]
    fn chain_of_three_merges_around_middle() {
        // a-b and b-c overlap, a and c are disjoint
        let boxes = [
            bx(0.0, 0.0, 10.0, 10.0),
            bx(6.0, 0.0, 16.0, 10.0),
            bx(12.0, 0.0, 22.0, 10.0),
        ];
        let g = build_connections(&boxes, 0.1);
        assert!(!g.connected[0][2]);
        for strategy in [MergeStrategy::Neighborhood, MergeStrategy::Component] {
            let crops = merge_once(&boxes, &g, strategy);
            assert_eq!(crops.len(), 1);
            assert_eq!(crops[0].members, vec![0, 1, 2]);
            assert_eq!(crops[0].crop, bx(0.0, 0.0, 22.0, 10.0));
        }
    }

    #[test]
    fn two_pairs_give_two_crops() {
        let boxes = [
            bx(0.0, 0.0, 10.0, 10.0),
            bx(100.0, 100.0, 110.0, 110.0),
            bx(5.0, 0.0, 15.0, 10.0),
            bx(105.0, 100.0, 115.0, 110.0),
        ];
        let g = build_connections(&boxes, 0.1);
        let crops = merge_once(&boxes, &g, MergeStrategy::Neighborhood);
        assert_eq!(crops.len(), 2);
        assert_eq!(crops[0].members, vec![0, 2]);
        assert_eq!(crops[1].members, vec![1, 3]);
    }

    #[test]
    fn long_chain_differs_between_strategies() {
        let boxes: Vec<Box> = (0..4)
            .map(|i| bx(6.0 * i as f64, 0.0, 6.0 * i as f64 + 10.0, 10.0))
            .collect();
        let g = build_connections(&boxes, 0.1);
        let hood = merge_once(&boxes, &g, MergeStrategy::Neighborhood);
        assert_eq!(hood[0].members, vec![0, 1, 2]);
        assert_eq!(hood.len(), 1);
        let comp = merge_once(&boxes, &g, MergeStrategy::Component);
        assert_eq!(comp[0].members, vec![0, 1, 2, 3]);
    }

    #[test]
    fn label_edge_cases() {
        let p = CropParams::default();
        assert!(label_density_crops(&[], (500.0, 500.0), &p).unwrap().is_empty());
        assert!(label_density_crops(&[bx(1.0, 1.0, 9.0, 9.0)], (500.0, 500.0), &p)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn label_three_box_fixture() {
        let boxes = [
            bx(0.0, 0.0, 20.0, 20.0),
            bx(25.0, 0.0, 45.0, 20.0),
            bx(200.0, 200.0, 220.0, 220.0),
        ];
        let p = CropParams {
            merge_steps: 1,
            sigma: 5.0,
            theta: 0.05,
            max_area_ratio: 0.5,
            ..CropParams::default()
        };
        let crops = label_density_crops(&boxes, (500.0, 500.0), &p).unwrap();
        assert_eq!(crops, vec![bx(0.0, 0.0, 50.0, 25.0)]);
    }

    #[test]
    fn oversized_crops_are_filtered() {
        let boxes = [bx(0.0, 0.0, 60.0, 60.0), bx(40.0, 0.0, 100.0, 60.0)];
        let p = CropParams {
            sigma: 0.0,
            max_area_ratio: 0.1,
            ..CropParams::default()
        };
        // enclosing box 100x60 on a 100x100 image is 60% of the area
        assert!(label_density_crops(&boxes, (100.0, 100.0), &p).unwrap().is_empty());
    }

    #[test]
    fn later_rounds_merge_overlapping_crops() {
        // two clusters whose crops overlap once enclosed
        let boxes = [
            bx(0.0, 0.0, 10.0, 10.0),
            bx(8.0, 8.0, 18.0, 18.0),
            bx(11.0, 0.0, 17.0, 3.0),
            bx(11.0, 2.0, 17.0, 5.0),
        ];
        let one = CropParams {
            merge_steps: 1,
            sigma: 0.0,
            theta: 0.01,
            max_area_ratio: 1.0,
            min_cluster: 2,
            strategy: MergeStrategy::Neighborhood,
        };
        let g = build_connections(&boxes, 0.01);
        assert!(!g.connected[0][2] && !g.connected[1][2] && !g.connected[1][3]);
        let first = label_density_crops(&boxes, (100.0, 100.0), &one).unwrap();
        assert_eq!(first.len(), 2);
        let three = CropParams {
            merge_steps: 3,
            ..one
        };
        let merged = label_density_crops(&boxes, (100.0, 100.0), &three).unwrap();
        assert_eq!(merged, vec![bx(0.0, 0.0, 18.0, 18.0)]);
    }

    #[test]
    fn params_validation() {
        assert!(CropParams::default().validate().is_ok());
        for bad in [
            CropParams { merge_steps: 0, ..Default::default() },
            CropParams { theta: 0.0, ..Default::default() },
            CropParams { theta: 1.0, ..Default::default() },
            CropParams { max_area_ratio: 0.0, ..Default::default() },
            CropParams { min_cluster: 1, ..Default::default() },
            CropParams { sigma: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
