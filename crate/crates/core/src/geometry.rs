//! Axis-aligned box kernels shared by every stage of the pipeline.
//!
//! Boxes use continuous pixel coordinates with `(x1, y1)` as the top-left
//! corner and `(x2, y2)` as the bottom-right corner. All functions here are
//! pure.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// An axis-aligned rectangle with positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Box {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl Box {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite([x1, y1, x2, y2]));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::Degenerate([x1, y1, x2, y2]));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    /// Overlap rectangle, `None` when the boxes share no area.
    pub fn intersection(&self, other: &Box) -> Option<Box> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 < x2 && y1 < y2).then_some(Box { x1, y1, x2, y2 })
    }

    pub fn intersection_area(&self, other: &Box) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn contains(&self, other: &Box) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Clips to `[0, width] x [0, height]`; `None` if nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<Box> {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let x2 = self.x2.clamp(0.0, width);
        let y2 = self.y2.clamp(0.0, height);
        (x1 < x2 && y1 < y2).then_some(Box { x1, y1, x2, y2 })
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Box, GeometryError> {
        Box::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

impl TryFrom<[f64; 4]> for Box {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        Box::new(c[0], c[1], c[2], c[3])
    }
}

impl From<Box> for [f64; 4] {
    fn from(b: Box) -> Self {
        b.coords()
    }
}

/// A scored, classified box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: Box, class_id: usize, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::Score(score));
        }
        Ok(Self {
            bbox,
            class_id,
            score,
        })
    }
}

pub fn iou(a: &Box, b: &Box) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(1.0)
}

/// Row-major `n x n` IoU matrix with a unit diagonal.
pub fn pairwise_iou(boxes: &[Box]) -> Vec<Vec<f64>> {
    let n = boxes.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] = 1.0;
        for j in (i + 1)..n {
            let v = iou(&boxes[i], &boxes[j]);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    m
}

/// Grows every side of `b` by `sigma` pixels and clips to the image.
pub fn scale_box(b: &Box, sigma: f64, width: f64, height: f64) -> Result<Box, GeometryError> {
    if !(sigma >= 0.0) {
        return Err(GeometryError::NegativeExpansion(sigma));
    }
    let grown = Box::new(b.x1 - sigma, b.y1 - sigma, b.x2 + sigma, b.y2 + sigma)?;
    grown
        .clip(width, height)
        .ok_or(GeometryError::Degenerate(grown.coords()))
}

pub fn enclosing_box(boxes: &[Box]) -> Result<Box, GeometryError> {
    let first = boxes.first().ok_or(GeometryError::Empty)?;
    let mut out = *first;
    for b in &boxes[1..] {
        out.x1 = out.x1.min(b.x1);
        out.y1 = out.y1.min(b.y1);
        out.x2 = out.x2.max(b.x2);
        out.y2 = out.y2.max(b.y2);
    }
    Ok(out)
}

/// Maps a box predicted on an upscaled crop image of size `crop_size` back
/// into the parent image, where the crop occupies `crop`.
pub fn reproject(p: &Box, crop: &Box, crop_size: (f64, f64)) -> Result<Box, GeometryError> {
    let (iw, ih) = crop_size;
    if !(iw > 0.0 && ih > 0.0) {
        return Err(GeometryError::CropSize(iw, ih));
    }
    let sw = crop.width() / iw;
    let sh = crop.height() / ih;
    Box::new(
        sw * p.x1 + crop.x1,
        sh * p.y1 + crop.y1,
        sw * p.x2 + crop.x1,
        sh * p.y2 + crop.y1,
    )
}

/// Inverse of [`reproject`]: parent-image box into upscaled crop coordinates.
/// The result is not clipped to the crop.
pub fn project(p: &Box, crop: &Box, crop_size: (f64, f64)) -> Result<Box, GeometryError> {
    let (iw, ih) = crop_size;
    if !(iw > 0.0 && ih > 0.0) {
        return Err(GeometryError::CropSize(iw, ih));
    }
    let sx = iw / crop.width();
    let sy = ih / crop.height();
    Box::new(
        (p.x1 - crop.x1) * sx,
        (p.y1 - crop.y1) * sy,
        (p.x2 - crop.x1) * sx,
        (p.y2 - crop.y1) * sy,
    )
}

/// Greedy per-class non-maximum suppression.
///
/// Detections are visited by descending score (ties by lower input index); a
/// detection survives when its IoU with every kept detection of the same class
/// is at most `iou_thresh`. Output is in visiting order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> Box {
        Box::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn rejects_degenerate_and_nonfinite() {
        assert!(Box::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(Box::new(3.0, 0.0, 1.0, 5.0).is_err());
        assert!(Box::new(f64::NAN, 0.0, 1.0, 5.0).is_err());
        assert!(Box::new(0.0, 0.0, f64::INFINITY, 5.0).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &bx(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        // touching edges share no area
        assert_eq!(iou(&a, &bx(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn pairwise_cases() {
        assert!(pairwise_iou(&[]).is_empty());
        assert_eq!(pairwise_iou(&[bx(1.0, 1.0, 2.0, 2.0)]), vec![vec![1.0]]);
        let m = pairwise_iou(&[bx(0.0, 0.0, 10.0, 10.0), bx(5.0, 0.0, 15.0, 10.0)]);
        assert_eq!(m[0][0], 1.0);
        assert_eq!(m[1][1], 1.0);
        assert!((m[0][1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m[0][1], m[1][0]);
    }

    #[test]
    fn scale_box_cases() {
        let b = bx(10.0, 10.0, 20.0, 20.0);
        assert_eq!(scale_box(&b, 0.0, 500.0, 500.0).unwrap(), b);
        assert_eq!(
            scale_box(&bx(0.0, 0.0, 20.0, 20.0), 5.0, 500.0, 500.0).unwrap(),
            bx(0.0, 0.0, 25.0, 25.0)
        );
        assert_eq!(
            scale_box(&bx(490.0, 490.0, 500.0, 500.0), 5.0, 500.0, 500.0).unwrap(),
            bx(485.0, 485.0, 500.0, 500.0)
        );
        assert!(scale_box(&b, -1.0, 500.0, 500.0).is_err());
    }

    #[test]
    fn enclosing_cases() {
        assert!(enclosing_box(&[]).is_err());
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(enclosing_box(&[a]).unwrap(), a);
        assert_eq!(
            enclosing_box(&[a, bx(5.0, 5.0, 20.0, 15.0)]).unwrap(),
            bx(0.0, 0.0, 20.0, 15.0)
        );
    }

    #[test]
    fn reproject_cases() {
        let unit = reproject(
            &bx(10.0, 10.0, 20.0, 20.0),
            &bx(0.0, 0.0, 100.0, 100.0),
            (100.0, 100.0),
        )
        .unwrap();
        assert_eq!(unit, bx(10.0, 10.0, 20.0, 20.0));
        let half = reproject(
            &bx(40.0, 20.0, 80.0, 60.0),
            &bx(100.0, 100.0, 300.0, 200.0),
            (400.0, 200.0),
        )
        .unwrap();
        assert_eq!(half, bx(120.0, 110.0, 140.0, 130.0));
        assert!(reproject(&half, &half, (0.0, 10.0)).is_err());
    }

    fn det(b: Box, c: usize, s: f64) -> Detection {
        Detection::new(b, c, s).unwrap()
    }

    #[test]
    fn nms_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let far = bx(50.0, 50.0, 60.0, 60.0);
        assert_eq!(nms(&[det(a, 0, 0.5), det(far, 0, 0.6)], 0.5).len(), 2);
        let kept = nms(&[det(a, 0, 0.7), det(a, 0, 0.9)], 0.5);
        assert_eq!(kept, vec![det(a, 0, 0.9)]);
        // other class is never suppressed
        assert_eq!(nms(&[det(a, 0, 0.7), det(a, 1, 0.9)], 0.5).len(), 2);
        // equal scores keep the lower index first
        let b = bx(0.0, 0.0, 10.0, 11.0);
        assert_eq!(nms(&[det(a, 0, 0.8), det(b, 0, 0.8)], 0.5), vec![det(a, 0, 0.8)]);
    }

    #[test]
    fn detection_score_bounds() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert!(Detection::new(a, 0, 1.01).is_err());
        assert!(Detection::new(a, 0, -0.1).is_err());
        assert!(Detection::new(a, 0, f64::NAN).is_err());
    }
}
