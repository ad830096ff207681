//! Reference implementations the library is checked against. They are
//! written from the definitions, favour obviousness over speed and share no
//! code with the crate beyond the `Box` and `Detection` value types.

#![allow(dead_code)]

use cropzoom::geometry::{Box, Detection};
use rand::Rng;

pub fn rect(x1: f64, y1: f64, x2: f64, y2: f64) -> Box {
    Box::new(x1, y1, x2, y2).unwrap()
}

pub fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn ref_iou(a: &Box, b: &Box) -> f64 {
    let (a, b) = (a.coords(), b.coords());
    let inter = [a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])];
    let i = area(&inter);
    let u = area(&a) + area(&b) - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

pub fn random_box(rng: &mut impl Rng, w: f64, h: f64, min_side: f64, max_side: f64) -> Box {
    let bw = rng.random_range(min_side..max_side).min(w);
    let bh = rng.random_range(min_side..max_side).min(h);
    let x = rng.random_range(0.0..=(w - bw));
    let y = rng.random_range(0.0..=(h - bh));
    rect(x, y, x + bw, y + bh)
}

/// Clusters of the thresholded expanded-box overlap graph, via union-find:
/// `(sorted member indices, enclosing expanded box)` for every component with
/// at least `min_size` members.
pub fn union_find_clusters(
    boxes: &[Box],
    (w, h): (f64, f64),
    sigma: f64,
    theta: f64,
    min_size: usize,
) -> Vec<(Vec<usize>, [f64; 4])> {
    let scaled: Vec<Box> = boxes
        .iter()
        .map(|b| {
            let c = b.coords();
            rect(
                (c[0] - sigma).max(0.0),
                (c[1] - sigma).max(0.0),
                (c[2] + sigma).min(w),
                (c[3] + sigma).min(h),
            )
        })
        .collect();
    let n = boxes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if ref_iou(&scaled[i], &scaled[j]) > theta {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<(Vec<usize>, [f64; 4])> = groups
        .into_values()
        .filter(|g| g.len() >= min_size)
        .map(|g| {
            let mut e = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
            for &i in &g {
                let c = scaled[i].coords();
                e = [e[0].min(c[0]), e[1].min(c[1]), e[2].max(c[2]), e[3].max(c[3])];
            }
            (g, e)
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Quadratic greedy NMS straight from the definition: repeatedly take the
/// highest-scoring remaining detection (earliest on ties) and discard every
/// remaining detection of its class overlapping it by more than `thr`.
pub fn brute_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        kept.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i] && dets[i].class_id == dets[b].class_id && ref_iou(&dets[i].bbox, &dets[b].bbox) > thr {
                alive[i] = false;
            }
        }
    }
    kept
}

#[derive(Debug, Clone, Copy)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

pub const ALL: Range = Range { lo: 0.0, hi: f64::INFINITY };
pub const SMALL: Range = Range { lo: 0.0, hi: 1024.0 };
pub const MEDIUM: Range = Range { lo: 1024.0, hi: 9216.0 };
pub const LARGE: Range = Range { lo: 9216.0, hi: f64::INFINITY };

fn inside(r: Range, a: f64) -> bool {
    r.lo <= a && a <= r.hi
}

/// Preference of one detection for one choice; larger is better. Matching a
/// counted ground truth beats matching an ignored one, which beats no match;
/// then higher overlap; then the later ground truth.
type Key = (u8, f64, usize);

/// Every injective partial assignment of detections (in the given order) to
/// ground truths with overlap at least `thr`; returns the assignment whose
/// sequence of keys is lexicographically largest.
fn best_assignment(dets: &[Box], gts: &[Box], ignored: &[bool], thr: f64) -> Vec<Option<usize>> {
    fn key(d: &Box, g: Option<usize>, gts: &[Box], ignored: &[bool]) -> Key {
        match g {
            None => (0, 0.0, 0),
            Some(g) => (if ignored[g] { 1 } else { 2 }, ref_iou(d, &gts[g]), g),
        }
    }
    fn better(a: &[Key], b: &[Key]) -> bool {
        for (x, y) in a.iter().zip(b) {
            if x.0 != y.0 {
                return x.0 > y.0;
            }
            if x.1 != y.1 {
                return x.1 > y.1;
            }
            if x.2 != y.2 {
                return x.2 > y.2;
            }
        }
        false
    }
    fn go(
        i: usize,
        dets: &[Box],
        gts: &[Box],
        ignored: &[bool],
        thr: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<Key>, Vec<Option<usize>>)>,
    ) {
        if i == dets.len() {
            let keys: Vec<Key> = cur.iter().zip(dets).map(|(g, d)| key(d, *g, gts, ignored)).collect();
            if best.as_ref().is_none_or(|(bk, _)| better(&keys, bk)) {
                *best = Some((keys, cur.clone()));
            }
            return;
        }
        cur.push(None);
        go(i + 1, dets, gts, ignored, thr, used, cur, best);
        cur.pop();
        for g in 0..gts.len() {
            if !used[g] && ref_iou(&dets[i], &gts[g]) >= thr {
                used[g] = true;
                cur.push(Some(g));
                go(i + 1, dets, gts, ignored, thr, used, cur, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let mut best = None;
    go(0, dets, gts, ignored, thr, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
    best.map(|b| b.1).unwrap_or_default()
}

/// COCO-style AP of one class at one threshold, or `None` without counted
/// ground truth. Images are visited in the order given.
pub fn ref_class_ap(
    images: &[u64],
    gts: &[(u64, Box, usize)],
    dets: &[(u64, Detection)],
    class: usize,
    thr: f64,
    range: Range,
    max_dets: usize,
) -> Option<f64> {
    let mut pool: Vec<(f64, bool)> = Vec::new();
    let mut npos = 0usize;
    for &img in images {
        let g: Vec<Box> = gts.iter().filter(|x| x.0 == img && x.2 == class).map(|x| x.1).collect();
        let ignored: Vec<bool> = g.iter().map(|b| !inside(range, b.area())).collect();
        npos += ignored.iter().filter(|i| !**i).count();
        let mut d: Vec<Detection> = dets.iter().filter(|x| x.0 == img && x.1.class_id == class).map(|x| x.1).collect();
        // stable insertion sort by descending score
        for i in 1..d.len() {
            let mut j = i;
            while j > 0 && d[j - 1].score < d[j].score {
                d.swap(j - 1, j);
                j -= 1;
            }
        }
        d.truncate(max_dets);
        let boxes: Vec<Box> = d.iter().map(|x| x.bbox).collect();
        let assignment = best_assignment(&boxes, &g, &ignored, thr.min(1.0 - 1e-10));
        for (det, a) in d.iter().zip(assignment) {
            let skip = match a {
                Some(gi) => ignored[gi],
                None => !inside(range, det.bbox.area()),
            };
            if !skip {
                pool.push((det.score, a.is_some()));
            }
        }
    }
    if npos == 0 {
        return None;
    }
    for i in 1..pool.len() {
        let mut j = i;
        while j > 0 && pool[j - 1].0 < pool[j].0 {
            pool.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut rec = Vec::new();
    let mut prec = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &pool {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        rec.push(tp as f64 / npos as f64);
        prec.push(tp as f64 / (tp + fp) as f64);
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        if let Some(first) = rec.iter().position(|&x| x >= r) {
            total += prec[first..].iter().copied().fold(0.0, f64::max);
        }
    }
    Some(total / 101.0)
}

/// Mean of [`ref_class_ap`] over classes and thresholds that have counted
/// ground truth.
pub fn ref_ap(
    images: &[u64],
    gts: &[(u64, Box, usize)],
    dets: &[(u64, Detection)],
    classes: usize,
    thrs: &[f64],
    range: Range,
    max_dets: usize,
) -> Option<f64> {
    let v: Vec<f64> = (0..classes)
        .flat_map(|c| thrs.iter().map(move |&t| (c, t)))
        .filter_map(|(c, t)| ref_class_ap(images, gts, dets, c, t, range, max_dets))
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}
