//! COCO-style average precision and detection error profiling.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::geometry::{iou, Box, Detection};

pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

/// Ground truth and detections of one image, base classes only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageEval {
    pub gts: Vec<(Box, usize)>,
    pub dets: Vec<Detection>,
}

/// Evaluation inputs keyed by image id.
pub type EvalSet = BTreeMap<u64, ImageEval>;

/// Groups ground truth and detections by image. Detections on images
/// without ground truth entries are rejected. Classes at or above
/// `num_classes` are dropped from both sides.
pub fn build_eval_set(
    gts: &[(u64, Box, usize)],
    image_ids: &[u64],
    dets: &[(u64, Detection)],
    num_classes: usize,
) -> Result<EvalSet, MetricsError> {
    let mut set: EvalSet = image_ids.iter().map(|&id| (id, ImageEval::default())).collect();
    for &(id, b, c) in gts {
        if c < num_classes {
            set.entry(id).or_default().gts.push((b, c));
        }
    }
    for (id, d) in dets {
        let img = set.get_mut(id).ok_or(MetricsError::UnknownImage(*id))?;
        if d.class_id < num_classes {
            img.dets.push(*d);
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_detections: usize,
    pub fg_iou: f64,
    pub bg_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            max_detections: 100,
            fg_iou: 0.5,
            bg_iou: 0.1,
        }
    }
}

/// Area range of ground truth counted by a metric; others are ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub min: f64,
    pub max: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        min: 0.0,
        max: f64::INFINITY,
    };
    pub const SMALL: AreaRange = AreaRange {
        min: 0.0,
        max: SMALL_AREA,
    };
    pub const MEDIUM: AreaRange = AreaRange {
        min: SMALL_AREA,
        max: MEDIUM_AREA,
    };
    pub const LARGE: AreaRange = AreaRange {
        min: MEDIUM_AREA,
        max: f64::INFINITY,
    };

    pub fn contains(&self, area: f64) -> bool {
        area >= self.min && area <= self.max
    }
}

/// Score-ordered greedy matching of one image and class at one threshold.
/// Returns per-detection `(matched, ignored)` for the sorted detections and
/// the number of non-ignored ground truths.
fn match_image(gts: &[Box], dets: &[(f64, Box)], thr: f64, range: AreaRange) -> (Vec<(bool, bool)>, usize) {
    let mut order: Vec<usize> = (0..gts.len()).collect();
    let ignored: Vec<bool> = gts.iter().map(|g| !range.contains(g.area())).collect();
    order.sort_by_key(|&g| ignored[g]);
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for (_, d) in dets {
        let mut best = thr.min(1.0 - 1e-10);
        let mut m: Option<usize> = None;
        for &g in &order {
            if taken[g] {
                continue;
            }
            if m.is_some_and(|m| !ignored[m]) && ignored[g] {
                break;
            }
            let v = iou(d, &gts[g]);
            if v < best {
                continue;
            }
            best = v;
            m = Some(g);
        }
        match m {
            Some(g) => {
                taken[g] = true;
                out.push((true, ignored[g]));
            }
            None => out.push((false, !range.contains(d.area()))),
        }
    }
    (out, ignored.iter().filter(|&&i| !i).count())
}

/// Recall thresholds 0, 0.01, ..., 1.
fn recall_thresholds() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

/// AP for one class, area range and threshold. `None` when no ground truth
/// is counted.
fn class_ap(set: &EvalSet, class: usize, thr: f64, range: AreaRange, max_dets: usize) -> Option<f64> {
    let mut scored: Vec<(f64, bool, bool)> = Vec::new();
    let mut npos = 0;
    for img in set.values() {
        let gts: Vec<Box> = img.gts.iter().filter(|g| g.1 == class).map(|g| g.0).collect();
        let mut dets: Vec<(f64, Box)> = img
            .dets
            .iter()
            .filter(|d| d.class_id == class)
            .map(|d| (d.score, d.bbox))
            .collect();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        dets.truncate(max_dets);
        let (m, n) = match_image(&gts, &dets, thr, range);
        npos += n;
        scored.extend(dets.iter().zip(m).map(|(d, (tp, ig))| (d.0, tp, ig)));
    }
    if npos == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for &(_, matched, ignored) in &scored {
        if ignored {
            continue;
        }
        if matched {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / npos as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in recall_thresholds() {
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn ap_over(set: &EvalSet, classes: &[usize], thrs: &[f64], range: AreaRange, max_dets: usize) -> Option<f64> {
    mean(
        classes
            .iter()
            .flat_map(|&c| thrs.iter().map(move |&t| class_ap(set, c, t, range, max_dets))),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub cls: usize,
    pub loc: usize,
    pub both: usize,
    pub dupe: usize,
    pub bkg: usize,
    pub miss: usize,
}

impl ErrorCounts {
    pub fn false_positives(&self) -> usize {
        self.cls + self.loc + self.both + self.dupe + self.bkg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub errors: ErrorCounts,
    pub true_positives: usize,
}

impl EvalReport {
    pub const METRICS: [&'static str; 6] = ["AP", "AP50", "AP75", "APs", "APm", "APl"];

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "AP" => self.ap,
            "AP50" => self.ap50,
            "AP75" => self.ap75,
            "APs" => self.ap_s,
            "APm" => self.ap_m,
            "APl" => self.ap_l,
            _ => name
                .strip_prefix("AP_class")
                .and_then(|c| c.parse::<usize>().ok())
                .and_then(|c| self.per_class.get(c).copied().flatten()),
        }
    }

    /// Aligned table with values scaled by 100.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = String::new();
        let _ = writeln!(s, "{:<8}{:>8}", "metric", "value");
        for m in Self::METRICS {
            let _ = writeln!(s, "{:<8}{:>8}", m, cell(self.metric(m)));
        }
        for (c, v) in self.per_class.iter().enumerate() {
            let _ = writeln!(s, "{:<8}{:>8}", format!("class{c}"), cell(*v));
        }
        let e = &self.errors;
        let _ = writeln!(s, "{:<8}{:>8}", "TP", self.true_positives);
        for (name, v) in [
            ("Cls", e.cls),
            ("Loc", e.loc),
            ("Both", e.both),
            ("Dupe", e.dupe),
            ("Bkg", e.bkg),
            ("Miss", e.miss),
        ] {
            let _ = writeln!(s, "{:<8}{:>8}", name, v);
        }
        s
    }
}

/// AP family over base classes `0..num_classes`. The error tallies are
/// left empty; see [`profile_errors`].
pub fn evaluate_ap(set: &EvalSet, num_classes: usize, config: &EvalConfig) -> EvalReport {
    let classes: Vec<usize> = (0..num_classes).collect();
    let thrs = &config.iou_thresholds;
    let md = config.max_detections;
    EvalReport {
        ap: ap_over(set, &classes, thrs, AreaRange::ALL, md),
        ap50: ap_over(set, &classes, &[0.5], AreaRange::ALL, md),
        ap75: ap_over(set, &classes, &[0.75], AreaRange::ALL, md),
        ap_s: ap_over(set, &classes, thrs, AreaRange::SMALL, md),
        ap_m: ap_over(set, &classes, thrs, AreaRange::MEDIUM, md),
        ap_l: ap_over(set, &classes, thrs, AreaRange::LARGE, md),
        per_class: classes
            .iter()
            .map(|&c| ap_over(set, &[c], thrs, AreaRange::ALL, md))
            .collect(),
        errors: ErrorCounts::default(),
        true_positives: 0,
    }
}

/// AP plus error profile.
pub fn evaluate(set: &EvalSet, num_classes: usize, config: &EvalConfig) -> EvalReport {
    let (errors, tp) = profile_errors(set, config.fg_iou, config.bg_iou);
    EvalReport {
        errors,
        true_positives: tp,
        ..evaluate_ap(set, num_classes, config)
    }
}

/// Classifies every detection that fails to match at `fg_iou`, checking
/// Cls, Dupe, Loc, Both and Bkg in that order, and counts unmatched ground
/// truth as Miss. Also returns the number of true positives.
pub fn profile_errors(set: &EvalSet, fg_iou: f64, bg_iou: f64) -> (ErrorCounts, usize) {
    let mut e = ErrorCounts::default();
    let mut tps = 0;
    for img in set.values() {
        let mut order: Vec<usize> = (0..img.dets.len()).collect();
        order.sort_by(|&a, &b| img.dets[b].score.total_cmp(&img.dets[a].score));
        let mut taken = vec![false; img.gts.len()];
        let mut unmatched = Vec::new();
        for &d in &order {
            let det = &img.dets[d];
            let mut best = fg_iou.min(1.0 - 1e-10);
            let mut m = None;
            for (g, (gb, gc)) in img.gts.iter().enumerate() {
                if taken[g] || *gc != det.class_id {
                    continue;
                }
                let v = iou(&det.bbox, gb);
                if v >= best {
                    best = v;
                    m = Some(g);
                }
            }
            match m {
                Some(g) => {
                    taken[g] = true;
                    tps += 1;
                }
                None => unmatched.push(d),
            }
        }
        for d in unmatched {
            let det = &img.dets[d];
            let mut same = 0.0f64;
            let mut same_taken = 0.0f64;
            let mut other = 0.0f64;
            for (g, (gb, gc)) in img.gts.iter().enumerate() {
                let v = iou(&det.bbox, gb);
                if *gc == det.class_id {
                    same = same.max(v);
                    if taken[g] {
                        same_taken = same_taken.max(v);
                    }
                } else {
                    other = other.max(v);
                }
            }
            if other >= fg_iou {
                e.cls += 1;
            } else if same_taken >= fg_iou {
                e.dupe += 1;
            } else if same > bg_iou {
                e.loc += 1;
            } else if other > bg_iou {
                e.both += 1;
            } else {
                e.bkg += 1;
            }
        }
        e.miss += taken.iter().filter(|&&t| !t).count();
    }
    (e, tps)
}

/// Class-aware recall at `iou_thr` over ground truth inside `range`.
/// Returns `(found, total)`.
pub fn recall(set: &EvalSet, iou_thr: f64, range: AreaRange) -> (usize, usize) {
    let mut found = 0;
    let mut total = 0;
    for img in set.values() {
        let classes: std::collections::BTreeSet<usize> = img.gts.iter().map(|g| g.1).collect();
        for c in classes {
            let gts: Vec<Box> = img.gts.iter().filter(|g| g.1 == c).map(|g| g.0).collect();
            let mut dets: Vec<(f64, Box)> = img
                .dets
                .iter()
                .filter(|d| d.class_id == c)
                .map(|d| (d.score, d.bbox))
                .collect();
            dets.sort_by(|a, b| b.0.total_cmp(&a.0));
            let (m, n) = match_image(&gts, &dets, iou_thr, range);
            total += n;
            found += m.iter().filter(|(tp, ig)| *tp && !*ig).count();
        }
    }
    (found, total)
}

pub fn recall_ratio(set: &EvalSet, iou_thr: f64, range: AreaRange) -> f64 {
    let (f, t) = recall(set, iou_thr, range);
    if t == 0 {
        0.0
    } else {
        f as f64 / t as f64
    }
}

/// Metric values of several runs side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub names: Vec<String>,
    pub metrics: Vec<String>,
    /// `values[m][r]`: metric `m` of run `r`.
    pub values: Vec<Vec<Option<f64>>>,
}

impl Comparison {
    /// Differences against the first run.
    pub fn deltas(&self) -> Vec<Vec<Option<f64>>> {
        self.values
            .iter()
            .map(|row| {
                let base = row.first().copied().flatten();
                row.iter()
                    .map(|v| match (base, v) {
                        (Some(b), Some(v)) => Some(v - b),
                        _ => None,
                    })
                    .collect()
            })
            .collect()
    }

    /// Mean and sample standard deviation per metric over the runs that
    /// report it.
    pub fn mean_std(&self) -> Vec<Option<(f64, f64)>> {
        self.values
            .iter()
            .map(|row| {
                let v: Vec<f64> = row.iter().flatten().copied().collect();
                if v.is_empty() {
                    return None;
                }
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let s = if v.len() > 1 {
                    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
                } else {
                    0.0
                };
                Some((m, s))
            })
            .collect()
    }

    /// Table of values scaled by 100 with deltas and a final `mean ± std`
    /// column. Missing values print as `n/a`.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "metric");
        for n in &self.names {
            let _ = write!(s, "{:>18}", n);
        }
        let _ = writeln!(s, "{:>16}", "mean ± std");
        let deltas = self.deltas();
        for (m, name) in self.metrics.iter().enumerate() {
            let _ = write!(s, "{:<10}", name);
            for (r, v) in self.values[m].iter().enumerate() {
                let cell = match (v, deltas[m][r]) {
                    (Some(v), Some(d)) if r > 0 => format!("{:.2} ({:+.2})", 100.0 * v, 100.0 * d),
                    (Some(v), _) => format!("{:.2}", 100.0 * v),
                    (None, _) => "n/a".to_string(),
                };
                let _ = write!(s, "{:>18}", cell);
            }
            let ms = match self.mean_std()[m] {
                Some((mu, sd)) => format!("{:.2} ± {:.2}", 100.0 * mu, 100.0 * sd),
                None => "n/a".to_string(),
            };
            let _ = writeln!(s, "{:>16}", ms);
        }
        s
    }

    /// Plottable series: one row per run, one column per metric.
    pub fn to_series(&self) -> String {
        let mut s = format!("run\t{}\n", self.metrics.join("\t"));
        for (r, n) in self.names.iter().enumerate() {
            let cells: Vec<String> = self
                .values
                .iter()
                .map(|row| row[r].map_or("nan".to_string(), |v| v.to_string()))
                .collect();
            let _ = writeln!(s, "{n}\t{}", cells.join("\t"));
        }
        s
    }
}

pub fn compare_runs(reports: &[(String, EvalReport)]) -> Result<Comparison, MetricsError> {
    if reports.len() < 2 {
        return Err(MetricsError::Invalid("need at least two reports to compare".into()));
    }
    let classes = reports.iter().map(|(_, r)| r.per_class.len()).max().unwrap_or(0);
    let mut metrics: Vec<String> = EvalReport::METRICS.iter().map(|m| m.to_string()).collect();
    metrics.extend((0..classes).map(|c| format!("AP_class{c}")));
    let values = metrics
        .iter()
        .map(|m| reports.iter().map(|(_, r)| r.metric(m)).collect())
        .collect();
    Ok(Comparison {
        names: reports.iter().map(|(n, _)| n.clone()).collect(),
        metrics,
        values,
    })
}
