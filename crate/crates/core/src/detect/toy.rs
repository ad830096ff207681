//! A linear detector over proposal features.
//!
//! Each proposal gets softmax class probabilities over the base classes, the
//! density-crop class and background, plus class-agnostic box deltas. The
//! weight vector holds the classifier block (`classes x features`) followed
//! by the regressor block (`4 x features`).

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::{extract_features, FeatureLayout, ObservationConfig, ViewObservation, PAYLOAD_OFFSET};
use super::oracle::MissCurve;
use super::{DetectorBackend, View};
use crate::croplab::{label_density_crops, CropParams};
use crate::dataset::SceneSpec;
use crate::error::{ConfigError, ModelError};
use crate::geometry::{iou, nms, Box, Detection};
use crate::seed::{self, tag};

const MAX_LOG_SCALE: f64 = 4.0;

/// Shape of a weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    /// Base classes + density crop + background.
    pub classes: usize,
    pub features: usize,
}

impl Layout {
    pub fn new(num_classes: usize, features: usize) -> Self {
        Layout {
            classes: num_classes + 2,
            features,
        }
    }

    pub fn num_base_classes(&self) -> usize {
        self.classes - 2
    }

    pub fn crop_class(&self) -> usize {
        self.classes - 2
    }

    pub fn background(&self) -> usize {
        self.classes - 1
    }

    pub fn classifier_len(&self) -> usize {
        self.classes * self.features
    }

    pub fn len(&self) -> usize {
        (self.classes + 4) * self.features
    }

    pub fn is_empty(&self) -> bool {
        self.features == 0
    }

    /// Index range of the class-agnostic regressor block.
    pub fn regressor_range(&self) -> std::ops::Range<usize> {
        self.classifier_len()..self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl WeightVector {
    pub fn zeros(layout: Layout) -> Self {
        WeightVector {
            layout,
            values: vec![0.0; layout.len()],
        }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != layout.len() {
            return Err(ModelError::WeightLength {
                expected: layout.len(),
                got: values.len(),
            });
        }
        Ok(WeightVector { layout, values })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Hash of the exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.layout.hash(&mut h);
        for v in &self.values {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn distance(&self, other: &WeightVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub probs: Vec<f64>,
    pub offsets: [f64; 4],
}

fn check_features(w: &WeightVector, x: &[f64]) -> Result<(), ModelError> {
    if x.len() != w.layout.features {
        return Err(ModelError::FeatureLength {
            expected: w.layout.features,
            got: x.len(),
        });
    }
    if w.values.len() != w.layout.len() {
        return Err(ModelError::WeightLength {
            expected: w.layout.len(),
            got: w.values.len(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

fn logits(w: &WeightVector, x: &[f64]) -> Vec<f64> {
    let f = w.layout.features;
    (0..w.layout.classes)
        .map(|c| dot(&w.values[c * f..(c + 1) * f], x))
        .collect()
}

/// Softmax probabilities and box deltas for one feature vector.
pub fn toy_forward(w: &WeightVector, x: &[f64]) -> Result<Forward, ModelError> {
    check_features(w, x)?;
    let f = w.layout.features;
    let mut probs = logits(w, x);
    softmax_in_place(&mut probs);
    let base = w.layout.classifier_len();
    let mut offsets = [0.0; 4];
    for (k, o) in offsets.iter_mut().enumerate() {
        *o = dot(&w.values[base + k * f..base + (k + 1) * f], x);
    }
    Ok(Forward { probs, offsets })
}

/// A labeled training example. `offsets` is present for foreground
/// proposals with a regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class: usize,
    pub offsets: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    pub features: Vec<f64>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub grad: Vec<f64>,
}

fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

fn cross_entropy_into(
    w: &WeightVector,
    x: &[f64],
    class: usize,
    grad: &mut [f64],
) -> Result<f64, ModelError> {
    if class >= w.layout.classes {
        return Err(ModelError::TargetClass {
            class,
            classes: w.layout.classes,
        });
    }
    let f = w.layout.features;
    let z = logits(w, x);
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (c, zc) in z.iter().enumerate() {
        let p = (zc - lse).exp();
        let g = p - if c == class { 1.0 } else { 0.0 };
        if g != 0.0 {
            for (gi, xi) in grad[c * f..(c + 1) * f].iter_mut().zip(x) {
                *gi += g * xi;
            }
        }
    }
    Ok(lse - z[class])
}

/// Cross-entropy plus smooth-L1 box loss, summed over the batch.
pub fn loss_sup(w: &WeightVector, batch: &[Sample], beta: f64) -> Result<LossOutput, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let f = w.layout.features;
    let base = w.layout.classifier_len();
    let mut grad = vec![0.0; w.layout.len()];
    let mut cls = 0.0;
    let mut reg = 0.0;
    for s in batch {
        check_features(w, &s.features)?;
        cls += cross_entropy_into(w, &s.features, s.class, &mut grad)?;
        if let Some(t) = s.offsets {
            for (k, tk) in t.iter().enumerate() {
                let row = base + k * f..base + (k + 1) * f;
                let pred = dot(&w.values[row.clone()], &s.features);
                let (l, dl) = smooth_l1(pred - tk, beta);
                reg += l;
                for (gi, xi) in grad[row].iter_mut().zip(&s.features) {
                    *gi += dl * xi;
                }
            }
        }
    }
    Ok(LossOutput {
        loss: cls + reg,
        cls,
        reg,
        grad,
    })
}

/// Classification-only loss on pseudo-labeled samples, summed over the
/// batch. The regressor block of the gradient is zero.
pub fn loss_unsup(w: &WeightVector, batch: &[PseudoSample]) -> Result<LossOutput, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut grad = vec![0.0; w.layout.len()];
    let mut cls = 0.0;
    for s in batch {
        check_features(w, &s.features)?;
        cls += cross_entropy_into(w, &s.features, s.class, &mut grad)?;
    }
    Ok(LossOutput {
        loss: cls,
        cls,
        reg: 0.0,
        grad,
    })
}

/// Standard center/log-size deltas from `proposal` to `target`.
pub fn encode_box(proposal: &Box, target: &Box) -> [f64; 4] {
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        (tcx - pcx) / pw,
        (tcy - pcy) / ph,
        (target.width() / pw).ln(),
        (target.height() / ph).ln(),
    ]
}

pub fn decode_box(proposal: &Box, d: &[f64; 4]) -> Result<Box, crate::error::GeometryError> {
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = pcx + d[0] * pw;
    let cy = pcy + d[1] * ph;
    let w = pw * d[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = ph * d[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    Box::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Per proposal: the class of the best-overlapping ground truth when the
/// IoU reaches `fg_iou`, otherwise `background`. Regression targets are
/// produced for base classes only.
pub fn assign_targets(
    proposals: &[Box],
    gts: &[(Box, usize)],
    num_base_classes: usize,
    background: usize,
    fg_iou: f64,
) -> Vec<(usize, Option<[f64; 4]>)> {
    proposals
        .iter()
        .map(|p| {
            let best = gts
                .iter()
                .map(|(g, c)| (iou(p, g), g, *c))
                .fold(None, |acc: Option<(f64, &Box, usize)>, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            match best {
                Some((v, g, c)) if v >= fg_iou => {
                    let offsets = (c < num_base_classes).then(|| encode_box(p, g));
                    (c, offsets)
                }
                _ => (background, None),
            }
        })
        .collect()
}

/// Proposal generator standing in for a region proposal network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    /// Probability that an object gets no proposal, by area in view pixels.
    pub miss: MissCurve,
    pub per_object: usize,
    /// Relative jitter of object proposals.
    pub jitter: f64,
    pub background: usize,
    pub background_size: (f64, f64),
    pub crop_jitter: f64,
    pub seed: u64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            miss: MissCurve::Knots {
                points: vec![(64.0, 0.9), (256.0, 0.6), (1024.0, 0.1)],
            },
            per_object: 2,
            jitter: 0.1,
            background: 24,
            background_size: (8.0, 160.0),
            crop_jitter: 0.05,
            seed: 0,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.miss.validate()?;
        if !(self.jitter >= 0.0 && self.crop_jitter >= 0.0) {
            return Err(ConfigError::new("proposals.jitter", "must be >= 0"));
        }
        let (lo, hi) = self.background_size;
        if !(lo > 0.0 && lo <= hi) {
            return Err(ConfigError::new("proposals.background_size", "must be positive and ordered"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongAugConfig {
    pub noise_std: f64,
    /// Length of the zeroed payload run.
    pub cutout: usize,
    pub cutout_prob: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.2,
            cutout: 4,
            cutout_prob: 0.5,
        }
    }
}

/// Additive noise on every non-bias feature, then with some probability a
/// contiguous run of payload features set to zero.
pub fn strong_augment(x: &[f64], cfg: &StrongAugConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = x.to_vec();
    if cfg.noise_std > 0.0 {
        let n = Normal::new(0.0, cfg.noise_std).expect("std checked");
        for v in out.iter_mut().skip(1) {
            *v += n.sample(rng);
        }
    }
    let payload = out.len().saturating_sub(PAYLOAD_OFFSET);
    if cfg.cutout > 0 && payload > 0 && rng.random::<f64>() < cfg.cutout_prob {
        let len = cfg.cutout.min(payload);
        let start = PAYLOAD_OFFSET + rng.random_range(0..=payload - len);
        out[start..start + len].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub num_classes: usize,
    pub payload_dim: usize,
    pub proposals: ProposalConfig,
    pub observation: ObservationConfig,
    pub crop_params: CropParams,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub fg_iou: f64,
    pub smooth_l1_beta: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            payload_dim: 24,
            proposals: ProposalConfig::default(),
            observation: ObservationConfig::default(),
            crop_params: CropParams::default(),
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            fg_iou: 0.5,
            smooth_l1_beta: 0.1,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_classes == 0 {
            return Err(ConfigError::new("model.num_classes", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(ConfigError::new("model.score_threshold", "must lie in [0, 1]"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) || !(self.fg_iou > 0.0 && self.fg_iou <= 1.0) {
            return Err(ConfigError::new("model.nms_iou", "IoU thresholds must lie in (0, 1]"));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(ConfigError::new("model.smooth_l1_beta", "must be positive"));
        }
        self.proposals.validate()?;
        self.observation.validate()?;
        self.crop_params.validate()
    }
}

/// Proposals and their features for one view. Independent of the weights,
/// so training computes them once.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSamples {
    pub image_id: u64,
    pub view: View,
    pub proposals: Vec<Box>,
    pub features: Vec<Vec<f64>>,
}

impl ViewSamples {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyModelConfig,
}

fn mirror(b: &Box, width: f64) -> Box {
    Box::new(width - b.x2(), b.y1(), width - b.x1(), b.y2()).expect("mirroring keeps area")
}

fn jitter_box(rng: &mut impl Rng, b: &Box, rel: f64, w: f64, h: f64) -> Option<Box> {
    if rel == 0.0 {
        return Some(*b);
    }
    let n = Normal::new(0.0, rel).expect("std checked");
    let (cx, cy) = b.center();
    let (bw, bh) = (b.width(), b.height());
    let cx = cx + bw * n.sample(rng);
    let cy = cy + bh * n.sample(rng);
    let bw = bw * n.sample(rng).exp();
    let bh = bh * n.sample(rng).exp();
    Box::new(cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh)
        .ok()?
        .clip(w, h)
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Self {
        ToyModel { config }
    }

    pub fn feature_layout(&self) -> FeatureLayout {
        FeatureLayout {
            payload_dim: self.config.payload_dim,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.config.num_classes, self.feature_layout().len())
    }

    /// Object proposals, background boxes and (for crop-aware models on
    /// whole-image views) density-crop proposals, in view coordinates.
    pub fn proposals(&self, scene: &SceneSpec, view: &View, crop_aware: bool) -> Vec<Box> {
        let cfg = &self.config.proposals;
        let plain = view.with_flip(false);
        let key = view.key();
        let (w, h) = view.out_size;
        let mut out = Vec::new();
        for (i, b) in plain.visible_objects(scene) {
            let mut rng = seed::rng(cfg.seed, &[tag::PROPOSAL, scene.image_id, key, i as u64]);
            if rng.random::<f64>() < cfg.miss.probability(b.area()) {
                continue;
            }
            for _ in 0..cfg.per_object {
                if let Some(p) = jitter_box(&mut rng, &b, cfg.jitter, w, h) {
                    out.push(p);
                }
            }
        }
        let mut rng = seed::rng(cfg.seed, &[tag::BACKGROUND, scene.image_id, key]);
        let (lo, hi) = cfg.background_size;
        for _ in 0..cfg.background {
            let bw = rng.random_range(lo.ln()..=hi.ln()).exp().min(w);
            let bh = (bw * rng.random_range(0.5f64.ln()..=2f64.ln()).exp()).min(h);
            let x = rng.random_range(0.0..=(w - bw));
            let y = rng.random_range(0.0..=(h - bh));
            if let Ok(b) = Box::new(x, y, x + bw, y + bh) {
                out.push(b);
            }
        }
        if crop_aware && view.depth == 0 {
            if let Ok(crops) = label_density_crops(&scene.boxes(), scene.size(), &self.config.crop_params) {
                for (k, c) in crops.iter().enumerate() {
                    let mut rng = seed::rng(cfg.seed, &[tag::CROP_DET, scene.image_id, key, k as u64]);
                    if let Some(p) = plain.clip(&plain.to_view(c)) {
                        if let Some(j) = jitter_box(&mut rng, &p, cfg.crop_jitter, w, h) {
                            out.push(j);
                        }
                    }
                }
            }
        }
        if view.flip {
            out.iter().map(|b| mirror(b, w)).collect()
        } else {
            out
        }
    }

    pub fn view_samples(&self, scene: &SceneSpec, view: &View, crop_aware: bool) -> ViewSamples {
        let obs = ViewObservation::new(scene, view, self.config.payload_dim, &self.config.observation);
        let proposals = self.proposals(scene, view, crop_aware);
        let features = proposals.iter().map(|p| extract_features(&obs, p)).collect();
        ViewSamples {
            image_id: scene.image_id,
            view: *view,
            proposals,
            features,
        }
    }

    /// Labeled samples for a view given ground truth in view coordinates.
    pub fn labeled(&self, vs: &ViewSamples, gts: &[(Box, usize)]) -> Vec<Sample> {
        let layout = self.layout();
        assign_targets(
            &vs.proposals,
            gts,
            layout.num_base_classes(),
            layout.background(),
            self.config.fg_iou,
        )
        .into_iter()
        .zip(&vs.features)
        .map(|((class, offsets), x)| Sample {
            features: x.clone(),
            class,
            offsets,
        })
        .collect()
    }

    /// Scored, decoded and suppressed detections for precomputed samples.
    pub fn detect_samples(&self, w: &WeightVector, vs: &ViewSamples) -> Result<Vec<Detection>, ModelError> {
        let layout = w.layout;
        let (vw, vh) = vs.view.out_size;
        let mut dets = Vec::new();
        for (p, x) in vs.proposals.iter().zip(&vs.features) {
            let fwd = toy_forward(w, x)?;
            let (class, score) = fwd.probs[..layout.background()]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &s)| if s > acc.1 { (c, s) } else { acc });
            if score < self.config.score_threshold {
                continue;
            }
            let b = if class < layout.num_base_classes() {
                decode_box(p, &fwd.offsets).ok().and_then(|b| b.clip(vw, vh))
            } else {
                Some(*p)
            };
            if let Some(b) = b {
                dets.push(Detection::new(b, class, score.clamp(0.0, 1.0))?);
            }
        }
        let mut kept = nms(&dets, self.config.nms_iou);
        kept.truncate(self.config.max_detections);
        Ok(kept)
    }
}

/// A toy model with frozen weights, usable as a detector backend.
#[derive(Debug, Clone)]
pub struct ToyDetector {
    pub model: ToyModel,
    pub weights: Arc<WeightVector>,
    pub crop_aware: bool,
}

impl ToyDetector {
    pub fn new(model: ToyModel, weights: WeightVector, crop_aware: bool) -> Self {
        ToyDetector {
            model,
            weights: Arc::new(weights),
            crop_aware,
        }
    }
}

impl DetectorBackend for ToyDetector {
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn crop_aware(&self) -> bool {
        self.crop_aware
    }

    fn detect(&self, scene: &SceneSpec, view: &View) -> Result<Vec<Detection>, ModelError> {
        let vs = self.model.view_samples(scene, view, self.crop_aware);
        self.model.detect_samples(&self.weights, &vs)
    }
}
