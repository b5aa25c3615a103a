//! Matching-based detection evaluation: greedy matching, per-class average
//! precision, AP50 / AP over the IoU threshold set, and non-maximum
//! suppression.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassId, LabeledObject};
use crate::geometry::{iou, BBox};

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
}

impl Role {
    /// Source tag shown to annotators: teacher proposals are "D3",
    /// student proposals "D4".
    pub fn source_tag(self) -> &'static str {
        match self {
            Role::Teacher => "D3",
            Role::Student => "D4",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictionError {
    #[error("class distribution is empty")]
    EmptyDistribution,
    #[error("class distribution sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("class distribution has an entry outside [0, 1]")]
    BadProbability,
    #[error("confidence {0} outside [0, 1]")]
    BadConfidence(f64),
}

/// One detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_dist: Vec<f64>,
    pub confidence: f64,
    pub role: Role,
}

impl Prediction {
    pub fn new(bbox: BBox, class_dist: Vec<f64>, confidence: f64, role: Role) -> Result<Self, PredictionError> {
        let p = Self {
            bbox,
            class_dist,
            confidence,
            role,
        };
        p.check()?;
        Ok(p)
    }

    /// Prediction whose confidence is the top class probability.
    pub fn from_distribution(bbox: BBox, class_dist: Vec<f64>, role: Role) -> Result<Self, PredictionError> {
        let confidence = class_dist.iter().copied().fold(0.0, f64::max);
        Self::new(bbox, class_dist, confidence, role)
    }

    pub fn check(&self) -> Result<(), PredictionError> {
        if self.class_dist.is_empty() {
            return Err(PredictionError::EmptyDistribution);
        }
        if self.class_dist.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(PredictionError::BadProbability);
        }
        let sum: f64 = self.class_dist.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PredictionError::NotNormalized(sum));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(PredictionError::BadConfidence(self.confidence));
        }
        Ok(())
    }

    /// Most probable class; the lowest index wins ties.
    pub fn class(&self) -> ClassId {
        let mut best = 0;
        for (i, &p) in self.class_dist.iter().enumerate() {
            if p > self.class_dist[best] {
                best = i;
            }
        }
        ClassId(best as u32)
    }

    pub fn prob(&self, class: ClassId) -> f64 {
        self.class_dist.get(class.index()).copied().unwrap_or(0.0)
    }

    /// Shannon entropy of the class distribution, natural log.
    pub fn entropy(&self) -> f64 {
        self.class_dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

/// A ground-truth box for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class: ClassId,
}

impl From<&LabeledObject> for GtBox {
    fn from(o: &LabeledObject) -> Self {
        Self {
            bbox: o.bbox,
            class: o.class,
        }
    }
}

impl From<&Prediction> for GtBox {
    fn from(p: &Prediction) -> Self {
        Self {
            bbox: p.bbox,
            class: p.class(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(prediction index, ground-truth index, iou)`
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Indices of the predictions whose top class is `class`, by confidence
/// descending and index ascending on ties.
fn ranked_of_class(preds: &[Prediction], class: ClassId) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class() == class).collect();
    idx.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    idx
}

/// Greedy one-to-one matching for one class. Predictions are visited by
/// confidence; each claims the unclaimed ground truth of highest IoU,
/// provided that IoU is at least `tau`.
pub fn match_greedy(preds: &[Prediction], gts: &[GtBox], class: ClassId, tau: f64) -> MatchResult {
    let gt_idx: Vec<usize> = (0..gts.len()).filter(|&j| gts[j].class == class).collect();
    let mut claimed = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for i in ranked_of_class(preds, class) {
        let mut best: Option<(usize, f64)> = None;
        for &j in &gt_idx {
            if claimed[j] {
                continue;
            }
            let v = iou(&preds[i].bbox, &gts[j].bbox);
            if v >= tau && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) => {
                claimed[j] = true;
                result.pairs.push((i, j, v));
            }
            None => result.unmatched_preds.push(i),
        }
    }
    result.unmatched_gts = gt_idx.into_iter().filter(|&j| !claimed[j]).collect();
    result
}

/// Confidence and hit flag of every prediction of `class`, ranked.
fn hits(preds: &[Prediction], gts: &[GtBox], class: ClassId, tau: f64) -> (Vec<(f64, bool)>, usize) {
    let m = match_greedy(preds, gts, class, tau);
    let matched: BTreeSet<usize> = m.pairs.iter().map(|p| p.0).collect();
    let n_gt = gts.iter().filter(|g| g.class == class).count();
    let ranked = ranked_of_class(preds, class)
        .into_iter()
        .map(|i| (preds[i].confidence, matched.contains(&i)))
        .collect();
    (ranked, n_gt)
}

/// All-point AP under the precision envelope. `ranked` must already be in
/// rank order.
fn ap_from_hits(ranked: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, &(_, hit)) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Average precision of one class on one image.
///
/// Equals 1 when the class has neither ground truth nor predictions and 0
/// when it has predictions but no ground truth.
pub fn average_precision(preds: &[Prediction], gts: &[GtBox], class: ClassId, tau: f64) -> f64 {
    let (ranked, n_gt) = hits(preds, gts, class, tau);
    ap_from_hits(&ranked, n_gt)
}

/// Average precision of one class pooled over many images.
pub fn average_precision_multi(images: &[(Vec<Prediction>, Vec<GtBox>)], class: ClassId, tau: f64) -> f64 {
    let mut pooled = Vec::new();
    let mut n_gt = 0;
    for (preds, gts) in images {
        let (ranked, n) = hits(preds, gts, class, tau);
        pooled.extend(ranked);
        n_gt += n;
    }
    // stable: ties keep image order, then rank within the image
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    ap_from_hits(&pooled, n_gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ap50: f64,
    pub ap: f64,
    pub per_class_ap50: BTreeMap<ClassId, f64>,
}

/// Mean AP over classes at IoU 0.5, and mean over classes and all ten
/// thresholds. The class universe is every class present in the ground
/// truth or predicted by some detection.
pub fn map50_and_map(images: &[(Vec<Prediction>, Vec<GtBox>)]) -> Evaluation {
    let classes: BTreeSet<ClassId> = images
        .iter()
        .flat_map(|(p, g)| p.iter().map(Prediction::class).chain(g.iter().map(|g| g.class)))
        .collect();
    if classes.is_empty() {
        return Evaluation {
            ap50: 1.0,
            ap: 1.0,
            per_class_ap50: BTreeMap::new(),
        };
    }
    let per_class_ap50: BTreeMap<ClassId, f64> = classes
        .iter()
        .map(|&c| (c, average_precision_multi(images, c, 0.5)))
        .collect();
    let ap50 = per_class_ap50.values().sum::<f64>() / classes.len() as f64;
    let mut total = 0.0;
    for &c in &classes {
        for &tau in &IOU_THRESHOLDS {
            total += if tau == 0.5 {
                per_class_ap50[&c]
            } else {
                average_precision_multi(images, c, tau)
            };
        }
    }
    let ap = total / (classes.len() * IOU_THRESHOLDS.len()) as f64;
    Evaluation {
        ap50,
        ap,
        per_class_ap50,
    }
}

/// Indices kept by per-class greedy NMS, in visiting order.
pub fn nms_indices(preds: &[Prediction], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let class = preds[i].class();
        let suppressed = kept
            .iter()
            .any(|&k| preds[k].class() == class && iou(&preds[k].bbox, &preds[i].bbox) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Greedy non-maximum suppression within each top class. Survivors of the
/// same class overlap by at most `iou_thresh`.
pub fn nms(preds: &[Prediction], iou_thresh: f64) -> Vec<Prediction> {
    nms_indices(preds, iou_thresh)
        .into_iter()
        .map(|i| preds[i].clone())
        .collect()
}
