//! Pseudo-label filtering: turns teacher predictions plus the image's
//! weak or full ground truth into training labels.
//!
//! Weak labels: the count of each present class is predicted from
//! confident teacher outputs, the class is repeated that many times and the
//! slots are matched to predictions by Hungarian assignment on
//! `1 - p(class)`. Full labels: precise boxes pass through, imprecise boxes
//! are matched to predictions on a GIoU + L1 cost and moved toward their
//! match.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, CostMatrix};
use crate::dataset::{ClassId, FullLabel, Quality, WeakLabel};
use crate::eval::Prediction;
use crate::geometry::{giou, BBox};

/// Confidence threshold for counting and keeping pseudo-labels.
pub const DEFAULT_DELTA: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: ClassId,
    /// Matched class probability for weak images; the 0/1 flag for full ones.
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub objects: Vec<PseudoObject>,
}

impl PseudoLabel {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

/// Per-class object counts: the number of predictions whose probability
/// for the class exceeds `delta`, but never less than one.
pub fn predict_counts(teacher: &[Prediction], weak: &WeakLabel, delta: f64) -> BTreeMap<ClassId, usize> {
    weak.classes
        .iter()
        .map(|&c| {
            let confident = teacher.iter().filter(|p| p.prob(c) > delta).count();
            (c, confident.max(1))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakFilterStatus {
    Matched,
    /// The teacher produced nothing to match against.
    NoPredictions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakFilterOutput {
    pub label: PseudoLabel,
    pub status: WeakFilterStatus,
    /// Slots discarded because there were fewer predictions than slots.
    pub dropped_slots: usize,
}

/// Expands counts into class slots, trimming to at most `capacity` slots.
/// Repeated slots go first (from the class holding the most, lowest id on
/// ties); only when every class is down to one slot are whole classes
/// dropped, lowest id first.
fn slots(counts: &BTreeMap<ClassId, usize>, capacity: usize) -> (Vec<ClassId>, usize) {
    let mut counts = counts.clone();
    let total: usize = counts.values().sum();
    let mut dropped = 0;
    while total - dropped > capacity {
        let (&class, &n) = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("non-empty while over capacity");
        if n > 1 {
            counts.insert(class, n - 1);
        } else {
            let &first = counts.keys().next().expect("non-empty");
            counts.remove(&first);
        }
        dropped += 1;
    }
    let slots = counts.iter().flat_map(|(&c, &n)| std::iter::repeat_n(c, n)).collect();
    (slots, dropped)
}

pub fn filter_weak(teacher: &[Prediction], weak: &WeakLabel, delta: f64) -> WeakFilterOutput {
    if teacher.is_empty() {
        return WeakFilterOutput {
            label: PseudoLabel::default(),
            status: WeakFilterStatus::NoPredictions,
            dropped_slots: 0,
        };
    }
    let counts = predict_counts(teacher, weak, delta);
    let (slots, dropped_slots) = slots(&counts, teacher.len());
    let mut label = PseudoLabel::default();
    if !slots.is_empty() {
        let costs = CostMatrix::from_fn(slots.len(), teacher.len(), |i, o| 1.0 - teacher[o].prob(slots[i]))
            .expect("probabilities are finite");
        let assignment = hungarian(&costs).expect("slots never exceed predictions");
        label.objects = slots
            .iter()
            .zip(&assignment.row_to_col)
            .map(|(&class, &o)| PseudoObject {
                bbox: teacher[o].bbox,
                class,
                quality: teacher[o].prob(class),
            })
            .collect();
    }
    WeakFilterOutput {
        label,
        status: WeakFilterStatus::Matched,
        dropped_slots,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullFilterParams {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    /// Weight of the matched prediction when interpolating corners:
    /// 0 keeps the annotated box, 1 adopts the prediction.
    pub weight: f64,
}

impl Default for FullFilterParams {
    fn default() -> Self {
        Self {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
            weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullFilterOutput {
    pub label: PseudoLabel,
    /// Imprecise boxes left unchanged because no prediction was available.
    pub unmatched: usize,
}

/// Matching cost between an imprecise box and a prediction: weighted GIoU
/// loss plus L1 distance of corners normalized by the image extent.
pub fn refinement_cost(annotated: &BBox, predicted: &BBox, extent: (f64, f64), params: &FullFilterParams) -> f64 {
    let (w, h) = extent;
    let a = annotated.corners();
    let p = predicted.corners();
    let l1 = (a[0] - p[0]).abs() / w + (a[1] - p[1]).abs() / h + (a[2] - p[2]).abs() / w + (a[3] - p[3]).abs() / h;
    params.lambda_iou * (1.0 - giou(predicted, annotated)) + params.lambda_l1 * l1
}

pub fn filter_full(
    teacher: &[Prediction],
    full: &FullLabel,
    extent: (f64, f64),
    params: &FullFilterParams,
) -> FullFilterOutput {
    let mut label = PseudoLabel {
        objects: full
            .objects
            .iter()
            .map(|o| PseudoObject {
                bbox: o.bbox,
                class: o.class,
                quality: f64::from(o.quality.as_flag()),
            })
            .collect(),
    };
    let imprecise: Vec<usize> = (0..full.objects.len())
        .filter(|&k| full.objects[k].quality == Quality::Imprecise)
        .collect();
    if imprecise.is_empty() || teacher.is_empty() {
        return FullFilterOutput {
            label,
            unmatched: if teacher.is_empty() { imprecise.len() } else { 0 },
        };
    }
    let costs = CostMatrix::from_fn(imprecise.len(), teacher.len(), |i, o| {
        refinement_cost(&full.objects[imprecise[i]].bbox, &teacher[o].bbox, extent, params)
    })
    .expect("costs of valid boxes are finite");
    // (imprecise slot, prediction) pairs
    let pairs: Vec<(usize, usize)> = if costs.rows() <= costs.cols() {
        let a = hungarian(&costs).expect("non-empty");
        a.row_to_col.into_iter().enumerate().collect()
    } else {
        let a = hungarian(&costs.transpose()).expect("non-empty");
        a.row_to_col.into_iter().enumerate().map(|(o, i)| (i, o)).collect()
    };
    for &(i, o) in &pairs {
        let k = imprecise[i];
        let annotated = full.objects[k].bbox;
        if let Ok(b) = annotated.lerp(&teacher[o].bbox, params.weight) {
            label.objects[k].bbox = b;
        }
    }
    FullFilterOutput {
        label,
        unmatched: imprecise.len() - pairs.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledObject;
    use crate::eval::Role;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn pred_with(b: BBox, dist: Vec<f64>) -> Prediction {
        Prediction::from_distribution(b, dist, Role::Teacher).unwrap()
    }

    fn obj(b: BBox, class: u32, quality: Quality) -> LabeledObject {
        LabeledObject {
            bbox: b,
            class: ClassId(class),
            quality,
        }
    }

    #[test]
    fn counts_over_threshold() {
        let b = bb(0.0, 0.0, 1.0, 1.0);
        let preds = vec![
            pred_with(b, vec![0.8, 0.2]),
            pred_with(b, vec![0.75, 0.25]),
            pred_with(b, vec![0.2, 0.8]),
        ];
        let weak = WeakLabel::new([ClassId(0)]);
        assert_eq!(predict_counts(&preds, &weak, 0.7)[&ClassId(0)], 2);

        let weak = WeakLabel::new([ClassId(0), ClassId(1)]);
        let low = vec![pred_with(b, vec![0.6, 0.4])];
        let c = predict_counts(&low, &weak, 0.7);
        assert_eq!(c.values().copied().collect::<Vec<_>>(), vec![1, 1]);
        let c = predict_counts(&[], &weak, 0.7);
        assert_eq!(c.values().copied().collect::<Vec<_>>(), vec![1, 1]);
    }

    #[test]
    fn weak_single_prediction() {
        let b = bb(1.0, 1.0, 4.0, 4.0);
        let out = filter_weak(&[pred_with(b, vec![0.9, 0.1])], &WeakLabel::new([ClassId(0)]), 0.7);
        assert_eq!(out.status, WeakFilterStatus::Matched);
        assert_eq!(
            out.label.objects,
            vec![PseudoObject {
                bbox: b,
                class: ClassId(0),
                quality: 0.9
            }]
        );
    }

    #[test]
    fn weak_two_classes_each_take_confident_box() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        let b = bb(5.0, 5.0, 9.0, 9.0);
        // prediction 0 is confident in class 1, prediction 1 in class 0
        let preds = vec![pred_with(a, vec![0.1, 0.9]), pred_with(b, vec![0.85, 0.15])];
        let out = filter_weak(&preds, &WeakLabel::new([ClassId(0), ClassId(1)]), 0.7);
        assert_eq!(out.label.objects.len(), 2);
        assert_eq!(out.label.objects[0].class, ClassId(0));
        assert_eq!(out.label.objects[0].bbox, b);
        assert_eq!(out.label.objects[0].quality, 0.85);
        assert_eq!(out.label.objects[1].bbox, a);
        assert_eq!(out.label.objects[1].quality, 0.9);
    }

    #[test]
    fn weak_without_predictions_signals() {
        let out = filter_weak(&[], &WeakLabel::new([ClassId(2)]), 0.7);
        assert_eq!(out.status, WeakFilterStatus::NoPredictions);
        assert!(out.label.is_empty());
    }

    #[test]
    fn weak_slots_trimmed_to_prediction_count() {
        let b = bb(0.0, 0.0, 1.0, 1.0);
        // three classes but only two predictions: one class cannot be matched
        let preds = vec![pred_with(b, vec![0.5, 0.3, 0.2]), pred_with(b, vec![0.2, 0.3, 0.5])];
        let out = filter_weak(&preds, &WeakLabel::new([ClassId(0), ClassId(1), ClassId(2)]), 0.7);
        assert_eq!(out.dropped_slots, 1);
        assert_eq!(out.label.len(), 2);
        let classes: Vec<_> = out.label.objects.iter().map(|o| o.class).collect();
        assert_eq!(classes, vec![ClassId(1), ClassId(2)]);

        // duplicated slots are trimmed before any class disappears
        let preds = [pred_with(b, vec![0.9, 0.1]), pred_with(b, vec![0.95, 0.05])];
        let mut counts = BTreeMap::new();
        counts.insert(ClassId(0), 2);
        counts.insert(ClassId(1), 1);
        let (s, d) = slots(&counts, preds.len());
        assert_eq!((s, d), (vec![ClassId(0), ClassId(1)], 1));
    }

    #[test]
    fn full_all_precise_passthrough() {
        let full = FullLabel::new(vec![
            obj(bb(0.0, 0.0, 5.0, 5.0), 0, Quality::Precise),
            obj(bb(2.0, 3.0, 9.0, 9.0), 1, Quality::Precise),
        ]);
        let preds = vec![pred_with(bb(1.0, 1.0, 6.0, 6.0), vec![1.0, 0.0])];
        let out = filter_full(&preds, &full, (10.0, 10.0), &FullFilterParams::default());
        assert_eq!(out.unmatched, 0);
        for (o, p) in full.objects.iter().zip(&out.label.objects) {
            assert_eq!((o.bbox, o.class, 1.0), (p.bbox, p.class, p.quality));
        }
    }

    #[test]
    fn full_imprecise_interpolation() {
        let full = FullLabel::new(vec![obj(bb(0.0, 0.0, 10.0, 10.0), 0, Quality::Imprecise)]);
        let preds = vec![pred_with(bb(2.0, 2.0, 12.0, 12.0), vec![1.0, 0.0])];
        let refine = |w: f64| {
            let p = FullFilterParams {
                weight: w,
                ..Default::default()
            };
            filter_full(&preds, &full, (20.0, 20.0), &p).label.objects[0]
        };
        assert_eq!(refine(0.5).bbox, bb(1.0, 1.0, 11.0, 11.0));
        assert_eq!(refine(0.5).quality, 0.0);
        assert_eq!(refine(0.0).bbox, bb(0.0, 0.0, 10.0, 10.0));
        assert_eq!(refine(1.0).bbox, bb(2.0, 2.0, 12.0, 12.0));
    }

    #[test]
    fn full_matches_nearest_prediction() {
        let full = FullLabel::new(vec![
            obj(bb(0.0, 0.0, 10.0, 10.0), 0, Quality::Imprecise),
            obj(bb(50.0, 50.0, 60.0, 60.0), 1, Quality::Imprecise),
        ]);
        let preds = vec![
            pred_with(bb(52.0, 52.0, 62.0, 62.0), vec![0.0, 1.0]),
            pred_with(bb(2.0, 2.0, 12.0, 12.0), vec![1.0, 0.0]),
        ];
        let out = filter_full(&preds, &full, (100.0, 100.0), &FullFilterParams::default());
        assert_eq!(out.label.objects[0].bbox, bb(1.0, 1.0, 11.0, 11.0));
        assert_eq!(out.label.objects[1].bbox, bb(51.0, 51.0, 61.0, 61.0));
    }

    #[test]
    fn full_with_fewer_predictions_passes_leftovers_through() {
        let full = FullLabel::new(vec![
            obj(bb(0.0, 0.0, 10.0, 10.0), 0, Quality::Imprecise),
            obj(bb(50.0, 50.0, 60.0, 60.0), 1, Quality::Imprecise),
            obj(bb(20.0, 20.0, 30.0, 30.0), 1, Quality::Precise),
        ]);
        let preds = vec![pred_with(bb(52.0, 52.0, 62.0, 62.0), vec![0.0, 1.0])];
        let out = filter_full(&preds, &full, (100.0, 100.0), &FullFilterParams::default());
        assert_eq!(out.unmatched, 1);
        assert_eq!(out.label.objects[0].bbox, full.objects[0].bbox);
        assert_eq!(out.label.objects[1].bbox, bb(51.0, 51.0, 61.0, 61.0));
        assert_eq!(out.label.objects[2].bbox, full.objects[2].bbox);

        let none = filter_full(&[], &full, (100.0, 100.0), &FullFilterParams::default());
        assert_eq!(none.unmatched, 2);
    }
}
