//! Proposal preparation for annotators and a simulated annotator that
//! selects, corrects, grades or draws boxes with a per-action time cost.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, FullLabel, LabeledObject, Quality};
use crate::eval::{nms_indices, Prediction, Role};
use crate::geometry::{containment_ratio, extreme_points, iou, BBox};
use crate::seed::SimRng;

pub const CLUSTER_CONTAINMENT: f64 = 0.95;
pub const PROPOSAL_NMS_IOU: f64 = 0.75;
pub const PROPOSAL_MIN_CONFIDENCE: f64 = 0.3;

/// Serializes a role as its annotator-facing tag, "D3" or "D4".
mod source_tag {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use crate::eval::Role;

    pub fn serialize<S: Serializer>(role: &Role, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(role.source_tag())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Role, D::Error> {
        match String::deserialize(d)?.as_str() {
            "D3" => Ok(Role::Teacher),
            "D4" => Ok(Role::Student),
            other => Err(D::Error::custom(format!("unknown source tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: ClassId,
    #[serde(with = "source_tag")]
    pub source: Role,
    pub confidence: f64,
}

/// Seconds per box for each annotator action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub select_seconds: f64,
    pub draw_seconds: f64,
    pub extreme_click_seconds: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            select_seconds: 2.0,
            draw_seconds: 34.5,
            extreme_click_seconds: 7.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Proposal `proposal` accepted for ground-truth object `object` of the
    /// final label.
    Select {
        proposal: usize,
        object: usize,
        class: ClassId,
        class_corrected: bool,
        quality: Quality,
    },
    /// A new box drawn for object `object`.
    Draw {
        object: usize,
        class: ClassId,
        #[serde(default)]
        extreme_clicks: bool,
    },
    /// An unselected proposal discarded.
    Remove { proposal: usize },
}

impl Action {
    pub fn seconds(&self, cost: &CostModel) -> f64 {
        match *self {
            Action::Select { .. } => cost.select_seconds,
            Action::Draw {
                extreme_clicks: true, ..
            } => cost.extreme_click_seconds,
            Action::Draw { .. } => cost.draw_seconds,
            Action::Remove { .. } => 0.0,
        }
    }
}

/// Total time implied by an action log.
pub fn log_seconds(actions: &[Action], cost: &CostModel) -> f64 {
    actions.iter().map(|a| a.seconds(cost)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub label: FullLabel,
    pub actions: Vec<Action>,
    pub seconds: f64,
}

/// Merges both roles' predictions, keeps only the largest box of every
/// containment cluster, applies per-class NMS and drops low-confidence
/// boxes. Output is ordered by confidence, highest first.
pub fn prepare_proposals(student: &[Prediction], teacher: &[Prediction]) -> Vec<Proposal> {
    let merged: Vec<&Prediction> = teacher.iter().chain(student).collect();
    let mut by_area: Vec<usize> = (0..merged.len()).collect();
    by_area.sort_by(|&a, &b| merged[b].bbox.area().total_cmp(&merged[a].bbox.area()).then(a.cmp(&b)));
    let mut centers: Vec<usize> = Vec::new();
    for i in by_area {
        let covered = centers
            .iter()
            .any(|&c| containment_ratio(&merged[c].bbox, &merged[i].bbox) >= CLUSTER_CONTAINMENT);
        if !covered {
            centers.push(i);
        }
    }
    let kept: Vec<Prediction> = centers.iter().map(|&i| merged[i].clone()).collect();
    nms_indices(&kept, PROPOSAL_NMS_IOU)
        .into_iter()
        .map(|i| &kept[i])
        .filter(|p| p.confidence >= PROPOSAL_MIN_CONFIDENCE)
        .map(|p| Proposal {
            bbox: p.bbox,
            class: p.class(),
            source: p.role,
            confidence: p.confidence,
        })
        .collect()
}

/// Precise at IoU ≥ 0.9, imprecise above 0.5, otherwise not selectable.
pub fn quality_flag(iou_with_gt: f64) -> Option<Quality> {
    if iou_with_gt >= 0.9 {
        Some(Quality::Precise)
    } else if iou_with_gt > 0.5 {
        Some(Quality::Imprecise)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotatorOptions {
    /// Chance that a selected proposal's class is left uncorrected.
    pub error_rate: f64,
    /// Draw missing boxes by extreme clicking instead of dragging.
    pub extreme_clicks: bool,
}

/// A flawless annotator working through the proposals.
pub fn simulate_session(proposals: &[Proposal], gt: &FullLabel, cost: &CostModel) -> SessionResult {
    run_session(proposals, gt, cost, &AnnotatorOptions::default(), None)
}

pub fn simulate_session_with(
    proposals: &[Proposal],
    gt: &FullLabel,
    cost: &CostModel,
    options: &AnnotatorOptions,
    rng: &mut SimRng,
) -> SessionResult {
    run_session(proposals, gt, cost, options, Some(rng))
}

fn run_session(
    proposals: &[Proposal],
    gt: &FullLabel,
    cost: &CostModel,
    options: &AnnotatorOptions,
    mut rng: Option<&mut SimRng>,
) -> SessionResult {
    let best = |g: &LabeledObject| proposals.iter().map(|p| iou(&p.bbox, &g.bbox)).fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..gt.objects.len()).collect();
    let best_iou: Vec<f64> = gt.objects.iter().map(best).collect();
    order.sort_by(|&a, &b| best_iou[b].total_cmp(&best_iou[a]).then(a.cmp(&b)));

    let mut claimed = vec![false; proposals.len()];
    let mut objects: Vec<Option<LabeledObject>> = vec![None; gt.objects.len()];
    let mut actions = Vec::new();
    for g in order {
        let target = &gt.objects[g];
        let mut pick: Option<(usize, f64)> = None;
        for (i, p) in proposals.iter().enumerate() {
            if claimed[i] {
                continue;
            }
            let v = iou(&p.bbox, &target.bbox);
            if pick.is_none_or(|(_, best)| v > best) {
                pick = Some((i, v));
            }
        }
        let selected = pick.and_then(|(i, v)| {
            let touches = extreme_points(&target.bbox)
                .as_array()
                .iter()
                .any(|&pt| proposals[i].bbox.contains_point(pt));
            quality_flag(v).filter(|_| touches).map(|q| (i, q))
        });
        match selected {
            Some((i, quality)) => {
                claimed[i] = true;
                let slip =
                    options.error_rate > 0.0 && rng.as_mut().is_some_and(|r| r.random::<f64>() < options.error_rate);
                let class = if slip { proposals[i].class } else { target.class };
                objects[g] = Some(LabeledObject {
                    bbox: proposals[i].bbox,
                    class,
                    quality,
                });
                actions.push(Action::Select {
                    proposal: i,
                    object: g,
                    class,
                    class_corrected: class != proposals[i].class,
                    quality,
                });
            }
            None => {
                objects[g] = Some(LabeledObject {
                    bbox: target.bbox,
                    class: target.class,
                    quality: Quality::Precise,
                });
                actions.push(Action::Draw {
                    object: g,
                    class: target.class,
                    extreme_clicks: options.extreme_clicks,
                });
            }
        }
    }
    for (i, &c) in claimed.iter().enumerate() {
        if !c {
            actions.push(Action::Remove { proposal: i });
        }
    }
    let seconds = log_seconds(&actions, cost);
    SessionResult {
        label: FullLabel::new(objects.into_iter().map(|o| o.expect("every object handled")).collect()),
        actions,
        seconds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn pred(b: BBox, class: usize, conf: f64, role: Role) -> Prediction {
        let mut dist = vec![(1.0 - conf) / 2.0; 3];
        dist[class] = conf;
        Prediction::new(b, dist, conf, role).unwrap()
    }

    fn proposal(b: BBox, class: u32) -> Proposal {
        Proposal {
            bbox: b,
            class: ClassId(class),
            source: Role::Teacher,
            confidence: 0.9,
        }
    }

    fn gt(objects: &[(BBox, u32)]) -> FullLabel {
        FullLabel::new(
            objects
                .iter()
                .map(|&(bbox, c)| LabeledObject {
                    bbox,
                    class: ClassId(c),
                    quality: Quality::Precise,
                })
                .collect(),
        )
    }

    #[test]
    fn nested_box_clusters_into_larger() {
        let big = pred(bb(0.0, 0.0, 10.0, 10.0), 0, 0.6, Role::Teacher);
        let small = pred(bb(2.0, 2.0, 5.0, 5.0), 1, 0.9, Role::Student);
        let out = prepare_proposals(&[small], &[big]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, bb(0.0, 0.0, 10.0, 10.0));
        assert_eq!(out[0].source, Role::Teacher);
    }

    #[test]
    fn confidence_threshold_is_inclusive() {
        let a = pred(bb(0.0, 0.0, 10.0, 10.0), 0, 0.29, Role::Teacher);
        let b = pred(bb(50.0, 0.0, 60.0, 10.0), 0, 0.30, Role::Teacher);
        let out = prepare_proposals(&[], &[a, b]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.30);
        assert!(prepare_proposals(&[], &[]).is_empty());
    }

    #[test]
    fn overlapping_same_class_suppressed() {
        let a = pred(bb(0.0, 0.0, 10.0, 10.0), 0, 0.8, Role::Teacher);
        let b = pred(bb(1.0, 0.0, 11.0, 10.0), 0, 0.9, Role::Student);
        let c = pred(bb(1.0, 0.0, 11.0, 10.0), 1, 0.9, Role::Student);
        let out = prepare_proposals(std::slice::from_ref(&b), std::slice::from_ref(&a));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].source, Role::Student);
        assert_eq!(prepare_proposals(&[c], &[a]).len(), 2);
    }

    #[test]
    fn proposal_json_uses_source_tags() {
        let p = proposal(bb(0.0, 0.0, 1.0, 1.0), 2);
        let json = serde_json::to_value(p).unwrap();
        assert_eq!(json["source"], "D3");
        assert_eq!(json["box"], serde_json::json!([0.0, 0.0, 1.0, 1.0]));
        assert_eq!(serde_json::from_value::<Proposal>(json).unwrap(), p);
    }

    #[test]
    fn quality_thresholds() {
        assert_eq!(quality_flag(0.92), Some(Quality::Precise));
        assert_eq!(quality_flag(0.9), Some(Quality::Precise));
        assert_eq!(quality_flag(0.6), Some(Quality::Imprecise));
        assert_eq!(quality_flag(0.5), None);
    }

    #[test]
    fn perfect_proposals_cost_select_only() {
        let g = gt(&[
            (bb(0.0, 0.0, 10.0, 10.0), 0),
            (bb(20.0, 0.0, 30.0, 10.0), 1),
            (bb(0.0, 20.0, 10.0, 30.0), 2),
        ]);
        let props: Vec<_> = g.objects.iter().map(|o| proposal(o.bbox, 0)).collect();
        let r = simulate_session(&props, &g, &CostModel::default());
        assert_eq!(r.seconds, 6.0);
        assert_eq!(r.label, g);
        let corrected = r
            .actions
            .iter()
            .filter(|a| {
                matches!(
                    a,
                    Action::Select {
                        class_corrected: true,
                        ..
                    }
                )
            })
            .count();
        assert_eq!(corrected, 2);
    }

    #[test]
    fn no_proposals_draws_everything() {
        let g = gt(&[
            (bb(0.0, 0.0, 10.0, 10.0), 0),
            (bb(20.0, 0.0, 30.0, 10.0), 1),
            (bb(0.0, 20.0, 10.0, 30.0), 2),
        ]);
        let r = simulate_session(&[], &g, &CostModel::default());
        assert_eq!(r.seconds, 103.5);
        assert_eq!(r.label, g);
    }

    #[test]
    fn loose_proposal_selected_as_imprecise() {
        let target = bb(0.0, 0.0, 10.0, 10.0);
        // IoU 0.6 and contains the top midpoint (5, 0)
        let loose = bb(0.0, 0.0, 10.0, 6.0);
        assert!((iou(&target, &loose) - 0.6).abs() < 1e-12);
        let r = simulate_session(
            &[proposal(loose, 0), proposal(bb(50.0, 50.0, 60.0, 60.0), 0)],
            &gt(&[(target, 0)]),
            &CostModel::default(),
        );
        assert_eq!(r.label.objects[0].bbox, loose);
        assert_eq!(r.label.objects[0].quality, Quality::Imprecise);
        assert_eq!(r.seconds, 2.0);
        assert!(r.actions.contains(&Action::Remove { proposal: 1 }));
    }

    #[test]
    fn proposal_missing_extreme_points_is_redrawn() {
        let target = bb(0.0, 0.0, 10.0, 10.0);
        // IoU 0.64 but strictly inside: no edge midpoint is covered
        let inner = bb(1.0, 1.0, 9.0, 9.0);
        let r = simulate_session(&[proposal(inner, 0)], &gt(&[(target, 0)]), &CostModel::default());
        assert_eq!(r.label.objects[0].bbox, target);
        assert_eq!(r.seconds, 34.5);
    }

    #[test]
    fn error_rate_leaves_classes_uncorrected() {
        let g = gt(&[(bb(0.0, 0.0, 10.0, 10.0), 1)]);
        let p = [proposal(bb(0.0, 0.0, 10.0, 10.0), 0)];
        let opts = AnnotatorOptions {
            error_rate: 1.0,
            extreme_clicks: true,
        };
        let r = simulate_session_with(&p, &g, &CostModel::default(), &opts, &mut stream(0, &[]));
        assert_eq!(r.label.objects[0].class, ClassId(0));
        let drawn = simulate_session_with(&[], &g, &CostModel::default(), &opts, &mut stream(0, &[]));
        assert_eq!(drawn.seconds, 7.0);
    }
}
