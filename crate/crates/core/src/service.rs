//! Transport-independent state machine behind the live annotation API:
//! one pending batch at a time, per-image staging of submitted labels and
//! promotion once the whole batch is in.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::al_loop::{CycleReport, LoopError, LoopState, PendingBatch};
use crate::annotation::{log_seconds, Action, Proposal, SessionResult};
use crate::dataset::{validate, FullLabel, ImageId, Label, Violation};
use crate::eval::{Prediction, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceMode {
    /// A human annotates; the next batch opens as soon as one is promoted.
    Live,
    /// Batches open and are finished by the simulated annotator on demand.
    Simulation,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no batch is awaiting annotation")]
    NoPendingBatch,
    #[error("image {0} does not exist")]
    UnknownImage(ImageId),
    #[error("image {0} is not in the pending batch")]
    NotInBatch(ImageId),
    #[error("image {0} was already submitted")]
    DuplicateSubmission(ImageId),
    #[error("label for image {id} is invalid")]
    Invalid { id: ImageId, violations: Vec<Violation> },
    #[error("cycle advance is only available in simulation mode")]
    NotSimulation,
    #[error("all {0} cycles have run")]
    Finished(usize),
    #[error(transparent)]
    Loop(#[from] LoopError),
}

/// One row of the annotation queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub image_id: ImageId,
    pub rank: usize,
    pub fused: f64,
    pub beta_md: f64,
    pub beta_iu: f64,
    pub proposals: Vec<Proposal>,
    pub uri: Option<String>,
    pub staged: bool,
}

/// Learner-visible view of an image; ground truth is never included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageView {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    pub uri: Option<String>,
    pub label: Label,
    pub queue: Option<QueueEntry>,
}

/// A label submitted for one queued image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub label: FullLabel,
    #[serde(default)]
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub image_id: ImageId,
    pub staged: usize,
    pub remaining: usize,
    /// Session time implied by the action log.
    pub seconds: f64,
    /// Dataset version after this submission; `t + 1` once the batch is
    /// promoted.
    pub t: usize,
    pub promoted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<CycleReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub t: usize,
    pub ap50: f64,
    pub ap: f64,
    pub acquired: usize,
    pub cycle_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub mode: ServiceMode,
    pub t: usize,
    pub cycles: usize,
    pub budget: usize,
    pub pending: usize,
    pub staged: usize,
    pub terminal: bool,
    pub cumulative_seconds: f64,
    pub latest: Option<ReportSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub image_id: ImageId,
    pub role: Role,
}

/// The detector exchange: any detector answering this shape can stand in
/// for the surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub image_id: ImageId,
    pub role: Role,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug)]
pub struct AnnotationService {
    state: LoopState,
    mode: ServiceMode,
    pending: Option<PendingBatch>,
    staged: BTreeMap<ImageId, SessionResult>,
}

impl AnnotationService {
    /// Wraps a warmed-up loop. In live mode the first batch opens at once.
    pub fn new(state: LoopState, mode: ServiceMode) -> Result<Self, ServiceError> {
        let mut s = Self {
            state,
            mode,
            pending: None,
            staged: BTreeMap::new(),
        };
        if mode == ServiceMode::Live {
            s.open_next()?;
        }
        Ok(s)
    }

    pub fn state(&self) -> &LoopState {
        &self.state
    }

    pub fn mode(&self) -> ServiceMode {
        self.mode
    }

    pub fn pending_batch(&self) -> Option<&PendingBatch> {
        self.pending.as_ref()
    }

    fn open_next(&mut self) -> Result<(), ServiceError> {
        if self.pending.is_none() && !self.state.finished() {
            self.pending = Some(self.state.begin_cycle()?);
            self.staged.clear();
        }
        Ok(())
    }

    fn entry(&self, batch: &PendingBatch, id: ImageId) -> Option<QueueEntry> {
        let e = batch.entries.iter().find(|e| e.score.image_id == id)?;
        Some(QueueEntry {
            image_id: id,
            rank: e.rank,
            fused: e.score.fused,
            beta_md: e.score.beta_md,
            beta_iu: e.score.beta_iu,
            proposals: e.proposals.clone(),
            uri: self.state.world.train.get(id).and_then(|r| r.uri.clone()),
            staged: self.staged.contains_key(&id),
        })
    }

    /// The pending batch in rank order.
    pub fn queue(&self) -> Result<Vec<QueueEntry>, ServiceError> {
        let batch = self.pending.as_ref().ok_or(ServiceError::NoPendingBatch)?;
        Ok(batch
            .entries
            .iter()
            .filter_map(|e| self.entry(batch, e.score.image_id))
            .collect())
    }

    pub fn image(&self, id: ImageId) -> Result<ImageView, ServiceError> {
        let r = self.state.world.train.get(id).ok_or(ServiceError::UnknownImage(id))?;
        Ok(ImageView {
            id,
            width: r.width,
            height: r.height,
            uri: r.uri.clone(),
            label: r.label.clone(),
            queue: self.pending.as_ref().and_then(|b| self.entry(b, id)),
        })
    }

    pub fn status(&self) -> Status {
        let size = self.pending.as_ref().map_or(0, |b| b.entries.len());
        Status {
            mode: self.mode,
            t: self.state.t(),
            cycles: self.state.config.cycles,
            budget: self.state.config.budget,
            pending: size - self.staged.len(),
            staged: self.staged.len(),
            terminal: self.state.finished() && self.pending.is_none(),
            cumulative_seconds: self.state.cumulative_seconds() + self.staged.values().map(|s| s.seconds).sum::<f64>(),
            latest: self.state.reports.last().map(|r| ReportSummary {
                t: r.t,
                ap50: r.ap50,
                ap: r.ap,
                acquired: r.acquired.len(),
                cycle_seconds: r.cycle_seconds,
            }),
        }
    }

    /// Validates and stages a label; the last label of the batch promotes
    /// it and runs the fine-tuning step.
    pub fn submit(&mut self, id: ImageId, submission: Submission) -> Result<SubmitOutcome, ServiceError> {
        let batch = self.pending.as_ref().ok_or(ServiceError::NoPendingBatch)?;
        let record = self.state.world.train.get(id).ok_or(ServiceError::UnknownImage(id))?;
        if !batch.entries.iter().any(|e| e.score.image_id == id) {
            return Err(ServiceError::NotInBatch(id));
        }
        if self.staged.contains_key(&id) {
            return Err(ServiceError::DuplicateSubmission(id));
        }
        let mut candidate = record.clone();
        candidate.gt.clear();
        candidate.label = Label::Full(submission.label.clone());
        let violations = validate(&candidate, Some(self.state.config.num_classes() as u32));
        if !violations.is_empty() {
            return Err(ServiceError::Invalid { id, violations });
        }
        let seconds = log_seconds(&submission.actions, &self.state.config.cost);
        self.staged.insert(
            id,
            SessionResult {
                label: submission.label,
                actions: submission.actions,
                seconds,
            },
        );
        let total = batch.entries.len();
        let staged = self.staged.len();
        let mut outcome = SubmitOutcome {
            image_id: id,
            staged,
            remaining: total - staged,
            seconds,
            t: self.state.t(),
            promoted: false,
            report: None,
        };
        if staged == total {
            let report = self.promote()?;
            outcome.t = self.state.t();
            outcome.promoted = true;
            outcome.report = Some(report);
            if self.mode == ServiceMode::Live {
                self.open_next()?;
            }
        }
        Ok(outcome)
    }

    fn promote(&mut self) -> Result<CycleReport, ServiceError> {
        let batch = self.pending.take().ok_or(ServiceError::NoPendingBatch)?;
        let sessions = std::mem::take(&mut self.staged);
        match self.state.complete_cycle(&batch, sessions.clone()) {
            Ok(r) => Ok(r),
            Err(e) => {
                self.pending = Some(batch);
                self.staged = sessions;
                Err(e.into())
            }
        }
    }

    /// Simulation mode: opens a batch if none is pending, lets the
    /// simulated annotator finish every unsubmitted image and promotes.
    pub fn advance(&mut self) -> Result<CycleReport, ServiceError> {
        if self.mode != ServiceMode::Simulation {
            return Err(ServiceError::NotSimulation);
        }
        if self.pending.is_none() && self.state.finished() {
            return Err(ServiceError::Finished(self.state.config.cycles));
        }
        self.open_next()?;
        let batch = self.pending.as_ref().ok_or(ServiceError::NoPendingBatch)?;
        let simulated = self.state.annotate_simulated(batch);
        for (id, session) in simulated {
            self.staged.entry(id).or_insert(session);
        }
        self.promote()
    }

    /// Current predictions of one role on a training image.
    pub fn predict(&self, request: PredictRequest) -> Result<PredictResponse, ServiceError> {
        let predictions = self
            .state
            .predict_train(request.image_id, request.role)
            .ok_or(ServiceError::UnknownImage(request.image_id))?;
        Ok(PredictResponse {
            image_id: request.image_id,
            role: request.role,
            predictions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::al_loop::{run_initial_seeded, LoopConfig};
    use crate::world::WorldConfig;

    fn warm() -> LoopState {
        let cfg = LoopConfig {
            world: WorldConfig {
                num_images: 40,
                num_backgrounds: 3,
                ..Default::default()
            },
            cycles: 2,
            budget: 3,
            initial_size: 8,
            ..Default::default()
        };
        run_initial_seeded(&cfg, 11).unwrap()
    }

    fn truthful(service: &AnnotationService, id: ImageId) -> Submission {
        let gt = service.state().world.train.get(id).unwrap().ground_truth();
        let actions = (0..gt.objects.len())
            .map(|object| Action::Draw {
                object,
                class: gt.objects[object].class,
                extreme_clicks: false,
            })
            .collect();
        Submission { label: gt, actions }
    }

    #[test]
    fn fresh_simulation_service_is_idle() {
        let s = AnnotationService::new(warm(), ServiceMode::Simulation).unwrap();
        let st = s.status();
        assert_eq!((st.t, st.pending, st.staged, st.terminal), (0, 0, 0, false));
        assert!(matches!(s.queue(), Err(ServiceError::NoPendingBatch)));
    }

    #[test]
    fn live_batch_round_trip() {
        let mut s = AnnotationService::new(warm(), ServiceMode::Live).unwrap();
        let q = s.queue().unwrap();
        assert_eq!(q.iter().map(|e| e.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(q.windows(2).all(|w| w[0].fused >= w[1].fused));
        assert_eq!(s.queue().unwrap(), q);

        let ids: Vec<ImageId> = q.iter().map(|e| e.image_id).collect();
        let first = s.submit(ids[0], truthful(&s, ids[0])).unwrap();
        assert_eq!((first.staged, first.remaining, first.promoted), (1, 2, false));
        assert!(matches!(
            s.submit(ids[0], truthful(&s, ids[0])),
            Err(ServiceError::DuplicateSubmission(_))
        ));
        let mid = s.status();
        assert!(mid.staged < 3);
        assert_eq!(mid.pending, 2);

        s.submit(ids[1], truthful(&s, ids[1])).unwrap();
        let sub = truthful(&s, ids[2]);
        let last = s.submit(ids[2], sub.clone()).unwrap();
        assert!(last.promoted);
        assert_eq!(last.t, 1);
        assert_eq!(s.image(ids[2]).unwrap().label, Label::Full(sub.label));
        // the next batch opened straight away
        assert_eq!(s.queue().unwrap().len(), 3);
        assert!(s.queue().unwrap().iter().all(|e| !ids.contains(&e.image_id)));
    }

    #[test]
    fn invalid_and_foreign_submissions_rejected() {
        let mut s = AnnotationService::new(warm(), ServiceMode::Live).unwrap();
        let id = s.queue().unwrap()[0].image_id;
        let mut bad = truthful(&s, id);
        bad.label.objects[0].class = crate::dataset::ClassId(99);
        match s.submit(id, bad) {
            Err(ServiceError::Invalid { violations, .. }) => assert!(!violations.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
        let outsider = s.state().version.full_ids.iter().next().copied().unwrap();
        assert!(matches!(
            s.submit(outsider, truthful(&s, outsider)),
            Err(ServiceError::NotInBatch(_))
        ));
        assert!(matches!(
            s.submit(ImageId(123_456_789), truthful(&s, id)),
            Err(ServiceError::UnknownImage(_))
        ));
        assert!(matches!(s.advance(), Err(ServiceError::NotSimulation)));
    }

    #[test]
    fn simulation_advances_to_terminal() {
        let mut s = AnnotationService::new(warm(), ServiceMode::Simulation).unwrap();
        assert_eq!(s.advance().unwrap().t, 1);
        assert_eq!(s.advance().unwrap().t, 2);
        assert!(s.status().terminal);
        assert!(matches!(s.advance(), Err(ServiceError::Finished(2))));
    }

    #[test]
    fn images_hide_ground_truth() {
        let s = AnnotationService::new(warm(), ServiceMode::Live).unwrap();
        let id = s.queue().unwrap()[0].image_id;
        let json = serde_json::to_value(s.image(id).unwrap()).unwrap();
        assert!(json.get("gt").is_none());
        assert_eq!(json["label"]["kind"], "weak");
        assert!(json["queue"]["proposals"].is_array());
    }
}
