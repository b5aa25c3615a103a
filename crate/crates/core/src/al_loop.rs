//! The active-learning loop: burn-in on auxiliary scenes, a semi-supervised
//! warm start, then acquisition / annotation / fine-tuning cycles with the
//! teacher evaluated on a held-out set after each.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{rank, score_image, select_batch, AcqScore, AcquisitionError, EmptyTeacher, Strategy};
use crate::annotation::{
    prepare_proposals, simulate_session_with, AnnotatorOptions, CostModel, Proposal, SessionResult,
};
use crate::dataset::{ClassId, Dataset, DatasetVersion, FullLabel, ImageId, ImageRecord, PromoteError};
use crate::eval::{map50_and_map, Evaluation, GtBox, Prediction, Role};
use crate::pseudo_label::{filter_full, filter_weak, FullFilterParams};
use crate::seed::{stream, tag};
use crate::surrogate::{
    burn_in, ema_steps, predict, train_update, SkillState, SurrogateError, SurrogateParams, TrainSignal,
};
use crate::synth::{generate_auxiliary, AuxiliaryConfig, SynthError};
use crate::world::{generate_world, World, WorldConfig, WorldError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cycles must be at least 1")]
    NoCycles,
    #[error("budget must be at least 1")]
    NoBudget,
    #[error("budget x cycles = {total} exceeds the {n} images")]
    BudgetExceedsData { total: usize, n: usize },
    #[error("initial sample of {initial} leaves fewer than {budget} images for the first cycle out of {n}")]
    InitialTooLarge { initial: usize, budget: usize, n: usize },
    #[error("{0} must lie in (0, 1)")]
    OutOfUnitInterval(&'static str),
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("world: {0}")]
    World(#[from] WorldError),
    #[error("at least two strategies are needed for a comparison")]
    TooFewStrategies,
    #[error("no seeds given")]
    NoSeeds,
}

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("budget exhausted: cycle needs {needed} weak images, {available} remain")]
    BudgetExhausted { needed: usize, available: usize },
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("dataset is not all weakly labeled: image {0} has a full label")]
    NotWeak(ImageId),
    #[error("no batch is pending")]
    NoPendingBatch,
    #[error("batch for t = {batch} does not match the current t = {current}")]
    StaleBatch { batch: usize, current: usize },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Promote(#[from] PromoteError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error("cannot write {path}: {message}")]
    Artifact { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub world: WorldConfig,
    pub cycles: usize,
    pub budget: usize,
    pub initial_size: usize,
    pub strategy: Strategy,
    pub delta: f64,
    pub ema_decay: f64,
    /// Training passes per cycle.
    pub inner_iterations: usize,
    /// Semi-supervised rounds in the warm start.
    pub warmup_rounds: usize,
    pub auxiliary: AuxiliaryConfig,
    pub surrogate: SurrogateParams,
    pub refinement: FullFilterParams,
    pub empty_teacher: EmptyTeacher,
    pub cost: CostModel,
    pub annotator: AnnotatorOptions,
    pub seeds: Vec<u64>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            cycles: 5,
            budget: 50,
            initial_size: 50,
            strategy: Strategy::Product,
            delta: crate::pseudo_label::DEFAULT_DELTA,
            ema_decay: crate::surrogate::DEFAULT_EMA_DECAY,
            inner_iterations: 1,
            warmup_rounds: 1,
            auxiliary: AuxiliaryConfig::default(),
            surrogate: SurrogateParams::default(),
            refinement: FullFilterParams::default(),
            empty_teacher: EmptyTeacher::default(),
            cost: CostModel::default(),
            annotator: AnnotatorOptions::default(),
            seeds: vec![0],
        }
    }
}

impl LoopConfig {
    pub fn check(&self) -> Result<(), ConfigError> {
        self.world.check()?;
        let n = self.world.num_images;
        if self.cycles == 0 {
            return Err(ConfigError::NoCycles);
        }
        if self.budget == 0 {
            return Err(ConfigError::NoBudget);
        }
        if self.budget * self.cycles > n {
            return Err(ConfigError::BudgetExceedsData {
                total: self.budget * self.cycles,
                n,
            });
        }
        if self.initial_size == 0 || self.initial_size + self.budget > n {
            return Err(ConfigError::InitialTooLarge {
                initial: self.initial_size,
                budget: self.budget,
                n,
            });
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(ConfigError::OutOfUnitInterval("delta"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(ConfigError::OutOfUnitInterval("ema_decay"));
        }
        if self.auxiliary.multiplier.is_nan() || self.auxiliary.multiplier <= 0.0 {
            return Err(ConfigError::NotPositive("auxiliary.multiplier"));
        }
        if [self.surrogate.eta, self.surrogate.aux_eta]
            .iter()
            .any(|r| r.is_nan() || *r <= 0.0)
        {
            return Err(ConfigError::NotPositive("surrogate.eta"));
        }
        if !(0.0..=1.0).contains(&self.surrogate.kappa) {
            return Err(ConfigError::OutOfUnitInterval("surrogate.kappa"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::NoSeeds);
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.world.num_classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub t: usize,
    pub strategy: Strategy,
    pub acquired: Vec<ImageId>,
    pub ap50: f64,
    pub ap: f64,
    pub per_class_ap50: BTreeMap<ClassId, f64>,
    pub cycle_seconds: f64,
    pub cumulative_seconds: f64,
    pub student_skill: Vec<f64>,
    pub teacher_skill: Vec<f64>,
    /// Pseudo-labeled instances that counted toward training.
    pub pseudo_instances: u64,
    /// Imprecise boxes moved toward a teacher prediction.
    pub refined_boxes: usize,
}

/// One image awaiting annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub rank: usize,
    pub score: AcqScore,
    pub proposals: Vec<Proposal>,
}

/// An acquired batch between selection and promotion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingBatch {
    /// Cycle the batch was selected in; promotion yields `t + 1`.
    pub t: usize,
    /// Ordered by fused score, highest first.
    pub entries: Vec<BatchEntry>,
    /// Scores of every weak image at selection time.
    pub scores: Vec<AcqScore>,
}

impl PendingBatch {
    pub fn ids(&self) -> BTreeSet<ImageId> {
        self.entries.iter().map(|e| e.score.image_id).collect()
    }
}

/// A finished annotation session, kept for the cost audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub t: usize,
    pub image_id: ImageId,
    pub session: SessionResult,
}

/// Everything one loop owns.
#[derive(Debug, Clone)]
pub struct LoopState {
    pub config: LoopConfig,
    pub seed: u64,
    pub world: World,
    pub auxiliary: Dataset,
    pub version: DatasetVersion,
    pub student: SkillState,
    pub teacher: SkillState,
    pub reports: Vec<CycleReport>,
    pub sessions: Vec<SessionRecord>,
}

fn role_tag(role: Role) -> u64 {
    match role {
        Role::Student => 0,
        Role::Teacher => 1,
    }
}

/// Generates the world for `seed` and runs the warm start on it.
pub fn run_initial_seeded(config: &LoopConfig, seed: u64) -> Result<LoopState, LoopError> {
    config.check()?;
    let world = generate_world(&config.world, seed)?;
    run_initial(config, world, seed)
}

/// Samples and fully annotates A^0, synthesizes the auxiliary set from it,
/// burns in the student, runs the semi-supervised warm start and records
/// the t = 0 report.
pub fn run_initial(config: &LoopConfig, mut world: World, seed: u64) -> Result<LoopState, LoopError> {
    config.check()?;
    let c = config.num_classes();
    let version = world.train.initial_version();
    if let Some(id) = version.full_ids.iter().next() {
        return Err(LoopError::NotWeak(*id));
    }
    let pool: Vec<ImageId> = version.weak_ids.iter().copied().collect();
    if config.initial_size + config.budget > pool.len() {
        return Err(ConfigError::InitialTooLarge {
            initial: config.initial_size,
            budget: config.budget,
            n: pool.len(),
        }
        .into());
    }
    let a0: BTreeSet<ImageId> = pool
        .choose_multiple(&mut stream(seed, &[tag::INITIAL_SAMPLE]), config.initial_size)
        .copied()
        .collect();

    // A^0 is annotated from scratch
    let mut sessions = Vec::new();
    let mut labels = BTreeMap::new();
    for &id in &a0 {
        let record = world.train.get(id).expect("sampled from the dataset");
        let mut rng = stream(seed, &[tag::ANNOTATOR, 0, id.0]);
        let session = simulate_session_with(&[], &record.ground_truth(), &config.cost, &config.annotator, &mut rng);
        labels.insert(id, session.label.clone());
        sessions.push(SessionRecord {
            t: 0,
            image_id: id,
            session,
        });
    }
    world.train.apply_full_labels(&labels);

    let a0_records: Vec<&ImageRecord> = a0.iter().filter_map(|id| world.train.get(*id)).collect();
    let auxiliary = generate_auxiliary(
        a0_records,
        &world.backgrounds,
        world.train.len(),
        &config.auxiliary,
        crate::seed::derive_seed(seed, &[tag::AUXILIARY]),
    )?;
    let (mut student, mut teacher) = burn_in(&auxiliary, c, &config.surrogate)?;
    let aux_signal = crate::surrogate::label_counts(&auxiliary, c)?;

    let weak_rest: Vec<ImageId> = version.weak_ids.difference(&a0).copied().collect();
    let p = &config.surrogate;
    for round in 0..config.warmup_rounds {
        let pseudo = pseudo_signal(config, seed, &teacher, &world.train, &weak_rest, &[0, round as u64]);
        student = train_update(&student, &aux_signal, p.aux_eta, 0.0);
        student = train_update(&student, &pseudo, p.eta, p.kappa);
        teacher = ema_steps(&teacher, &student, config.ema_decay, p.ema_steps);
    }
    let version = version.seed_full(&a0, &labels)?;

    let mut state = LoopState {
        config: config.clone(),
        seed,
        world,
        auxiliary,
        version,
        student,
        teacher,
        reports: Vec::new(),
        sessions,
    };
    let seconds: f64 = state.sessions.iter().map(|s| s.session.seconds).sum();
    let report = state.report(a0.iter().copied().collect(), seconds, 0, 0);
    state.reports.push(report);
    Ok(state)
}

/// Teacher pseudo-labels on the given weak images, counted per class when
/// their quality clears the surrogate's threshold.
fn pseudo_signal(
    config: &LoopConfig,
    seed: u64,
    teacher: &SkillState,
    data: &Dataset,
    ids: &[ImageId],
    round: &[u64],
) -> TrainSignal {
    let mut signal = TrainSignal::new(config.num_classes());
    for &id in ids {
        let record = data.get(id).expect("weak id in dataset");
        let Some(weak) = record.label.as_weak() else {
            continue;
        };
        let mut tags = vec![tag::PSEUDO, id.0];
        tags.extend_from_slice(round);
        let preds = predict(
            teacher,
            record,
            Role::Teacher,
            &config.surrogate,
            &mut stream(seed, &tags),
        );
        let out = filter_weak(&preds, weak, config.delta);
        for o in &out.label.objects {
            if o.quality > config.surrogate.pseudo_quality {
                signal.add_pseudo(o.class);
            }
        }
    }
    signal
}

/// Teacher AP on the held-out set. The noise stream depends only on the
/// seed and image, so runs that differ in skill see coupled noise.
pub fn evaluate_teacher(teacher: &SkillState, held_out: &Dataset, params: &SurrogateParams, seed: u64) -> Evaluation {
    let images: Vec<(Vec<Prediction>, Vec<GtBox>)> = held_out
        .records
        .values()
        .map(|r| {
            let preds = predict(
                teacher,
                r,
                Role::Teacher,
                params,
                &mut stream(seed, &[tag::PREDICT_EVAL, r.id.0]),
            );
            (preds, r.gt.iter().map(GtBox::from).collect())
        })
        .collect();
    map50_and_map(&images)
}

impl LoopState {
    pub fn t(&self) -> usize {
        self.version.t
    }

    pub fn cumulative_seconds(&self) -> f64 {
        self.reports.last().map_or(0.0, |r| r.cumulative_seconds)
    }

    /// Whether all configured cycles have run.
    pub fn finished(&self) -> bool {
        self.version.t >= self.config.cycles
    }

    /// Predictions of one role on a training image at the current cycle.
    pub fn predict_train(&self, id: ImageId, role: Role) -> Option<Vec<Prediction>> {
        let record = self.world.train.get(id)?;
        let skill = match role {
            Role::Student => &self.student,
            Role::Teacher => &self.teacher,
        };
        let mut rng = stream(
            self.seed,
            &[tag::PREDICT_TRAIN, self.version.t as u64, role_tag(role), id.0],
        );
        Some(predict(skill, record, role, &self.config.surrogate, &mut rng))
    }

    /// Scores every weak image, selects the batch and prepares proposals.
    pub fn begin_cycle(&self) -> Result<PendingBatch, LoopError> {
        let b = self.config.budget;
        let available = self.version.weak_ids.len();
        if available < b {
            return Err(LoopError::BudgetExhausted { needed: b, available });
        }
        let strategy = self.config.strategy;
        let c = self.config.num_classes();
        let mut scores = Vec::with_capacity(available);
        let mut preds = BTreeMap::new();
        for &id in &self.version.weak_ids {
            let student = self.predict_train(id, Role::Student).expect("weak id in dataset");
            let teacher = self.predict_train(id, Role::Teacher).expect("weak id in dataset");
            let weak = self
                .world
                .train
                .get(id)
                .and_then(|r| r.label.as_weak())
                .cloned()
                .unwrap_or_default();
            scores.push(score_image(
                id,
                &student,
                &teacher,
                &weak,
                c,
                strategy,
                self.config.empty_teacher,
            ));
            preds.insert(id, (student, teacher));
        }
        let mut rng = stream(self.seed, &[tag::ACQUIRE, self.version.t as u64]);
        let selected: BTreeSet<ImageId> = select_batch(&self.version, &scores, b, strategy, &mut rng)?
            .into_iter()
            .collect();
        let chosen: Vec<AcqScore> = scores
            .iter()
            .filter(|s| selected.contains(&s.image_id))
            .copied()
            .collect();
        let entries = rank(&chosen)
            .into_iter()
            .enumerate()
            .map(|(i, score)| {
                let (student, teacher) = &preds[&score.image_id];
                BatchEntry {
                    rank: i + 1,
                    score,
                    proposals: prepare_proposals(student, teacher),
                }
            })
            .collect();
        Ok(PendingBatch {
            t: self.version.t,
            entries,
            scores,
        })
    }

    /// Runs the simulated annotator over every entry of the batch.
    pub fn annotate_simulated(&self, batch: &PendingBatch) -> BTreeMap<ImageId, SessionResult> {
        batch
            .entries
            .iter()
            .map(|e| {
                let id = e.score.image_id;
                let gt = self
                    .world
                    .train
                    .get(id)
                    .expect("batch ids come from the dataset")
                    .ground_truth();
                let mut rng = stream(self.seed, &[tag::ANNOTATOR, batch.t as u64 + 1, id.0]);
                let session =
                    simulate_session_with(&e.proposals, &gt, &self.config.cost, &self.config.annotator, &mut rng);
                (id, session)
            })
            .collect()
    }

    /// Promotes the annotated batch, fine-tunes and evaluates.
    pub fn complete_cycle(
        &mut self,
        batch: &PendingBatch,
        sessions: BTreeMap<ImageId, SessionResult>,
    ) -> Result<CycleReport, LoopError> {
        if batch.t != self.version.t {
            return Err(LoopError::StaleBatch {
                batch: batch.t,
                current: self.version.t,
            });
        }
        let acquired = batch.ids();
        let labels: BTreeMap<ImageId, FullLabel> = sessions.iter().map(|(id, s)| (*id, s.label.clone())).collect();
        let next = self.version.promote(&acquired, &labels)?;

        // refinement and pseudo-labels come from the pre-update teacher
        let mut refined_boxes = 0;
        let mut full_signal = TrainSignal::new(self.config.num_classes());
        for (id, label) in &labels {
            let record = self.world.train.get(*id).expect("acquired from dataset");
            let teacher = self.predict_train(*id, Role::Teacher).unwrap_or_default();
            let out = filter_full(&teacher, label, record.extent(), &self.config.refinement);
            refined_boxes += label
                .objects
                .iter()
                .filter(|o| o.quality == crate::dataset::Quality::Imprecise)
                .count()
                - out.unmatched;
            for o in &out.label.objects {
                full_signal.add_full(o.class);
            }
        }
        self.world.train.apply_full_labels(&labels);
        self.version = next;
        let t = self.version.t;
        let weak: Vec<ImageId> = self.version.weak_ids.iter().copied().collect();
        let p = self.config.surrogate.clone();
        let mut pseudo_instances = 0;
        for k in 0..self.config.inner_iterations {
            let pseudo = pseudo_signal(
                &self.config,
                self.seed,
                &self.teacher,
                &self.world.train,
                &weak,
                &[t as u64, k as u64],
            );
            pseudo_instances += pseudo.pseudo.iter().sum::<u64>();
            self.student = train_update(&self.student, &full_signal, p.eta, p.kappa);
            self.student = train_update(&self.student, &pseudo, p.eta, p.kappa);
            self.teacher = ema_steps(&self.teacher, &self.student, self.config.ema_decay, p.ema_steps);
        }

        let seconds: f64 = sessions.values().map(|s| s.seconds).sum();
        for (id, session) in sessions {
            self.sessions.push(SessionRecord {
                t,
                image_id: id,
                session,
            });
        }
        let order: Vec<ImageId> = batch.entries.iter().map(|e| e.score.image_id).collect();
        let report = self.report(order, seconds, pseudo_instances, refined_boxes);
        self.reports.push(report.clone());
        Ok(report)
    }

    /// One full cycle with the simulated annotator.
    pub fn run_cycle(&mut self) -> Result<CycleReport, LoopError> {
        let batch = self.begin_cycle()?;
        let sessions = self.annotate_simulated(&batch);
        self.complete_cycle(&batch, sessions)
    }

    /// Runs the remaining cycles.
    pub fn run_to_end(&mut self) -> Result<(), LoopError> {
        while !self.finished() {
            self.run_cycle()?;
        }
        Ok(())
    }

    fn report(
        &self,
        acquired: Vec<ImageId>,
        cycle_seconds: f64,
        pseudo_instances: u64,
        refined_boxes: usize,
    ) -> CycleReport {
        let eval = evaluate_teacher(&self.teacher, &self.world.held_out, &self.config.surrogate, self.seed);
        CycleReport {
            t: self.version.t,
            strategy: self.config.strategy,
            acquired,
            ap50: eval.ap50,
            ap: eval.ap,
            per_class_ap50: eval.per_class_ap50,
            cycle_seconds,
            cumulative_seconds: self.cumulative_seconds() + cycle_seconds,
            student_skill: self.student.skill.clone(),
            teacher_skill: self.teacher.skill.clone(),
            pseudo_instances,
            refined_boxes,
        }
    }

    /// Same state with a different acquisition strategy.
    pub fn with_strategy(&self, strategy: Strategy) -> LoopState {
        let mut s = self.clone();
        s.config.strategy = strategy;
        for r in &mut s.reports {
            r.strategy = strategy;
        }
        s
    }
}

/// A complete simulated run for one seed.
pub fn simulate(config: &LoopConfig, seed: u64) -> Result<LoopState, LoopError> {
    let mut state = run_initial_seeded(config, seed)?;
    state.run_to_end()?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCurve {
    pub strategy: Strategy,
    pub seed: u64,
    pub ap50: Vec<f64>,
    pub ap: Vec<f64>,
    pub cumulative_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub t: usize,
    pub mean_ap50: f64,
    pub std_ap50: f64,
    pub mean_ap: f64,
    pub std_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunCurve>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Comparison {
    pub fn curve(&self, strategy: Strategy, seed: u64) -> Option<&RunCurve> {
        self.runs.iter().find(|r| r.strategy == strategy && r.seed == seed)
    }

    pub fn final_ap50(&self, strategy: Strategy) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|&s| self.curve(strategy, s).and_then(|c| c.ap50.last().copied()))
            .collect()
    }

    /// Mean and spread across seeds per strategy and cycle.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        for &strategy in &self.strategies {
            let curves: Vec<&RunCurve> = self.runs.iter().filter(|r| r.strategy == strategy).collect();
            let len = curves.iter().map(|c| c.ap50.len()).min().unwrap_or(0);
            for t in 0..len {
                let ap50: Vec<f64> = curves.iter().map(|c| c.ap50[t]).collect();
                let ap: Vec<f64> = curves.iter().map(|c| c.ap[t]).collect();
                let (mean_ap50, std_ap50) = mean_std(&ap50);
                let (mean_ap, std_ap) = mean_std(&ap);
                rows.push(SummaryRow {
                    strategy,
                    t,
                    mean_ap50,
                    std_ap50,
                    mean_ap,
                    std_ap,
                });
            }
        }
        rows
    }
}

/// Runs every strategy from the same warm start for each seed.
pub fn run_comparison(config: &LoopConfig, strategies: &[Strategy]) -> Result<Comparison, LoopError> {
    if strategies.len() < 2 {
        return Err(ConfigError::TooFewStrategies.into());
    }
    config.check()?;
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let warm = run_initial_seeded(config, seed)?;
        for &strategy in strategies {
            let mut state = warm.with_strategy(strategy);
            state.run_to_end()?;
            runs.push(RunCurve {
                strategy,
                seed,
                ap50: state.reports.iter().map(|r| r.ap50).collect(),
                ap: state.reports.iter().map(|r| r.ap).collect(),
                cumulative_seconds: state.reports.iter().map(|r| r.cumulative_seconds).collect(),
            });
        }
    }
    Ok(Comparison {
        strategies: strategies.to_vec(),
        seeds: config.seeds.clone(),
        runs,
    })
}

fn artifact_err(path: &Path, e: impl std::fmt::Display) -> LoopError {
    LoopError::Artifact {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), LoopError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| artifact_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| artifact_err(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), LoopError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| artifact_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| artifact_err(path, e))?;
    }
    w.flush().map_err(|e| artifact_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub t: usize,
    pub ap50: f64,
    pub ap: f64,
    pub acquired: usize,
    pub cycle_seconds: f64,
    pub cumulative_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub t: usize,
    pub ap50: f64,
    pub ap: f64,
    pub cumulative_seconds: f64,
}

impl LoopState {
    pub fn curve_rows(&self) -> Vec<CurveRow> {
        self.reports
            .iter()
            .map(|r| CurveRow {
                t: r.t,
                ap50: r.ap50,
                ap: r.ap,
                acquired: r.acquired.len(),
                cycle_seconds: r.cycle_seconds,
                cumulative_seconds: r.cumulative_seconds,
            })
            .collect()
    }

    /// Writes `config.json`, `version.json`, `reports/cycle_<t>.json`,
    /// `curves.csv` and `cost_audit.json` under `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<(), LoopError> {
        let reports = dir.join("reports");
        fs::create_dir_all(&reports).map_err(|e| artifact_err(&reports, e))?;
        write_json(&dir.join("config.json"), &self.config)?;
        write_json(&dir.join("version.json"), &self.version)?;
        for r in &self.reports {
            write_json(&reports.join(format!("cycle_{}.json", r.t)), r)?;
        }
        write_csv(&dir.join("curves.csv"), &self.curve_rows())?;
        write_json(&dir.join("cost_audit.json"), &self.sessions)
    }
}

impl Comparison {
    pub fn rows(&self) -> Vec<ComparisonRow> {
        self.runs
            .iter()
            .flat_map(|run| {
                (0..run.ap50.len()).map(move |t| ComparisonRow {
                    strategy: run.strategy,
                    seed: run.seed,
                    t,
                    ap50: run.ap50[t],
                    ap: run.ap[t],
                    cumulative_seconds: run.cumulative_seconds[t],
                })
            })
            .collect()
    }

    /// Writes `comparison.csv` (per seed) and `summary.csv` (mean and
    /// spread) under `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<(), LoopError> {
        fs::create_dir_all(dir).map_err(|e| artifact_err(dir, e))?;
        write_csv(&dir.join("comparison.csv"), &self.rows())?;
        write_csv(&dir.join("summary.csv"), &self.summary())
    }

    /// Rebuilds a comparison from its per-seed CSV.
    pub fn read_csv(path: &Path) -> Result<Comparison, LoopError> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| artifact_err(path, e))?;
        let mut strategies = Vec::new();
        let mut seeds = Vec::new();
        let mut runs: Vec<RunCurve> = Vec::new();
        for row in rdr.deserialize::<ComparisonRow>() {
            let row = row.map_err(|e| artifact_err(path, e))?;
            if !strategies.contains(&row.strategy) {
                strategies.push(row.strategy);
            }
            if !seeds.contains(&row.seed) {
                seeds.push(row.seed);
            }
            match runs
                .iter_mut()
                .find(|r| r.strategy == row.strategy && r.seed == row.seed)
            {
                Some(run) => {
                    run.ap50.push(row.ap50);
                    run.ap.push(row.ap);
                    run.cumulative_seconds.push(row.cumulative_seconds);
                }
                None => runs.push(RunCurve {
                    strategy: row.strategy,
                    seed: row.seed,
                    ap50: vec![row.ap50],
                    ap: vec![row.ap],
                    cumulative_seconds: vec![row.cumulative_seconds],
                }),
            }
        }
        Ok(Comparison {
            strategies,
            seeds,
            runs,
        })
    }
}
