//! Surrogate student/teacher detector. Each class has a skill in [0, 1]
//! that controls recall, localization noise and class confusion; training
//! raises skill along a saturating curve and the teacher tracks the student
//! by exponential moving average.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassId, Dataset, ImageRecord};
use crate::eval::{Prediction, Role};
use crate::geometry::BBox;
use crate::seed::SimRng;

/// EMA decay used for the teacher.
pub const DEFAULT_EMA_DECAY: f64 = 0.9996;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SurrogateError {
    #[error("auxiliary dataset is empty")]
    EmptyAuxiliary,
    #[error("class {class} outside the {num_classes} surrogate classes")]
    UnknownClass { class: ClassId, num_classes: usize },
}

/// Every constant of the surrogate, in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateParams {
    /// Skill every class starts from before burn-in.
    pub init_skill: f64,
    /// Detection probability is `recall_floor + (1 - recall_floor) * s`.
    pub recall_floor: f64,
    /// Per-coordinate jitter is `jitter_scale * (1 - s) * box size`.
    pub jitter_scale: f64,
    /// Class distribution mixes in `mix_scale * (1 - s)` of the uniform.
    pub mix_scale: f64,
    /// Probability `swap_scale * (1 - s)` of moving the argmax elsewhere.
    pub swap_scale: f64,
    /// Mean false positives per image at zero mean skill.
    pub fp_rate: f64,
    /// False-positive box sides as a fraction of the image side.
    pub fp_size: (f64, f64),
    /// Training rate per fully-labeled instance in the loop.
    pub eta: f64,
    /// Training rate per auxiliary instance during burn-in.
    pub aux_eta: f64,
    /// Discount on pseudo-labeled instances.
    pub kappa: f64,
    /// Pseudo-labels count toward training only above this quality.
    pub pseudo_quality: f64,
    /// EMA steps applied per training pass.
    pub ema_steps: u32,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            init_skill: 0.0,
            recall_floor: 0.2,
            jitter_scale: 0.25,
            mix_scale: 0.6,
            swap_scale: 0.3,
            fp_rate: 0.5,
            fp_size: (0.05, 0.25),
            eta: 0.05,
            aux_eta: 0.002,
            kappa: 0.02,
            pseudo_quality: 0.7,
            ema_steps: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillState {
    pub skill: Vec<f64>,
    pub fp_rate: f64,
}

impl SkillState {
    pub fn uniform(num_classes: usize, skill: f64, fp_rate: f64) -> Self {
        Self {
            skill: vec![skill.clamp(0.0, 1.0); num_classes],
            fp_rate,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.skill.len()
    }

    pub fn mean_skill(&self) -> f64 {
        if self.skill.is_empty() {
            return 0.0;
        }
        self.skill.iter().sum::<f64>() / self.skill.len() as f64
    }

    fn get(&self, class: ClassId) -> f64 {
        self.skill.get(class.index()).copied().unwrap_or(0.0)
    }
}

/// Per-class instance counts driving one training pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainSignal {
    pub full: Vec<u64>,
    pub pseudo: Vec<u64>,
}

impl TrainSignal {
    pub fn new(num_classes: usize) -> Self {
        Self {
            full: vec![0; num_classes],
            pseudo: vec![0; num_classes],
        }
    }

    pub fn add_full(&mut self, class: ClassId) {
        if let Some(n) = self.full.get_mut(class.index()) {
            *n += 1;
        }
    }

    pub fn add_pseudo(&mut self, class: ClassId) {
        if let Some(n) = self.pseudo.get_mut(class.index()) {
            *n += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.full.iter().chain(&self.pseudo).sum()
    }
}

/// `s_c <- 1 - (1 - s_c) * exp(-eta * (full_c + kappa * pseudo_c))`.
pub fn train_update(skill: &SkillState, signal: &TrainSignal, eta: f64, kappa: f64) -> SkillState {
    let skill_vec = skill
        .skill
        .iter()
        .enumerate()
        .map(|(c, &s)| {
            let full = signal.full.get(c).copied().unwrap_or(0) as f64;
            let pseudo = signal.pseudo.get(c).copied().unwrap_or(0) as f64;
            let exposure = full + kappa * pseudo;
            if exposure == 0.0 {
                s
            } else {
                (1.0 - (1.0 - s) * (-eta * exposure).exp()).clamp(0.0, 1.0)
            }
        })
        .collect();
    SkillState {
        skill: skill_vec,
        fp_rate: skill.fp_rate,
    }
}

/// One EMA step per coordinate: `q * teacher + (1 - q) * student`.
pub fn ema_update(teacher: &SkillState, student: &SkillState, q: f64) -> SkillState {
    SkillState {
        skill: teacher
            .skill
            .iter()
            .zip(&student.skill)
            .map(|(&t, &s)| q * t + (1.0 - q) * s)
            .collect(),
        fp_rate: teacher.fp_rate,
    }
}

/// `steps` EMA steps against a fixed student.
pub fn ema_steps(teacher: &SkillState, student: &SkillState, q: f64, steps: u32) -> SkillState {
    let mut out = teacher.clone();
    for _ in 0..steps {
        out = ema_update(&out, student, q);
    }
    out
}

/// Noisy detections of the record's ground truth.
///
/// Every object consumes the same number of draws whether or not it is
/// detected, so two skill states evaluated on the same stream see coupled
/// noise.
pub fn predict(
    skill: &SkillState,
    record: &ImageRecord,
    role: Role,
    params: &SurrogateParams,
    rng: &mut SimRng,
) -> Vec<Prediction> {
    let c_total = skill.num_classes().max(1);
    let (w, h) = record.extent();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::new();
    for obj in &record.gt {
        let s = skill.get(obj.class);
        let detect: f64 = rng.random();
        let z: [f64; 4] = std::array::from_fn(|_| std_normal.sample(rng));
        let swap: f64 = rng.random();
        let other = rng.random_range(0..c_total.max(2) - 1);
        if detect >= params.recall_floor + (1.0 - params.recall_floor) * s {
            continue;
        }
        let b = obj.bbox;
        let sx = params.jitter_scale * (1.0 - s) * b.width();
        let sy = params.jitter_scale * (1.0 - s) * b.height();
        let bbox = jittered(
            [
                b.x_min() + sx * z[0],
                b.y_min() + sy * z[1],
                b.x_max() + sx * z[2],
                b.y_max() + sy * z[3],
            ],
            (w, h),
        );
        let u = params.mix_scale * (1.0 - s);
        let mut dist = vec![u / c_total as f64; c_total];
        let true_class = obj.class.index().min(c_total - 1);
        dist[true_class] += 1.0 - u;
        if c_total > 1 && swap < params.swap_scale * (1.0 - s) {
            let other = if other >= true_class { other + 1 } else { other };
            dist.swap(true_class, other);
        }
        out.push(Prediction::from_distribution(bbox, dist, role).expect("mixture of distributions"));
    }

    let mean = skill.fp_rate * (1.0 - skill.mean_skill());
    let n_fp = if mean > 0.0 {
        Poisson::new(mean).expect("positive mean").sample(rng) as usize
    } else {
        0
    };
    for _ in 0..n_fp {
        let (lo, hi) = params.fp_size;
        let bw = w * rng.random_range(lo..=hi);
        let bh = h * rng.random_range(lo..=hi);
        let x0 = rng.random_range(0.0..=(w - bw).max(0.0));
        let y0 = rng.random_range(0.0..=(h - bh).max(0.0));
        let bbox = jittered([x0, y0, x0 + bw, y0 + bh], (w, h));
        let raw: Vec<f64> = (0..c_total).map(|_| 1.0 + 0.2 * rng.random::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        let mut dist: Vec<f64> = raw.iter().map(|r| r / sum).collect();
        // keep the sum within rounding of 1
        let drift: f64 = 1.0 - dist.iter().sum::<f64>();
        dist[0] += drift;
        out.push(Prediction::from_distribution(bbox, dist, role).expect("normalized"));
    }
    out
}

/// Clamps corners into the extent, keeping at least one pixel per side.
fn jittered(c: [f64; 4], (w, h): (f64, f64)) -> BBox {
    let fix = |lo: f64, hi: f64, limit: f64| {
        let (mut lo, mut hi) = (lo.min(hi).clamp(0.0, limit), hi.max(lo).clamp(0.0, limit));
        if hi - lo < 1.0 {
            let mid = ((lo + hi) / 2.0).clamp(0.5, (limit - 0.5).max(0.5));
            lo = (mid - 0.5).max(0.0);
            hi = lo + 1.0;
        }
        (lo, hi)
    };
    let (x0, x1) = fix(c[0], c[2], w);
    let (y0, y1) = fix(c[1], c[3], h);
    BBox::new(x0, y0, x1, y1).expect("at least one pixel wide")
}

/// Per-class instance counts over the full labels of a dataset.
pub fn label_counts(data: &Dataset, num_classes: usize) -> Result<TrainSignal, SurrogateError> {
    let mut signal = TrainSignal::new(num_classes);
    for id in data.ids() {
        let record = data.get(id).expect("listed id");
        let objects = match record.label.as_full() {
            Some(full) => &full.objects,
            None => &record.gt,
        };
        for o in objects {
            if o.class.index() >= num_classes {
                return Err(SurrogateError::UnknownClass {
                    class: o.class,
                    num_classes,
                });
            }
            signal.add_full(o.class);
        }
    }
    Ok(signal)
}

/// Trains a fresh student on the auxiliary labels; the teacher starts as an
/// exact copy.
pub fn burn_in(
    aux: &Dataset,
    num_classes: usize,
    params: &SurrogateParams,
) -> Result<(SkillState, SkillState), SurrogateError> {
    if aux.is_empty() {
        return Err(SurrogateError::EmptyAuxiliary);
    }
    let signal = label_counts(aux, num_classes)?;
    let init = SkillState::uniform(num_classes, params.init_skill, params.fp_rate);
    let student = train_update(&init, &signal, params.aux_eta, params.kappa);
    let teacher = student.clone();
    Ok((student, teacher))
}
