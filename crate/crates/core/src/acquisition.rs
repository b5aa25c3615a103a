//! Acquisition scoring for weakly-labeled images and batch selection.

use std::io::Write;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetVersion, ImageId, WeakLabel};
use crate::eval::{average_precision, GtBox, Prediction};
use crate::seed::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Product,
    Sum,
    Uniform,
    EntropySum,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Product,
        Strategy::Sum,
        Strategy::Uniform,
        Strategy::EntropySum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Product => "product",
            Strategy::Sum => "sum",
            Strategy::Uniform => "uniform",
            Strategy::EntropySum => "entropy_sum",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = AcquisitionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| AcquisitionError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AcquisitionError {
    #[error("strategy {0} does not fuse scores")]
    NotFusing(Strategy),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("budget {budget} exceeds the {available} weakly-labeled images")]
    BudgetTooLarge { budget: usize, available: usize },
    #[error("failed to write scores: {0}")]
    Export(String),
}

/// What β_IU is when the teacher predicts nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyTeacher {
    /// ln C: silence counts as maximal uncertainty.
    #[default]
    MaxEntropy,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcqScore {
    pub image_id: ImageId,
    pub beta_md: f64,
    pub beta_iu: f64,
    /// Ranking key under the strategy: the fused score for product/sum, the
    /// entropy sum for entropy_sum, and the product for uniform (which does
    /// not rank).
    pub fused: f64,
}

/// 1 minus the mean over weak classes of the student's AP at IoU 0.5
/// against teacher predictions of that class used as ground truth.
pub fn model_disagreement(student: &[Prediction], teacher: &[Prediction], weak: &WeakLabel) -> f64 {
    if weak.is_empty() {
        return 0.0;
    }
    let pseudo_gt: Vec<GtBox> = teacher.iter().map(GtBox::from).collect();
    let total: f64 = weak
        .classes
        .iter()
        .map(|&c| average_precision(student, &pseudo_gt, c, 0.5))
        .sum();
    (1.0 - total / weak.len() as f64).clamp(0.0, 1.0)
}

/// Maximum class-distribution entropy over teacher predictions.
pub fn image_uncertainty(teacher: &[Prediction], num_classes: usize, empty: EmptyTeacher) -> f64 {
    if teacher.is_empty() {
        return match empty {
            EmptyTeacher::MaxEntropy => (num_classes as f64).ln(),
            EmptyTeacher::Zero => 0.0,
        };
    }
    teacher.iter().map(Prediction::entropy).fold(0.0, f64::max)
}

pub fn fuse(beta_md: f64, beta_iu: f64, mode: Strategy) -> Result<f64, AcquisitionError> {
    match mode {
        Strategy::Product => Ok(beta_md * beta_iu),
        Strategy::Sum => Ok(beta_md + beta_iu),
        other => Err(AcquisitionError::NotFusing(other)),
    }
}

pub fn score_image(
    image_id: ImageId,
    student: &[Prediction],
    teacher: &[Prediction],
    weak: &WeakLabel,
    num_classes: usize,
    strategy: Strategy,
    empty: EmptyTeacher,
) -> AcqScore {
    let beta_md = model_disagreement(student, teacher, weak);
    let beta_iu = image_uncertainty(teacher, num_classes, empty);
    let fused = match strategy {
        Strategy::Product | Strategy::Uniform => beta_md * beta_iu,
        Strategy::Sum => beta_md + beta_iu,
        Strategy::EntropySum => teacher.iter().map(Prediction::entropy).sum(),
    };
    AcqScore {
        image_id,
        beta_md,
        beta_iu,
        fused,
    }
}

/// Scores sorted by fused score descending, ties by lower image id.
pub fn rank(scores: &[AcqScore]) -> Vec<AcqScore> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.fused.total_cmp(&a.fused).then(a.image_id.cmp(&b.image_id)));
    ranked
}

/// Picks B weakly-labeled images. Scored strategies return the batch in
/// rank order; uniform returns the draw order.
pub fn select_batch(
    version: &DatasetVersion,
    scores: &[AcqScore],
    budget: usize,
    strategy: Strategy,
    rng: &mut SimRng,
) -> Result<Vec<ImageId>, AcquisitionError> {
    let available = version.weak_ids.len();
    if budget > available {
        return Err(AcquisitionError::BudgetTooLarge { budget, available });
    }
    if strategy == Strategy::Uniform {
        let pool: Vec<ImageId> = version.weak_ids.iter().copied().collect();
        return Ok(pool.choose_multiple(rng, budget).copied().collect());
    }
    let eligible: Vec<AcqScore> = scores
        .iter()
        .filter(|s| version.weak_ids.contains(&s.image_id))
        .copied()
        .collect();
    if budget > eligible.len() {
        return Err(AcquisitionError::BudgetTooLarge {
            budget,
            available: eligible.len(),
        });
    }
    Ok(rank(&eligible).into_iter().take(budget).map(|s| s.image_id).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    image_id: u64,
    beta_md: f64,
    beta_iu: f64,
    fused: f64,
    rank: usize,
}

/// Writes `image_id,beta_md,beta_iu,fused,rank`, rank 1 being the best.
pub fn write_scores_csv<W: Write>(scores: &[AcqScore], w: W) -> Result<(), AcquisitionError> {
    let mut out = csv::Writer::from_writer(w);
    for (i, s) in rank(scores).iter().enumerate() {
        out.serialize(ScoreRow {
            image_id: s.image_id.0,
            beta_md: s.beta_md,
            beta_iu: s.beta_iu,
            fused: s.fused,
            rank: i + 1,
        })
        .map_err(|e| AcquisitionError::Export(e.to_string()))?;
    }
    out.flush().map_err(|e| AcquisitionError::Export(e.to_string()))
}

/// Reads a scores CSV back, returning (score, rank) pairs in file order.
pub fn read_scores_csv<R: std::io::Read>(r: R) -> Result<Vec<(AcqScore, usize)>, AcquisitionError> {
    csv::Reader::from_reader(r)
        .deserialize::<ScoreRow>()
        .map(|row| {
            let row = row.map_err(|e| AcquisitionError::Export(e.to_string()))?;
            Ok((
                AcqScore {
                    image_id: ImageId(row.image_id),
                    beta_md: row.beta_md,
                    beta_iu: row.beta_iu,
                    fused: row.fused,
                },
                row.rank,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassId;
    use crate::eval::Role;
    use crate::geometry::BBox;
    use crate::seed::stream;

    fn pred(x: f64, class: usize, role: Role) -> Prediction {
        let mut dist = vec![0.0; 3];
        dist[class] = 1.0;
        Prediction::from_distribution(BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(), dist, role).unwrap()
    }

    fn version(weak: &[u64], full: &[u64]) -> DatasetVersion {
        DatasetVersion {
            t: 0,
            weak_ids: weak.iter().map(|&i| ImageId(i)).collect(),
            full_ids: full.iter().map(|&i| ImageId(i)).collect(),
            history: Vec::new(),
        }
    }

    fn score(id: u64, fused: f64) -> AcqScore {
        AcqScore {
            image_id: ImageId(id),
            beta_md: 0.0,
            beta_iu: 0.0,
            fused,
        }
    }

    #[test]
    fn disagreement_examples() {
        let teacher = vec![pred(0.0, 0, Role::Teacher), pred(50.0, 1, Role::Teacher)];
        let weak = WeakLabel::new([ClassId(0), ClassId(1)]);
        let same: Vec<_> = teacher
            .iter()
            .map(|p| Prediction {
                role: Role::Student,
                ..p.clone()
            })
            .collect();
        assert_eq!(model_disagreement(&same, &teacher, &weak), 0.0);
        assert_eq!(model_disagreement(&[], &teacher, &weak), 1.0);
        let half = vec![pred(0.0, 0, Role::Student)];
        assert_eq!(model_disagreement(&half, &teacher, &weak), 0.5);
    }

    #[test]
    fn uncertainty_examples() {
        assert_eq!(
            image_uncertainty(&[pred(0.0, 0, Role::Teacher)], 3, EmptyTeacher::MaxEntropy),
            0.0
        );
        let uniform =
            Prediction::from_distribution(BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), vec![0.25; 4], Role::Teacher)
                .unwrap();
        assert!((image_uncertainty(&[uniform], 4, EmptyTeacher::MaxEntropy) - 4f64.ln()).abs() < 1e-12);
        assert!((image_uncertainty(&[], 4, EmptyTeacher::MaxEntropy) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(image_uncertainty(&[], 4, EmptyTeacher::Zero), 0.0);

        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let p1 = Prediction::from_distribution(b, vec![0.9, 0.1], Role::Teacher).unwrap();
        let p2 = Prediction::from_distribution(b, vec![0.6, 0.4], Role::Teacher).unwrap();
        let expect = p1.entropy().max(p2.entropy());
        assert_eq!(image_uncertainty(&[p1, p2], 2, EmptyTeacher::MaxEntropy), expect);
    }

    #[test]
    fn fuse_examples() {
        assert!((fuse(0.5, 0.8, Strategy::Product).unwrap() - 0.4).abs() < 1e-15);
        assert!((fuse(0.5, 0.8, Strategy::Sum).unwrap() - 1.3).abs() < 1e-15);
        assert_eq!(fuse(0.0, 7.0, Strategy::Product).unwrap(), 0.0);
        assert!(fuse(0.5, 0.8, Strategy::Uniform).is_err());
        assert!(fuse(0.5, 0.8, Strategy::EntropySum).is_err());
    }

    #[test]
    fn select_top_and_ties() {
        let v = version(&[1, 2, 3], &[]);
        let mut rng = stream(0, &[]);
        let scores = [score(1, 0.9), score(2, 0.1), score(3, 0.5)];
        assert_eq!(
            select_batch(&v, &scores, 2, Strategy::Product, &mut rng).unwrap(),
            vec![ImageId(1), ImageId(3)]
        );
        let tied = [score(3, 0.2), score(2, 0.2), score(1, 0.2)];
        assert_eq!(
            select_batch(&v, &tied, 2, Strategy::Product, &mut rng).unwrap(),
            vec![ImageId(1), ImageId(2)]
        );
        assert!(matches!(
            select_batch(&v, &scores, 4, Strategy::Product, &mut rng),
            Err(AcquisitionError::BudgetTooLarge {
                budget: 4,
                available: 3
            })
        ));
    }

    #[test]
    fn select_ignores_full_images() {
        let v = version(&[2, 3], &[1]);
        let scores = [score(1, 0.9), score(2, 0.1), score(3, 0.5)];
        let a = select_batch(&v, &scores, 2, Strategy::Sum, &mut stream(0, &[])).unwrap();
        assert_eq!(a, vec![ImageId(3), ImageId(2)]);
    }

    #[test]
    fn uniform_is_seeded() {
        let v = version(&(0..50).collect::<Vec<_>>(), &[]);
        let a = select_batch(&v, &[], 5, Strategy::Uniform, &mut stream(9, &[1])).unwrap();
        let b = select_batch(&v, &[], 5, Strategy::Uniform, &mut stream(9, &[1])).unwrap();
        let c = select_batch(&v, &[], 5, Strategy::Uniform, &mut stream(10, &[1])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|id| v.weak_ids.contains(id)));
    }

    #[test]
    fn rescaling_uncertainty_keeps_product_selection() {
        let v = version(&[1, 2, 3, 4], &[]);
        let raw = [(1, 0.2, 0.9), (2, 0.8, 0.3), (3, 0.5, 0.5), (4, 0.1, 1.2)];
        let pick = |k: f64| {
            let s: Vec<_> = raw
                .iter()
                .map(|&(id, md, iu)| AcqScore {
                    image_id: ImageId(id),
                    beta_md: md,
                    beta_iu: iu * k,
                    fused: fuse(md, iu * k, Strategy::Product).unwrap(),
                })
                .collect();
            select_batch(&v, &s, 2, Strategy::Product, &mut stream(0, &[])).unwrap()
        };
        assert_eq!(pick(1.0), pick(1.0 / 2f64.ln()));
    }

    #[test]
    fn csv_round_trip() {
        let scores = vec![
            AcqScore {
                image_id: ImageId(4),
                beta_md: 0.25,
                beta_iu: 1.1,
                fused: 0.275,
            },
            AcqScore {
                image_id: ImageId(2),
                beta_md: 0.5,
                beta_iu: 0.9,
                fused: 0.45,
            },
        ];
        let mut buf = Vec::new();
        write_scores_csv(&scores, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("image_id,beta_md,beta_iu,fused,rank\n2,"));
        let back = read_scores_csv(&buf[..]).unwrap();
        assert_eq!(back, vec![(scores[1], 1), (scores[0], 2)]);
    }
}
