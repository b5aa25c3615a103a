//! Image records, label forms and the versioned weak/full partition.
//!
//! A [`DatasetVersion`] is an immutable value: every acquisition produces a
//! new version in which the acquired ids have moved from the weak set to the
//! full set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::BBox;
use crate::synth::SceneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u64);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Annotator judgment of box tightness: precise means IoU >= 0.9 with the
/// true object, imprecise means 0.5 < IoU < 0.9. Serialized as `1` / `0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quality {
    Imprecise,
    Precise,
}

impl Quality {
    pub fn as_flag(self) -> u8 {
        match self {
            Quality::Imprecise => 0,
            Quality::Precise => 1,
        }
    }

    pub fn from_flag(flag: u8) -> Option<Self> {
        match flag {
            0 => Some(Quality::Imprecise),
            1 => Some(Quality::Precise),
            _ => None,
        }
    }
}

impl Serialize for Quality {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.as_flag())
    }
}

impl<'de> Deserialize<'de> for Quality {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let flag = u8::deserialize(deserializer)?;
        Quality::from_flag(flag)
            .ok_or_else(|| serde::de::Error::custom(format!("quality flag must be 0 or 1, got {flag}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: ClassId,
    pub quality: Quality,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FullLabel {
    pub objects: Vec<LabeledObject>,
}

impl FullLabel {
    pub fn new(objects: Vec<LabeledObject>) -> Self {
        Self { objects }
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.objects.iter().map(|o| o.class).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WeakLabel {
    pub classes: BTreeSet<ClassId>,
}

impl WeakLabel {
    pub fn new(classes: impl IntoIterator<Item = ClassId>) -> Self {
        Self {
            classes: classes.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// The learner-visible label of an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Label {
    Weak(WeakLabel),
    Full(FullLabel),
}

impl Label {
    pub fn is_full(&self) -> bool {
        matches!(self, Label::Full(_))
    }

    pub fn as_weak(&self) -> Option<&WeakLabel> {
        match self {
            Label::Weak(w) => Some(w),
            Label::Full(_) => None,
        }
    }

    pub fn as_full(&self) -> Option<&FullLabel> {
        match self {
            Label::Full(f) => Some(f),
            Label::Weak(_) => None,
        }
    }

    /// Classes known to be present, whatever the label form.
    pub fn classes(&self) -> BTreeSet<ClassId> {
        match self {
            Label::Weak(w) => w.classes.clone(),
            Label::Full(f) => f.classes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub uri: Option<String>,
    /// Hidden from the learner; read only by the evaluator and the
    /// simulated annotator.
    #[serde(default)]
    pub gt: Vec<LabeledObject>,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
}

impl ImageRecord {
    pub fn ground_truth(&self) -> FullLabel {
        FullLabel::new(self.gt.clone())
    }

    pub fn weak_from_gt(&self) -> WeakLabel {
        WeakLabel::new(self.gt.iter().map(|o| o.class))
    }

    pub fn extent(&self) -> (f64, f64) {
        (f64::from(self.width), f64::from(self.height))
    }

    pub fn box_in_extent(&self, b: &BBox) -> bool {
        b.x_min() >= 0.0
            && b.y_min() >= 0.0
            && b.x_max() <= f64::from(self.width)
            && b.y_max() <= f64::from(self.height)
    }
}

/// A single broken record invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    EmptyExtent,
    BoxOutOfBounds { field: String, index: usize },
    ClassOutOfRange { field: String, index: usize, class: u32 },
    EmptyWeakLabel,
    WeakLabelIncomplete { missing: Vec<u32> },
    WeakLabelExtraneous { extra: Vec<u32> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyExtent => write!(f, "image extent is empty"),
            Violation::BoxOutOfBounds { field, index } => {
                write!(f, "box out of bounds ({field}[{index}])")
            }
            Violation::ClassOutOfRange { field, index, class } => {
                write!(f, "class {class} out of range ({field}[{index}])")
            }
            Violation::EmptyWeakLabel => write!(f, "weak label is empty"),
            Violation::WeakLabelIncomplete { missing } => {
                write!(f, "weak label incomplete (missing {missing:?})")
            }
            Violation::WeakLabelExtraneous { extra } => {
                write!(f, "weak label lists absent classes {extra:?}")
            }
        }
    }
}

/// Checks every record invariant and returns all violations; empty when
/// the record is valid. Class ids are range-checked only when the class
/// count is known. Records without ground truth skip the weak-label
/// consistency check.
pub fn validate(record: &ImageRecord, num_classes: Option<u32>) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.width == 0 || record.height == 0 {
        out.push(Violation::EmptyExtent);
    }
    let check_objects = |field: &str, objects: &[LabeledObject], out: &mut Vec<Violation>| {
        for (index, o) in objects.iter().enumerate() {
            if !record.box_in_extent(&o.bbox) {
                out.push(Violation::BoxOutOfBounds {
                    field: field.to_string(),
                    index,
                });
            }
            if let Some(c) = num_classes {
                if o.class.0 >= c {
                    out.push(Violation::ClassOutOfRange {
                        field: field.to_string(),
                        index,
                        class: o.class.0,
                    });
                }
            }
        }
    };
    check_objects("gt", &record.gt, &mut out);
    match &record.label {
        Label::Full(full) => check_objects("label", &full.objects, &mut out),
        Label::Weak(weak) => {
            if weak.is_empty() {
                out.push(Violation::EmptyWeakLabel);
            }
            if let Some(c) = num_classes {
                for (index, class) in weak.classes.iter().enumerate() {
                    if class.0 >= c {
                        out.push(Violation::ClassOutOfRange {
                            field: "label".to_string(),
                            index,
                            class: class.0,
                        });
                    }
                }
            }
            if !record.gt.is_empty() {
                let truth = record.weak_from_gt().classes;
                let missing: Vec<u32> = truth.difference(&weak.classes).map(|c| c.0).collect();
                let extra: Vec<u32> = weak.classes.difference(&truth).map(|c| c.0).collect();
                if !missing.is_empty() {
                    out.push(Violation::WeakLabelIncomplete { missing });
                }
                if !extra.is_empty() {
                    out.push(Violation::WeakLabelExtraneous { extra });
                }
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: record {id} is invalid: {}", join_violations(.violations))]
    Invalid {
        line: usize,
        id: ImageId,
        violations: Vec<Violation>,
    },
    #[error("line {line}: duplicate image id {id}")]
    DuplicateId { line: usize, id: ImageId },
    #[error("failed to serialize record {id}: {source}")]
    Serialize {
        id: ImageId,
        #[source]
        source: serde_json::Error,
    },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// All image records of one dataset, keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: BTreeMap<ImageId, ImageRecord>,
}

impl Dataset {
    pub fn from_records(records: impl IntoIterator<Item = ImageRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.id, r)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: ImageId) -> Option<&ImageRecord> {
        self.records.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.records.keys().copied()
    }

    /// Smallest class count consistent with every label in the dataset.
    pub fn inferred_num_classes(&self) -> u32 {
        self.records
            .values()
            .flat_map(|r| {
                r.gt.iter()
                    .map(|o| o.class.0)
                    .chain(r.label.classes().into_iter().map(|c| c.0))
            })
            .max()
            .map_or(1, |m| m + 1)
    }

    /// Version whose full set holds every record that already carries a
    /// full label.
    pub fn initial_version(&self) -> DatasetVersion {
        let (full, weak): (Vec<_>, Vec<_>) = self.records.values().partition(|r| r.label.is_full());
        DatasetVersion {
            t: 0,
            weak_ids: weak.iter().map(|r| r.id).collect(),
            full_ids: full.iter().map(|r| r.id).collect(),
            history: Vec::new(),
        }
    }

    /// Replaces the learner-visible labels of the given records.
    pub fn apply_full_labels(&mut self, labels: &BTreeMap<ImageId, FullLabel>) {
        for (id, label) in labels {
            if let Some(r) = self.records.get_mut(id) {
                r.label = Label::Full(label.clone());
            }
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        for r in self.records.values() {
            let line = serde_json::to_string(r).map_err(|source| DatasetError::Serialize { id: r.id, source })?;
            writeln!(w, "{line}").map_err(|source| DatasetError::Io {
                path: "<writer>".into(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let io_err = |source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(io_err)
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, DatasetError> {
        let mut records = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|source| DatasetError::Io {
                path: "<reader>".into(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ImageRecord =
                serde_json::from_str(&line).map_err(|source| DatasetError::Parse { line: line_no, source })?;
            let violations = validate(&record, None);
            if !violations.is_empty() {
                return Err(DatasetError::Invalid {
                    line: line_no,
                    id: record.id,
                    violations,
                });
            }
            if records.contains_key(&record.id) {
                return Err(DatasetError::DuplicateId {
                    line: line_no,
                    id: record.id,
                });
            }
            records.insert(record.id, record);
        }
        Ok(Self { records })
    }
}

/// Reads a JSON-lines dataset and its initial partition.
pub fn load_dataset(path: &Path) -> Result<(Dataset, DatasetVersion), DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ds = Dataset::read_jsonl(BufReader::new(file))?;
    let version = ds.initial_version();
    Ok((ds, version))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromoteError {
    #[error("image {0} is already fully labeled")]
    AlreadyFull(ImageId),
    #[error("image {0} is not part of the dataset")]
    UnknownId(ImageId),
    #[error("no full label supplied for acquired image {0}")]
    MissingLabel(ImageId),
    #[error("label supplied for image {0}, which was not acquired")]
    UnexpectedLabel(ImageId),
    #[error("initial full labels can only be seeded at t = 0 before any acquisition")]
    SeedAfterStart,
}

/// The partition of image ids into weakly and fully labeled sets at cycle
/// `t`, plus the batches acquired so far.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetVersion {
    pub t: usize,
    pub weak_ids: BTreeSet<ImageId>,
    pub full_ids: BTreeSet<ImageId>,
    pub history: Vec<Vec<ImageId>>,
}

impl DatasetVersion {
    pub fn len(&self) -> usize {
        self.weak_ids.len() + self.full_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_acquisition(
        &self,
        acquired: &BTreeSet<ImageId>,
        labels: &BTreeMap<ImageId, FullLabel>,
    ) -> Result<(), PromoteError> {
        for id in acquired {
            if self.full_ids.contains(id) {
                return Err(PromoteError::AlreadyFull(*id));
            }
            if !self.weak_ids.contains(id) {
                return Err(PromoteError::UnknownId(*id));
            }
            if !labels.contains_key(id) {
                return Err(PromoteError::MissingLabel(*id));
            }
        }
        if let Some(id) = labels.keys().find(|id| !acquired.contains(id)) {
            return Err(PromoteError::UnexpectedLabel(*id));
        }
        Ok(())
    }

    /// Moves `acquired` from the weak to the full set and advances `t`.
    pub fn promote(
        &self,
        acquired: &BTreeSet<ImageId>,
        labels: &BTreeMap<ImageId, FullLabel>,
    ) -> Result<DatasetVersion, PromoteError> {
        self.check_acquisition(acquired, labels)?;
        let mut next = self.clone();
        for id in acquired {
            next.weak_ids.remove(id);
            next.full_ids.insert(*id);
        }
        next.t += 1;
        next.history.push(acquired.iter().copied().collect());
        Ok(next)
    }

    /// Adds the initial fully-annotated sample to the full set without
    /// starting a cycle. Only valid before the first acquisition.
    pub fn seed_full(
        &self,
        acquired: &BTreeSet<ImageId>,
        labels: &BTreeMap<ImageId, FullLabel>,
    ) -> Result<DatasetVersion, PromoteError> {
        if self.t != 0 || !self.history.is_empty() {
            return Err(PromoteError::SeedAfterStart);
        }
        self.check_acquisition(acquired, labels)?;
        let mut next = self.clone();
        for id in acquired {
            next.weak_ids.remove(id);
            next.full_ids.insert(*id);
        }
        Ok(next)
    }
}
