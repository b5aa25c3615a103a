//! Auxiliary fully-labeled scenes built by copy-pasting object templates
//! cropped from annotated images onto object-free backgrounds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassId, Dataset, FullLabel, ImageId, ImageRecord, Label, LabeledObject, Quality};
use crate::geometry::{BBox, Point};
use crate::seed::{stream, tag, SimRng};

/// Marker stored in the `source` field of generated records.
pub const AUXILIARY_SOURCE: &str = "auxiliary";
/// Auxiliary record ids start here so they never collide with real images.
pub const AUXILIARY_ID_BASE: u64 = 1_000_000;

const MAX_ATTEMPTS: usize = 100;
const MIN_SCALE: f64 = 0.5;
const MAX_SCALE: f64 = 1.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no templates to paste")]
    NoTemplates,
    #[error("no backgrounds to paste onto")]
    NoBackgrounds,
    #[error("multiplier must be positive, got {0}")]
    BadMultiplier(f64),
    #[error("object count must be at least 1")]
    NoObjects,
    #[error("invalid objects-per-scene range {0}..={1}")]
    BadRange(usize, usize),
    #[error("no template fits a {width}x{height} background")]
    ExtentTooSmall { width: u32, height: u32 },
    #[error("missing raster {uri}")]
    MissingRaster { uri: String },
    #[error("cannot read raster {uri}: {source}")]
    RasterRead {
        uri: String,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot write raster {path}: {source}")]
    RasterWrite {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// One object instance cut out of a fully-labeled image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub source: ImageId,
    pub crop: BBox,
    pub class: ClassId,
}

impl Template {
    /// Pixel rectangle covering the crop box, as (x, y, width, height).
    pub fn pixel_rect(&self) -> (u32, u32, u32, u32) {
        let x0 = self.crop.x_min().floor().max(0.0) as u32;
        let y0 = self.crop.y_min().floor().max(0.0) as u32;
        let x1 = self.crop.x_max().ceil() as u32;
        let y1 = self.crop.y_max().ceil() as u32;
        (x0, y0, (x1 - x0).max(1), (y1 - y0).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub template: Template,
    pub scale: f64,
    /// Clockwise quarter turns, 0..=3.
    pub rotation: u8,
    /// Horizontal mirror, applied before rotation.
    pub flip: bool,
    /// Top-left corner of the footprint.
    pub anchor: Point,
}

impl Placement {
    /// Integer width and height after rotation and scaling.
    pub fn footprint_size(&self) -> (u32, u32) {
        footprint_size(&self.template, self.scale, self.rotation)
    }

    pub fn footprint(&self) -> BBox {
        let (w, h) = self.footprint_size();
        BBox::from_xywh(self.anchor.x, self.anchor.y, f64::from(w), f64::from(h)).expect("positive footprint")
    }
}

fn footprint_size(t: &Template, scale: f64, rotation: u8) -> (u32, u32) {
    let (_, _, w, h) = t.pixel_rect();
    let (w, h) = if rotation % 2 == 1 { (h, w) } else { (w, h) };
    let s = |v: u32| ((f64::from(v) * scale).round() as u32).max(1);
    (s(w), s(h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: ImageId,
    pub placements: Vec<Placement>,
}

/// An object-free image that scenes are composed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub uri: Option<String>,
}

/// One template per object of every fully-labeled record.
pub fn crop_templates<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> Vec<Template> {
    records
        .into_iter()
        .filter_map(|r| r.label.as_full().map(|full| (r.id, full)))
        .flat_map(|(id, full)| {
            full.objects.iter().map(move |o| Template {
                source: id,
                crop: o.bbox,
                class: o.class,
            })
        })
        .collect()
}

/// Samples `k` placements that lie fully inside the extent. Each placement
/// gets up to 100 random scale/rotation draws; after that the smallest
/// scale is tried in both orientations, and failing that another template.
pub fn compose_scene(
    background: &Background,
    templates: &[Template],
    rng: &mut SimRng,
    k: usize,
) -> Result<(SceneSpec, FullLabel), SynthError> {
    if templates.is_empty() {
        return Err(SynthError::NoTemplates);
    }
    if k == 0 {
        return Err(SynthError::NoObjects);
    }
    let (bw, bh) = (background.width, background.height);
    let fits = |t: &Template, scale: f64, rotation: u8| {
        let (w, h) = footprint_size(t, scale, rotation);
        w <= bw && h <= bh
    };
    if !templates.iter().any(|t| fits(t, MIN_SCALE, 0) || fits(t, MIN_SCALE, 1)) {
        return Err(SynthError::ExtentTooSmall { width: bw, height: bh });
    }
    let mut placements = Vec::with_capacity(k);
    while placements.len() < k {
        let template = *templates.choose(rng).expect("non-empty");
        let flip = rng.random_bool(0.5);
        let mut chosen = None;
        for _ in 0..MAX_ATTEMPTS {
            let scale = rng.random_range(MIN_SCALE..=MAX_SCALE);
            let rotation = rng.random_range(0..4u8);
            if fits(&template, scale, rotation) {
                chosen = Some((scale, rotation));
                break;
            }
        }
        let chosen = chosen.or_else(|| {
            [0u8, 1]
                .into_iter()
                .find(|&r| fits(&template, MIN_SCALE, r))
                .map(|r| (MIN_SCALE, r))
        });
        let Some((scale, rotation)) = chosen else {
            continue;
        };
        let (w, h) = footprint_size(&template, scale, rotation);
        let x = rng.random_range(0..=bw - w);
        let y = rng.random_range(0..=bh - h);
        placements.push(Placement {
            template,
            scale,
            rotation,
            flip,
            anchor: Point {
                x: f64::from(x),
                y: f64::from(y),
            },
        });
    }
    let label = FullLabel::new(
        placements
            .iter()
            .map(|p| LabeledObject {
                bbox: p.footprint(),
                class: p.template.class,
                quality: Quality::Precise,
            })
            .collect(),
    );
    Ok((
        SceneSpec {
            background: background.id,
            placements,
        },
        label,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxiliaryConfig {
    /// Auxiliary set size as a multiple of the real dataset size.
    pub multiplier: f64,
    /// Inclusive range of objects per scene.
    pub objects_per_scene: (usize, usize),
}

impl Default for AuxiliaryConfig {
    fn default() -> Self {
        Self {
            multiplier: 2.0,
            objects_per_scene: (1, 12),
        }
    }
}

impl AuxiliaryConfig {
    pub fn size_for(&self, n_real: usize) -> usize {
        (self.multiplier * n_real as f64).round() as usize
    }
}

/// Builds `round(multiplier * n_real)` fully-labeled scenes. Scene `i`
/// draws from its own stream, so the output is a pure function of the
/// inputs and the seed.
pub fn generate_auxiliary<'a>(
    a0_records: impl IntoIterator<Item = &'a ImageRecord>,
    backgrounds: &[Background],
    n_real: usize,
    config: &AuxiliaryConfig,
    seed: u64,
) -> Result<Dataset, SynthError> {
    if !config.multiplier.is_finite() || config.multiplier <= 0.0 {
        return Err(SynthError::BadMultiplier(config.multiplier));
    }
    let (lo, hi) = config.objects_per_scene;
    if lo == 0 || lo > hi {
        return Err(SynthError::BadRange(lo, hi));
    }
    let templates = crop_templates(a0_records);
    if templates.is_empty() {
        return Err(SynthError::NoTemplates);
    }
    if backgrounds.is_empty() {
        return Err(SynthError::NoBackgrounds);
    }
    let mut records = Vec::new();
    for i in 0..config.size_for(n_real) as u64 {
        let mut rng = stream(seed, &[tag::AUXILIARY, i]);
        let bg = backgrounds.choose(&mut rng).expect("non-empty");
        let k = rng.random_range(lo..=hi);
        let (scene, label) = compose_scene(bg, &templates, &mut rng, k)?;
        records.push(ImageRecord {
            id: ImageId(AUXILIARY_ID_BASE + i),
            width: bg.width,
            height: bg.height,
            uri: None,
            gt: label.objects.clone(),
            label: Label::Full(label),
            source: Some(AUXILIARY_SOURCE.to_string()),
            scene: Some(scene),
        });
    }
    Ok(Dataset::from_records(records))
}

/// Maps image ids to raster files under a root directory.
#[derive(Debug, Clone, Default)]
pub struct RasterStore {
    root: PathBuf,
    uris: BTreeMap<ImageId, String>,
}

impl RasterStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            uris: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: ImageId, uri: impl Into<String>) {
        self.uris.insert(id, uri.into());
    }

    pub fn path_of(&self, uri: &str) -> PathBuf {
        self.root.join(uri)
    }

    pub fn load(&self, id: ImageId) -> Result<RgbImage, SynthError> {
        let uri = self.uris.get(&id).ok_or_else(|| SynthError::MissingRaster {
            uri: format!("<no uri for image {id}>"),
        })?;
        let path = self.path_of(uri);
        if !path.exists() {
            return Err(SynthError::MissingRaster { uri: uri.clone() });
        }
        image::open(&path)
            .map(|img| img.to_rgb8())
            .map_err(|source| SynthError::RasterRead {
                uri: uri.clone(),
                source,
            })
    }
}

/// The background with every placement pasted over it in order; later
/// placements cover earlier ones.
pub fn render_scene(spec: &SceneSpec, store: &RasterStore) -> Result<RgbImage, SynthError> {
    let mut canvas = store.load(spec.background)?;
    let mut sources: BTreeMap<ImageId, RgbImage> = BTreeMap::new();
    for p in &spec.placements {
        let src = match sources.entry(p.template.source) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => e.insert(store.load(p.template.source)?),
        };
        let (x, y, w, h) = p.template.pixel_rect();
        let w = w.min(src.width().saturating_sub(x)).max(1);
        let h = h.min(src.height().saturating_sub(y)).max(1);
        let mut patch = imageops::crop_imm(src, x, y, w, h).to_image();
        if p.flip {
            patch = imageops::flip_horizontal(&patch);
        }
        patch = match p.rotation % 4 {
            1 => imageops::rotate90(&patch),
            2 => imageops::rotate180(&patch),
            3 => imageops::rotate270(&patch),
            _ => patch,
        };
        let (fw, fh) = p.footprint_size();
        let patch = imageops::resize(&patch, fw, fh, imageops::FilterType::Nearest);
        imageops::replace(&mut canvas, &patch, p.anchor.x as i64, p.anchor.y as i64);
    }
    Ok(canvas)
}

/// Writes a raster; the format follows the extension (png, ppm).
pub fn save_raster(img: &RgbImage, path: &Path) -> Result<(), SynthError> {
    img.save(path).map_err(|source| SynthError::RasterWrite {
        path: path.display().to_string(),
        source,
    })
}
