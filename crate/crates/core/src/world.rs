//! Synthetic "real" datasets: weakly-labeled images with hidden ground
//! truth drawn from a class-imbalanced distribution, plus object-free
//! backgrounds and a simple raster renderer for both.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassId, Dataset, ImageId, ImageRecord, Label, LabeledObject, Quality};
use crate::geometry::{iou, BBox};
use crate::seed::{derive_seed, stream, tag, SimRng};
use crate::synth::{save_raster, Background, RasterStore, SynthError};

/// Held-out image ids start here.
pub const HELD_OUT_ID_BASE: u64 = 500_000;
/// Background ids start here.
pub const BACKGROUND_ID_BASE: u64 = 900_000;

const PLACEMENT_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("world needs at least one image")]
    Empty,
    #[error("num_classes must be at least 1")]
    NoClasses,
    #[error("class_weights has {got} entries for {expected} classes")]
    WeightCount { expected: usize, got: usize },
    #[error("class weights must be non-negative with a positive sum")]
    BadWeights,
    #[error("invalid {field} range")]
    BadRange { field: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_images: usize,
    pub num_classes: usize,
    /// Class c has weight `imbalance^c` unless `class_weights` is given.
    pub imbalance: f64,
    pub class_weights: Option<Vec<f64>>,
    pub width: (u32, u32),
    pub height: (u32, u32),
    pub objects_per_image: (usize, usize),
    /// Box side as a fraction of the image side.
    pub box_fraction: (f64, f64),
    /// Objects overlapping an earlier one above this IoU are redrawn.
    pub max_overlap: f64,
    pub num_backgrounds: usize,
    /// Held-out evaluation size as a fraction of `num_images`.
    pub held_out_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_images: 300,
            num_classes: 6,
            imbalance: 0.6,
            class_weights: None,
            width: (240, 400),
            height: (180, 300),
            objects_per_image: (1, 5),
            box_fraction: (0.1, 0.35),
            max_overlap: 0.3,
            num_backgrounds: 20,
            held_out_fraction: 0.2,
        }
    }
}

impl WorldConfig {
    pub fn weights(&self) -> Result<Vec<f64>, WorldError> {
        let w = match &self.class_weights {
            Some(w) if w.len() != self.num_classes => {
                return Err(WorldError::WeightCount {
                    expected: self.num_classes,
                    got: w.len(),
                })
            }
            Some(w) => w.clone(),
            None => (0..self.num_classes).map(|c| self.imbalance.powi(c as i32)).collect(),
        };
        if w.iter().any(|&x| !x.is_finite() || x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(WorldError::BadWeights);
        }
        Ok(w)
    }

    pub fn held_out_size(&self) -> usize {
        ((self.num_images as f64 * self.held_out_fraction).round() as usize).max(1)
    }

    pub fn check(&self) -> Result<(), WorldError> {
        if self.num_images == 0 {
            return Err(WorldError::Empty);
        }
        if self.num_classes == 0 {
            return Err(WorldError::NoClasses);
        }
        self.weights()?;
        let range = |ok: bool, field| {
            if ok {
                Ok(())
            } else {
                Err(WorldError::BadRange { field })
            }
        };
        range(self.width.0 >= 16 && self.width.0 <= self.width.1, "width")?;
        range(self.height.0 >= 16 && self.height.0 <= self.height.1, "height")?;
        range(
            self.objects_per_image.0 >= 1 && self.objects_per_image.0 <= self.objects_per_image.1,
            "objects_per_image",
        )?;
        range(
            self.box_fraction.0 > 0.0 && self.box_fraction.0 <= self.box_fraction.1 && self.box_fraction.1 <= 1.0,
            "box_fraction",
        )?;
        range((0.0..=1.0).contains(&self.held_out_fraction), "held_out_fraction")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub train: Dataset,
    pub held_out: Dataset,
    pub backgrounds: Vec<Background>,
}

/// Generates the training pool, a held-out set from a disjoint stream and
/// the backgrounds. Every image is weakly labeled.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World, WorldError> {
    config.check()?;
    let dist = WeightedIndex::new(config.weights()?).map_err(|_| WorldError::BadWeights)?;
    let images = |n: usize, base: u64, stream_tag: u64| -> Dataset {
        Dataset::from_records((0..n as u64).map(|i| {
            let mut rng = stream(seed, &[stream_tag, i]);
            world_image(ImageId(base + i), config, &dist, &mut rng)
        }))
    };
    let train = images(config.num_images, 0, tag::WORLD);
    let held_out = images(config.held_out_size(), HELD_OUT_ID_BASE, tag::HELD_OUT);
    let backgrounds = (0..config.num_backgrounds as u64)
        .map(|i| {
            let mut rng = stream(seed, &[tag::WORLD, u64::MAX, i]);
            Background {
                id: ImageId(BACKGROUND_ID_BASE + i),
                width: rng.random_range(config.width.0..=config.width.1),
                height: rng.random_range(config.height.0..=config.height.1),
                uri: None,
            }
        })
        .collect();
    Ok(World {
        train,
        held_out,
        backgrounds,
    })
}

fn world_image(id: ImageId, config: &WorldConfig, dist: &WeightedIndex<f64>, rng: &mut SimRng) -> ImageRecord {
    let width = rng.random_range(config.width.0..=config.width.1);
    let height = rng.random_range(config.height.0..=config.height.1);
    let (w, h) = (f64::from(width), f64::from(height));
    let k = rng.random_range(config.objects_per_image.0..=config.objects_per_image.1);
    let mut gt: Vec<LabeledObject> = Vec::with_capacity(k);
    for _ in 0..k {
        let class = ClassId(dist.sample(rng) as u32);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let bw = (w * rng.random_range(config.box_fraction.0..=config.box_fraction.1))
                .round()
                .max(2.0);
            let bh = (h * rng.random_range(config.box_fraction.0..=config.box_fraction.1))
                .round()
                .max(2.0);
            let x = rng.random_range(0.0..=w - bw).round();
            let y = rng.random_range(0.0..=h - bh).round();
            let bbox = BBox::from_xywh(x, y, bw, bh).expect("positive size");
            if gt.iter().all(|o| iou(&o.bbox, &bbox) <= config.max_overlap) {
                gt.push(LabeledObject {
                    bbox,
                    class,
                    quality: Quality::Precise,
                });
                break;
            }
        }
    }
    let weak = crate::dataset::WeakLabel::new(gt.iter().map(|o| o.class));
    ImageRecord {
        id,
        width,
        height,
        uri: None,
        gt,
        label: Label::Weak(weak),
        source: None,
        scene: None,
    }
}

/// Fill colour of a class: spread evenly around the hue circle.
pub fn class_color(class: ClassId) -> Rgb<u8> {
    let hue = (class.0 as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = (1.0 - (hue % 2.0 - 1.0).abs()) * 200.0;
    let (r, g, b) = match hue as u32 {
        0 => (200.0, x, 0.0),
        1 => (x, 200.0, 0.0),
        2 => (0.0, 200.0, x),
        3 => (0.0, x, 200.0),
        4 => (x, 0.0, 200.0),
        _ => (200.0, 0.0, x),
    };
    Rgb([r as u8 + 40, g as u8 + 40, b as u8 + 40])
}

/// Textured gray background, a pure function of (seed, id, size).
pub fn render_background(id: ImageId, width: u32, height: u32, seed: u64) -> RgbImage {
    let mix = derive_seed(seed, &[id.0]);
    let tint = (mix % 40) as u8;
    RgbImage::from_fn(width, height, |x, y| {
        let v = 70 + ((x / 8 + y / 8) % 2) as u8 * 20 + tint;
        let n = (derive_seed(mix, &[u64::from(x), u64::from(y)]) % 9) as u8;
        Rgb([v + n, v + n / 2, v])
    })
}

/// Background texture with each ground-truth object drawn as a filled
/// rectangle in its class colour.
pub fn render_record(record: &ImageRecord, seed: u64) -> RgbImage {
    let mut img = render_background(record.id, record.width, record.height, seed);
    for o in &record.gt {
        let color = class_color(o.class);
        let (x0, y0) = (o.bbox.x_min() as u32, o.bbox.y_min() as u32);
        let (x1, y1) = (o.bbox.x_max().ceil() as u32, o.bbox.y_max().ceil() as u32);
        for y in y0..y1.min(record.height) {
            for x in x0..x1.min(record.width) {
                let edge = x == x0 || y == y0 || x + 1 == x1 || y + 1 == y1;
                img.put_pixel(x, y, if edge { Rgb([20, 20, 20]) } else { color });
            }
        }
    }
    img
}

/// Writes PNG rasters for every record and background under `dir`, sets
/// their uris (relative to `dir`) and returns a store over them.
pub fn write_rasters(world: &mut World, dir: &Path, seed: u64) -> Result<RasterStore, SynthError> {
    let mut store = RasterStore::new(dir);
    for ds in [&mut world.train, &mut world.held_out] {
        for r in ds.records.values_mut() {
            let uri = format!("img_{}.png", r.id);
            save_raster(&render_record(r, seed), &dir.join(&uri))?;
            store.insert(r.id, uri.clone());
            r.uri = Some(uri);
        }
    }
    for bg in &mut world.backgrounds {
        let uri = format!("bg_{}.png", bg.id);
        save_raster(&render_background(bg.id, bg.width, bg.height, seed), &dir.join(&uri))?;
        store.insert(bg.id, uri.clone());
        bg.uri = Some(uri);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate;

    #[test]
    fn world_shapes_and_validity() {
        let cfg = WorldConfig::default();
        let world = generate_world(&cfg, 4).unwrap();
        assert_eq!(world.train.len(), 300);
        assert_eq!(world.held_out.len(), 60);
        assert_eq!(world.backgrounds.len(), 20);
        for r in world.train.records.values().chain(world.held_out.records.values()) {
            assert!(validate(r, Some(6)).is_empty(), "{:?}", validate(r, Some(6)));
            assert!(!r.gt.is_empty());
            assert!(!r.label.is_full());
        }
        assert!(world.held_out.ids().all(|id| world.train.get(id).is_none()));
    }

    #[test]
    fn classes_are_imbalanced() {
        let world = generate_world(&WorldConfig::default(), 1).unwrap();
        let mut counts = [0usize; 6];
        for r in world.train.records.values() {
            for o in &r.gt {
                counts[o.class.index()] += 1;
            }
        }
        assert!(counts[0] > 3 * counts[5], "{counts:?}");
        assert!(counts[5] > 0);
    }

    #[test]
    fn world_is_deterministic() {
        let cfg = WorldConfig {
            num_images: 20,
            ..Default::default()
        };
        assert_eq!(generate_world(&cfg, 9).unwrap(), generate_world(&cfg, 9).unwrap());
        assert_ne!(
            generate_world(&cfg, 9).unwrap().train,
            generate_world(&cfg, 10).unwrap().train
        );
    }

    #[test]
    fn bad_configs_rejected() {
        let bad = WorldConfig {
            class_weights: Some(vec![1.0]),
            ..Default::default()
        };
        assert_eq!(
            generate_world(&bad, 0),
            Err(WorldError::WeightCount { expected: 6, got: 1 })
        );
        let bad = WorldConfig {
            num_images: 0,
            ..Default::default()
        };
        assert_eq!(generate_world(&bad, 0), Err(WorldError::Empty));
        let bad = WorldConfig {
            objects_per_image: (3, 1),
            ..Default::default()
        };
        assert!(matches!(generate_world(&bad, 0), Err(WorldError::BadRange { .. })));
    }

    #[test]
    fn distinct_class_colors() {
        let colors: std::collections::BTreeSet<_> = (0..12).map(|c| class_color(ClassId(c)).0).collect();
        assert_eq!(colors.len(), 12);
    }
}
