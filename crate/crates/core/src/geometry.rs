//! Axis-aligned box arithmetic: IoU, generalized IoU, containment and
//! extreme points.
//!
//! Boxes are continuous rectangles in pixel coordinates. Degenerate boxes
//! are rejected when constructed, so none of the ratios below ever divide
//! by zero.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box ({0}, {1}, {2}, {3}): corners must be finite with x_min < x_max and y_min < y_max")]
    InvalidBox(f64, f64, f64, f64),
    #[error("non-finite point ({0}, {1})")]
    InvalidPoint(f64, f64),
}

/// A point in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Result<Self, GeometryError> {
        if x.is_finite() && y.is_finite() {
            Ok(Self { x, y })
        } else {
            Err(GeometryError::InvalidPoint(x, y))
        }
    }
}

/// Axis-aligned box `(x_min, y_min, x_max, y_max)` with strictly positive
/// area. Serialized as a four-element array.
#[derive(Clone, Copy, PartialEq)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if finite && x_min < x_max && y_min < y_max {
            Ok(Self {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        } else {
            Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max))
        }
    }

    /// Box with top-left corner at `(x, y)` and the given size.
    pub fn from_xywh(x: f64, y: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, x + width, y + height)
    }

    #[inline]
    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    #[inline]
    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    #[inline]
    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    #[inline]
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point {
            x: 0.5 * (self.x_min + self.x_max),
            y: 0.5 * (self.y_min + self.y_max),
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Closed containment: points on the boundary count as inside.
    pub fn contains_point(&self, p: Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    /// True when `other` lies entirely within `self` (boundaries may touch).
    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min && other.y_min >= self.y_min && other.x_max <= self.x_max && other.y_max <= self.y_max
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        Self::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    /// Area of the overlap with `other`, zero when disjoint or touching.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    /// Smallest box enclosing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    /// Per-corner convex combination `weight * other + (1 - weight) * self`.
    ///
    /// Stays valid for `weight` in `[0, 1]` because both parents have ordered
    /// corners.
    pub fn lerp(&self, other: &BBox, weight: f64) -> Result<BBox, GeometryError> {
        let mix = |a: f64, b: f64| weight * b + (1.0 - weight) * a;
        BBox::new(
            mix(self.x_min, other.x_min),
            mix(self.y_min, other.y_min),
            mix(self.x_max, other.x_max),
            mix(self.y_max, other.y_max),
        )
    }
}

impl fmt::Debug for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BBox({}, {}, {}, {})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.corners().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x0, y0, x1, y1] = <[f64; 4]>::deserialize(deserializer)?;
        BBox::new(x0, y0, x1, y1).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    inter / (a.area() + b.area() - inter)
}

/// Generalized IoU: `iou - (area(hull) - area(union)) / area(hull)`, in `(-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    inter / union - (hull - union) / hull
}

/// Fraction of `inner`'s area covered by `outer`.
pub fn containment_ratio(outer: &BBox, inner: &BBox) -> f64 {
    outer.intersection_area(inner) / inner.area()
}

/// The four edge midpoints of a box.
///
/// Without per-pixel object masks these stand in for the extreme points of
/// the object itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremePoints {
    pub top: Point,
    pub bottom: Point,
    pub left: Point,
    pub right: Point,
}

impl ExtremePoints {
    pub fn as_array(&self) -> [Point; 4] {
        [self.top, self.bottom, self.left, self.right]
    }
}

pub fn extreme_points(b: &BBox) -> ExtremePoints {
    let c = b.center();
    ExtremePoints {
        top: Point { x: c.x, y: b.y_min },
        bottom: Point { x: c.x, y: b.y_max },
        left: Point { x: b.x_min, y: c.y },
        right: Point { x: b.x_max, y: c.y },
    }
}
