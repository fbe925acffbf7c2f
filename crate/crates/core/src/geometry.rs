//! Axis-aligned bounding-box arithmetic used for grounding fusion,
//! evaluation, and error-taxonomy classification.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    /// Corner ordering violated or a coordinate is not finite.
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
    },
    EmptyUnion,
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::InvalidBox { x1, y1, x2, y2 } => {
                write!(f, "invalid box [{x1}, {y1}, {x2}, {y2}]")
            }
            GeometryError::EmptyUnion => write!(f, "union_box requires a non-empty list"),
        }
    }
}

impl std::error::Error for GeometryError {}

/// Corner-form axis-aligned box: `x1 <= x2`, `y1 <= y2`.
///
/// Serialized as the 4-array `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 > x2 || y1 > y2 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union. Returns 0 when the union has zero area, so
    /// degenerate boxes are accepted and score 0 against anything.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Closed containment: every coordinate of `inner` lies within `self`.
    pub fn contains(&self, inner: &BBox) -> bool {
        self.x1 <= inner.x1 && self.y1 <= inner.y1 && inner.x2 <= self.x2 && inner.y2 <= self.y2
    }
}

/// Smallest axis-aligned box enclosing every input.
pub fn union_box(boxes: &[BBox]) -> Result<BBox, GeometryError> {
    let first = boxes.first().ok_or(GeometryError::EmptyUnion)?;
    let mut out = *first;
    for b in &boxes[1..] {
        out.x1 = out.x1.min(b.x1);
        out.y1 = out.y1.min(b.y1);
        out.x2 = out.x2.max(b.x2);
        out.y2 = out.y2.max(b.y2);
    }
    Ok(out)
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [self.x1, self.y1, self.x2, self.y2].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(deserializer)?;
        BBox::new(x1, y1, x2, y2).map_err(D::Error::custom)
    }
}
