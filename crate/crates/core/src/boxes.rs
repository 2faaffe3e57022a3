//! Axis-aligned boxes and pedestrian annotations.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Box in image pixels; `x2 > x1` and `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<Self> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite()) && x2 > x1 && y2 > y1;
        ok.then_some(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union, in `[0, 1]`.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }
}

/// Occlusion buckets: none, light (<30%), moderate (30–60%), heavy (≥60%).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Occlusion {
    #[serde(rename = "NO")]
    None,
    #[serde(rename = "LO")]
    Light,
    #[serde(rename = "MO")]
    Moderate,
    #[serde(rename = "HO")]
    Heavy,
}

impl Occlusion {
    pub const ALL: [Occlusion; 4] = [
        Occlusion::None,
        Occlusion::Light,
        Occlusion::Moderate,
        Occlusion::Heavy,
    ];

    /// Bucket for the occluded fraction of an object's area.
    pub fn from_fraction(f: f64) -> Self {
        if f <= 0.0 {
            Occlusion::None
        } else if f < 0.3 {
            Occlusion::Light
        } else if f < 0.6 {
            Occlusion::Moderate
        } else {
            Occlusion::Heavy
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Occlusion::None => "NO",
            Occlusion::Light => "LO",
            Occlusion::Moderate => "MO",
            Occlusion::Heavy => "HO",
        }
    }
}

impl fmt::Display for Occlusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Occlusion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Occlusion::ALL
            .into_iter()
            .find(|o| o.label() == s)
            .ok_or_else(|| format!("unknown occlusion label {s:?}"))
    }
}

/// Annotated ground-truth object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub category: String,
    pub occlusion: Occlusion,
}

impl GtBox {
    pub fn pedestrian(bbox: BBox, occlusion: Occlusion) -> Self {
        Self {
            bbox,
            category: "person".to_string(),
            occlusion,
        }
    }

    pub fn height(&self) -> f64 {
        self.bbox.height()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((a.iou(&b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        // touching edges share no area
        assert_eq!(a.iou(&b(2.0, 0.0, 3.0, 2.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_none());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_none());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_none());
    }

    #[test]
    fn occlusion_buckets() {
        assert_eq!(Occlusion::from_fraction(0.0), Occlusion::None);
        assert_eq!(Occlusion::from_fraction(0.1), Occlusion::Light);
        assert_eq!(Occlusion::from_fraction(0.3), Occlusion::Moderate);
        assert_eq!(Occlusion::from_fraction(0.4), Occlusion::Moderate);
        assert_eq!(Occlusion::from_fraction(0.6), Occlusion::Heavy);
        assert_eq!(Occlusion::from_fraction(0.95), Occlusion::Heavy);
        for o in Occlusion::ALL {
            assert_eq!(o.label().parse::<Occlusion>().unwrap(), o);
        }
        assert!("XO".parse::<Occlusion>().is_err());
    }
}
