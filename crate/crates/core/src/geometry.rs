//! Axis-aligned bounding box math.

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x}, {y}, {w}, {h}): coordinates must be finite and w, h > 0")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
}

/// Box in top-left + size form, pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let finite = x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::InvalidBox { x, y, w, h });
        }
        Ok(Self { x, y, w, h })
    }

    /// Builds a box from its center, aspect ratio (w / h) and height.
    pub fn from_center_aspect(
        cx: f64,
        cy: f64,
        aspect: f64,
        h: f64,
    ) -> Result<Self, GeometryError> {
        let w = aspect * h;
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn aspect(&self) -> f64 {
        self.w / self.h
    }

    /// Uniformly scales every coordinate about the origin.
    pub fn scaled(&self, s: f64) -> Result<Self, GeometryError> {
        Self::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }
}

/// Intersection over union. Touching edges count as no overlap.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.right().min(b.right()) - a.x.max(b.x);
    let ih = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Aspect-ratio similarity `V = 1 - 4/pi^2 * (atan(wa/ha) - atan(wb/hb))^2`.
pub fn ars(a: &BBox, b: &BBox) -> f64 {
    let d = (a.w / a.h).atan() - (b.w / b.h).atan();
    (1.0 - 4.0 / (PI * PI) * d * d).clamp(0.0, 1.0)
}

/// IoU-adaptive blend `V / ((1 - IoU) + V)`.
///
/// The degenerate `iou = 1, v = 0` case is defined as 0 so that it fails any
/// positive threshold.
pub fn blended_alpha(iou: f64, v: f64) -> Result<f64, GeometryError> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(GeometryError::OutOfRange {
            name: "iou",
            value: iou,
        });
    }
    if !(0.0..=1.0).contains(&v) {
        return Err(GeometryError::OutOfRange {
            name: "v",
            value: v,
        });
    }
    let denom = (1.0 - iou) + v;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(v / denom)
}
