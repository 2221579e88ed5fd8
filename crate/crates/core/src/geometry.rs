//! Boxes, feature-grid locations, offset targets and centerness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finest and coarsest pyramid levels used by the detector.
pub const MIN_LEVEL: usize = 3;
pub const MAX_LEVEL: usize = 7;
pub const NUM_LEVELS: usize = MAX_LEVEL - MIN_LEVEL + 1;

/// Stride in image pixels of a pyramid level (`2^level`).
pub fn level_stride(level: usize) -> usize {
    1 << level
}

/// Axis-aligned box in continuous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x0, y0, x1, y1 })
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
            && self.x0 < self.x1
            && self.y0 < self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Inclusive containment test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Clip to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x0: self.x0.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
        };
        b.is_valid().then_some(b)
    }
}

/// Distances from a location to the left, top, right and bottom box sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetVector {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl OffsetVector {
    pub fn max(&self) -> f64 {
        self.l.max(self.t).max(self.r).max(self.b)
    }

    pub fn min(&self) -> f64 {
        self.l.min(self.t).min(self.r).min(self.b)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }

    /// Box obtained by walking the offsets out from `(x, y)`.
    pub fn to_box(&self, x: f64, y: f64) -> BBox {
        BBox { x0: x - self.l, y0: y - self.t, x1: x + self.r, y1: y + self.b }
    }
}

/// Image-plane back-projection of one feature-grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub x: f64,
    pub y: f64,
    pub level: usize,
}

impl Location {
    /// Cell `(row, col)` of `level` sits at `(s*(col+0.5), s*(row+0.5))`.
    pub fn from_cell(level: usize, row: usize, col: usize) -> Self {
        let s = level_stride(level) as f64;
        Self { x: s * (col as f64 + 0.5), y: s * (row as f64 + 0.5), level }
    }
}

/// Every location of every level for a padded input of `height x width`,
/// level-major then row-major.
pub fn pyramid_locations(height: usize, width: usize) -> Vec<Vec<Location>> {
    (MIN_LEVEL..=MAX_LEVEL)
        .map(|level| {
            let (h, w) = level_grid(height, width, level);
            (0..h)
                .flat_map(|r| (0..w).map(move |c| Location::from_cell(level, r, c)))
                .collect()
        })
        .collect()
}

/// Grid size of a level for an input whose sides are multiples of its stride.
pub fn level_grid(height: usize, width: usize, level: usize) -> (usize, usize) {
    let s = level_stride(level);
    (height.div_ceil(s), width.div_ceil(s))
}

pub fn compute_offsets(loc: &Location, bx: &BBox) -> Result<OffsetVector> {
    if !bx.contains(loc.x, loc.y) {
        return Err(Error::LocationOutsideBox { x: loc.x, y: loc.y });
    }
    Ok(OffsetVector { l: loc.x - bx.x0, t: loc.y - bx.y0, r: bx.x1 - loc.x, b: bx.y1 - loc.y })
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`; zero when either pair is
/// all zero.
pub fn centerness(off: &OffsetVector) -> f64 {
    let lr = off.l.max(off.r);
    let tb = off.t.max(off.b);
    if lr <= 0.0 || tb <= 0.0 {
        return 0.0;
    }
    ((off.l.min(off.r) / lr) * (off.t.min(off.b) / tb)).max(0.0).sqrt()
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
