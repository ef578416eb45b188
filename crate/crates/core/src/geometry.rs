//! Box geometry: rescaling boxes onto the feature grid and the definite-background mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::MAX_CLASSES;

/// Class-labeled box with half-open pixel extents `[xmin, xmax) × [ymin, ymax)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    #[serde(rename = "class")]
    pub class_id: u8,
    pub xmin: usize,
    pub ymin: usize,
    pub xmax: usize,
    pub ymax: usize,
}

impl BBox {
    pub fn new(class_id: u8, xmin: usize, ymin: usize, xmax: usize, ymax: usize) -> Self {
        Self {
            class_id,
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.xmin && x < self.xmax && y >= self.ymin && y < self.ymax
    }

    pub fn area(&self) -> usize {
        self.xmax.saturating_sub(self.xmin) * self.ymax.saturating_sub(self.ymin)
    }

    /// Row-major flat indices of the covered pixels on a grid of width `width`.
    pub fn pixels(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.ymin..self.ymax).flat_map(move |y| (self.xmin..self.xmax).map(move |x| y * width + x))
    }
}

/// Boxes of one image together with the frame they are expressed in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxSet {
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BBox>,
}

impl BoxSet {
    pub fn new(width: usize, height: usize, boxes: Vec<BBox>) -> Self {
        Self {
            width,
            height,
            boxes,
        }
    }

    /// Check class ids and ordering, then clamp every box into the frame.
    pub fn validated(mut self, num_classes: Option<usize>) -> Result<Self> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("box frame must have positive size".into()));
        }
        let max_class = num_classes.unwrap_or(MAX_CLASSES);
        for (i, b) in self.boxes.iter_mut().enumerate() {
            if b.class_id == 0 || usize::from(b.class_id) > max_class {
                return Err(Error::Invalid(format!(
                    "box {i}: class {} outside 1..={max_class}",
                    b.class_id
                )));
            }
            b.xmax = b.xmax.min(self.width);
            b.ymax = b.ymax.min(self.height);
            if b.xmin >= b.xmax || b.ymin >= b.ymax {
                return Err(Error::Invalid(format!(
                    "box {i}: empty extent ({}, {}, {}, {}) after clamping",
                    b.xmin, b.ymin, b.xmax, b.ymax
                )));
            }
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Per-pixel flag: covered by at least one box.
    pub fn coverage(&self) -> Vec<bool> {
        let mut inside = vec![false; self.width * self.height];
        for b in &self.boxes {
            for p in b.pixels(self.width) {
                inside[p] = true;
            }
        }
        inside
    }

    /// Per-pixel flag: covered by a box of class `class_id`.
    pub fn class_coverage(&self, class_id: u8) -> Vec<bool> {
        let mut inside = vec![false; self.width * self.height];
        for b in self.boxes.iter().filter(|b| b.class_id == class_id) {
            for p in b.pixels(self.width) {
                inside[p] = true;
            }
        }
        inside
    }
}

/// `round(coord · to / from)` in exact integer arithmetic (half rounds up).
fn scale_coord(coord: usize, to: usize, from: usize) -> usize {
    (2 * coord * to + from) / (2 * from)
}

/// Map boxes from the image frame onto an `feat_h × feat_w` grid by nearest-neighbor
/// scaling. Boxes that collapse are grown to one cell at their rounded min corner.
pub fn resize_boxes(boxes: &BoxSet, feat_h: usize, feat_w: usize) -> BoxSet {
    assert!(feat_h >= 1 && feat_w >= 1, "feature grid must be non-empty");
    let resized = boxes
        .boxes
        .iter()
        .map(|b| {
            let (xmin, xmax) = resize_span(b.xmin, b.xmax, feat_w, boxes.width);
            let (ymin, ymax) = resize_span(b.ymin, b.ymax, feat_h, boxes.height);
            BBox::new(b.class_id, xmin, ymin, xmax, ymax)
        })
        .collect();
    BoxSet::new(feat_w, feat_h, resized)
}

fn resize_span(lo: usize, hi: usize, to: usize, from: usize) -> (usize, usize) {
    let from = from.max(1);
    let mut lo = scale_coord(lo, to, from).min(to);
    let mut hi = scale_coord(hi, to, from).min(to);
    if hi <= lo {
        hi = lo + 1;
    }
    if hi > to {
        hi = to;
        lo = to - 1;
    }
    (lo, hi)
}

/// Definite-background mask: `true` where no box covers the pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackgroundMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BackgroundMask {
    pub fn is_background(&self, p: usize) -> bool {
        self.data[p]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

/// Build the mask from boxes already expressed on the `height × width` grid.
pub fn build_background_mask(resized: &BoxSet, height: usize, width: usize) -> BackgroundMask {
    let mut data = vec![true; height * width];
    for b in &resized.boxes {
        for y in b.ymin..b.ymax.min(height) {
            for x in b.xmin..b.xmax.min(width) {
                data[y * width + x] = false;
            }
        }
    }
    BackgroundMask {
        height,
        width,
        data,
    }
}
