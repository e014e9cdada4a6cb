//! Rectangle arithmetic: IoU, pairwise maxima, clamping boxes to pages.
//!
//! Boxes are continuous rectangles. Boxes that only share an edge have zero
//! intersection area.

use crate::error::{Error, Result};
use crate::types::{BoundingBox, EvidenceRef, PageRef};

/// A box clipped into `[0, width] x [0, height]` of its page.
#[derive(Debug, Clone, PartialEq)]
pub struct CropRegion {
    pub bbox: BoundingBox,
    pub page: PageRef,
}

/// Area of `a ∩ b`, zero when they do not overlap.
pub fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x2().min(b.x2()) - a.x1().max(b.x1());
    let h = a.y2().min(b.y2()) - a.y1().max(b.y1());
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Maximum IoU over unordered pairs; 0 with fewer than two boxes.
pub fn max_pairwise_iou(boxes: &[BoundingBox]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in boxes.iter().enumerate() {
        for b in &boxes[i + 1..] {
            best = best.max(iou(a, b));
        }
    }
    best
}

/// Like [`max_pairwise_iou`] but pairs on different pages contribute 0.
pub fn max_pairwise_iou_refs(refs: &[EvidenceRef]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in refs.iter().enumerate() {
        for b in &refs[i + 1..] {
            if a.page_index == b.page_index {
                best = best.max(iou(&a.bbox, &b.bbox));
            }
        }
    }
    best
}

pub fn clamp_to_page(bbox: &BoundingBox, page: &PageRef) -> Result<CropRegion> {
    clamp_coords_to_page(bbox.coords(), page)
}

/// Clamps raw `[x1, y1, x2, y2]` coordinates, which may be negative or
/// overshoot the page, into a crop region.
pub fn clamp_coords_to_page(c: [f64; 4], page: &PageRef) -> Result<CropRegion> {
    let w = f64::from(page.width);
    let h = f64::from(page.height);
    let clipped = BoundingBox::new(
        c[0].clamp(0.0, w),
        c[1].clamp(0.0, h),
        c[2].clamp(0.0, w),
        c[3].clamp(0.0, h),
    )
    .map_err(|_| Error::EmptyAfterClamp {
        width: page.width,
        height: page.height,
    })?;
    Ok(CropRegion {
        bbox: clipped,
        page: page.clone(),
    })
}
