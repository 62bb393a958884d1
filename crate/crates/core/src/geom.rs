//! Box geometry: IoU, the anchor/proposal delta parameterization, clipping
//! and greedy non-maximum suppression.
//!
//! Boxes are center-parameterized in image pixels. Corner form only appears
//! at file-format boundaries.

use thiserror::Error;

/// Log-ratio bound applied before exponentiation when decoding deltas.
pub const LOG_RATIO_CLAMP: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            cx: 0.5 * (x_min + x_max),
            cy: 0.5 * (y_min + y_max),
            w: x_max - x_min,
            h: y_max - y_min,
        }
    }

    /// From the `(x_min, y_min, width, height)` file representation.
    pub fn from_xywh(x_min: f64, y_min: f64, w: f64, h: f64) -> Self {
        Self::from_corners(x_min, y_min, x_min + w, y_min + h)
    }

    pub fn x_min(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn y_min(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn x_max(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y_max(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min() && x <= self.x_max() && y >= self.y_min() && y <= self.y_max()
    }

    /// True when the box lies entirely within `[0, w] x [0, h]`.
    pub fn inside_image(&self, image_w: f64, image_h: f64) -> bool {
        self.x_min() >= 0.0 && self.y_min() >= 0.0 && self.x_max() <= image_w && self.y_max() <= image_h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x_max().min(other.x_max()) - self.x_min().max(other.x_min());
        let ih = self.y_max().min(other.y_max()) - self.y_min().max(other.y_min());
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

/// Offsets of a box relative to a reference box: `tx, ty` in reference
/// widths/heights, `tw, th` as log size ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// A scored box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self { bbox, score }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Parameterizes `target` relative to `reference`.
pub fn encode_delta(target: &BBox, reference: &BBox) -> Result<BoxDelta, GeomError> {
    if !(target.w > 0.0 && target.h > 0.0) {
        return Err(GeomError::InvalidBox(format!("target size {}x{}", target.w, target.h)));
    }
    if !(reference.w > 0.0 && reference.h > 0.0) {
        return Err(GeomError::InvalidBox(format!("reference size {}x{}", reference.w, reference.h)));
    }
    Ok(BoxDelta {
        tx: (target.cx - reference.cx) / reference.w,
        ty: (target.cy - reference.cy) / reference.h,
        tw: (target.w / reference.w).ln(),
        th: (target.h / reference.h).ln(),
    })
}

/// Inverse of [`encode_delta`]; log ratios are clamped to
/// `[-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP]` before exponentiation.
pub fn decode_delta(delta: &BoxDelta, reference: &BBox) -> BBox {
    let tw = delta.tw.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    let th = delta.th.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    BBox {
        cx: reference.cx + delta.tx * reference.w,
        cy: reference.cy + delta.ty * reference.h,
        w: reference.w * tw.exp(),
        h: reference.h * th.exp(),
    }
}

/// Clamps a box to `[0, image_w] x [0, image_h]`, keeping at least one pixel
/// on each axis. A box entirely outside collapses to a 1-pixel sliver at the
/// nearest border.
pub fn clip_to_image(b: &BBox, image_w: u32, image_h: u32) -> BBox {
    let (iw, ih) = (image_w as f64, image_h as f64);
    let axis = |lo: f64, hi: f64, limit: f64| {
        let lo = lo.clamp(0.0, limit);
        let hi = hi.clamp(0.0, limit);
        if hi - lo >= 1.0 {
            (lo, hi)
        } else if lo + 1.0 <= limit {
            (lo, lo + 1.0)
        } else {
            (limit - 1.0, limit)
        }
    };
    let (x0, x1) = axis(b.x_min(), b.x_max(), iw);
    let (y0, y1) = axis(b.y_min(), b.y_max(), ih);
    BBox::from_corners(x0, y0, x1, y1)
}

/// Descending-score order with ties broken by original index.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Indices kept by greedy NMS, in descending score order. A candidate is
/// suppressed when its IoU with an already kept box is strictly greater than
/// `threshold`.
pub fn nms_indices(dets: &[Detection], threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(dets) {
        if kept.iter().all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    nms_indices(dets, threshold).into_iter().map(|i| dets[i]).collect()
}
