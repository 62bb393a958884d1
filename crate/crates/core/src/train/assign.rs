use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::data::{in_ignore_region, Annotation};
use crate::geom::{encode_delta, iou, BBox, BoxDelta};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignored,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub label: Label,
    pub matched_gt: Option<usize>,
    pub target: Option<BoxDelta>,
}

impl Assignment {
    pub const NEGATIVE: Self = Self { label: Label::Negative, matched_gt: None, target: None };
    pub const IGNORED: Self = Self { label: Label::Ignored, matched_gt: None, target: None };

    /// Positive match of `reference` to `gts[gt]`, regressing toward it.
    pub fn positive(gt: usize, gts: &[Annotation], reference: &BBox) -> Self {
        Self {
            label: Label::Positive,
            matched_gt: Some(gt),
            target: Some(encode_delta(&gts[gt].bbox, reference).expect("positive-area boxes")),
        }
    }
}

pub const PN_POSITIVE_IOU: f64 = 0.5;
pub const PN_NEGATIVE_IOU: f64 = 0.3;
pub const FTN_POSITIVE_IOU: f64 = 0.45;
pub const FTN_NEGATIVE_BAND: (f64, f64) = (0.1, 0.3);

/// Highest IoU against a non-ignored ground truth (ties: lowest index).
fn best_gt(b: &BBox, gts: &[Annotation]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gts.iter().enumerate().filter(|(_, g)| !g.ignore) {
        let v = iou(b, &g.bbox);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    best
}

/// PN labels: IoU above 0.5 is positive, below 0.3 negative, between
/// ignored. Anchors crossing the image border or centered in an ignore
/// region are ignored. Every vehicle lacking an anchor above 0.5 forces its
/// best eligible anchor (ties: lowest index) positive unless that anchor is
/// already positive.
pub fn assign_pn_targets(anchors: &[BBox], gts: &[Annotation], image_w: u32, image_h: u32) -> Vec<Assignment> {
    let (w, h) = (image_w as f64, image_h as f64);
    let eligible: Vec<bool> = anchors
        .iter()
        .map(|a| a.inside_image(w, h) && !in_ignore_region(gts, a.cx, a.cy))
        .collect();
    let mut out: Vec<Assignment> = anchors
        .iter()
        .zip(&eligible)
        .map(|(a, &ok)| {
            if !ok {
                return Assignment::IGNORED;
            }
            match best_gt(a, gts) {
                Some((j, v)) if v > PN_POSITIVE_IOU => Assignment::positive(j, gts, a),
                Some((_, v)) if v >= PN_NEGATIVE_IOU => Assignment::IGNORED,
                _ => Assignment::NEGATIVE,
            }
        })
        .collect();
    for (j, g) in gts.iter().enumerate().filter(|(_, g)| !g.ignore) {
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in anchors.iter().enumerate().filter(|&(i, _)| eligible[i]) {
            let v = iou(a, &g.bbox);
            if v > best.map_or(0.0, |b| b.1) {
                best = Some((i, v));
            }
        }
        if let Some((i, v)) = best {
            if v <= PN_POSITIVE_IOU && out[i].label != Label::Positive {
                out[i] = Assignment::positive(j, gts, &anchors[i]);
            }
        }
    }
    out
}

/// FTN labels: IoU of at least 0.45 is positive, within `[0.1, 0.3]`
/// negative, anything else (or centered in an ignore region) ignored.
pub fn assign_ftn_targets(proposals: &[BBox], gts: &[Annotation]) -> Vec<Assignment> {
    proposals
        .iter()
        .map(|p| {
            if in_ignore_region(gts, p.cx, p.cy) {
                return Assignment::IGNORED;
            }
            match best_gt(p, gts) {
                Some((j, v)) if v >= FTN_POSITIVE_IOU => Assignment::positive(j, gts, p),
                Some((_, v)) if (FTN_NEGATIVE_BAND.0..=FTN_NEGATIVE_BAND.1).contains(&v) => Assignment::NEGATIVE,
                _ => Assignment::IGNORED,
            }
        })
        .collect()
}

/// Indices of the `ceil(fraction * n)` largest losses, largest first;
/// equal losses keep the lower index first.
pub fn hard_mine(losses: &[f64], fraction: f64) -> Vec<usize> {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction must lie in (0, 1]");
    let k = ((fraction * losses.len() as f64).ceil() as usize).min(losses.len());
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Up to `floor(size * pos_fraction)` positives, then negatives to fill
/// `size`, each drawn without replacement; returned in ascending index
/// order.
pub fn sample_minibatch(assignments: &[Assignment], size: usize, pos_fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let pick = |label: Label| -> Vec<usize> { (0..assignments.len()).filter(|&i| assignments[i].label == label).collect() };
    let (pos, neg) = (pick(Label::Positive), pick(Label::Negative));
    let n_pos = pos.len().min((size as f64 * pos_fraction).floor() as usize);
    let n_neg = neg.len().min(size - n_pos);
    let mut out: Vec<usize> = sample_indices(rng, pos.len(), n_pos).into_iter().map(|i| pos[i]).collect();
    out.extend(sample_indices(rng, neg.len(), n_neg).into_iter().map(|i| neg[i]));
    out.sort_unstable();
    out
}
