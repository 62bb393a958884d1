use evobox::geom::{clip_to_image, decode_delta, encode_delta, iou, nms, nms_indices};
use evobox::{generate_anchors, BBox, Detection, ModelConfig};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0..150.0f64, -50.0..150.0f64, 0.5..80.0f64, 0.5..80.0f64).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
}

fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((bbox(), 0.0..1.0f64), 0..max).prop_map(|v| v.into_iter().map(|(b, s)| Detection::new(b, s)).collect())
}

/// Greedy NMS spelled out without any shared helper: repeatedly take the
/// best remaining candidate and drop everything that overlaps it too much.
fn brute_nms(dets: &[Detection], threshold: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for k in 1..alive.len() {
            let (a, b) = (alive[k], alive[best]);
            if dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b) {
                best = k;
            }
        }
        let winner = alive.remove(best);
        kept.push(winner);
        alive.retain(|&i| iou(&dets[i].bbox, &dets[winner].bbox) <= threshold);
    }
    kept
}

fn corner_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let ih = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

proptest! {
    #[test]
    fn iou_is_symmetric_bounded_and_closed_form(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((v - corner_iou(&a, &b)).abs() < 1e-12);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_scale_and_translation_invariant(a in bbox(), b in bbox(), k in 0.25..4.0f64, dx in -20.0..20.0f64) {
        let map = |x: &BBox| BBox::from_xywh(x.x_min() * k + dx, x.y_min() * k - dx, x.w * k, x.h * k);
        prop_assert!((iou(&a, &b) - iou(&map(&a), &map(&b))).abs() < 1e-9);
    }

    #[test]
    fn encode_decode_round_trip(t in bbox(), r in bbox()) {
        prop_assume!((t.w / r.w).ln().abs() < 4.0 && (t.h / r.h).ln().abs() < 4.0);
        let back = decode_delta(&encode_delta(&t, &r).unwrap(), &r);
        for (x, y) in [(back.cx, t.cx), (back.cy, t.cy), (back.w, t.w), (back.h, t.h)] {
            prop_assert!((x - y).abs() < 1e-9, "{back:?} vs {t:?}");
        }
    }

    #[test]
    fn clipped_boxes_lie_inside_the_image(b in bbox(), w in 2u32..200, h in 2u32..200) {
        let c = clip_to_image(&b, w, h);
        prop_assert!(c.x_min() >= 0.0 && c.y_min() >= 0.0);
        prop_assert!(c.x_max() <= w as f64 + 1e-9 && c.y_max() <= h as f64 + 1e-9);
        prop_assert!(c.w >= 1.0 - 1e-9 && c.h >= 1.0 - 1e-9);
    }

    #[test]
    fn nms_matches_brute_force(dets in detections(40), threshold in 0.0..1.0f64) {
        prop_assert_eq!(nms_indices(&dets, threshold), brute_nms(&dets, threshold));
    }

    #[test]
    fn nms_output_is_pairwise_separated_and_idempotent(dets in detections(40), threshold in 0.05..0.95f64) {
        let kept = nms(&dets, threshold);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= threshold);
            }
        }
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert_eq!(nms(&kept, threshold), kept);
    }

    #[test]
    fn nms_at_threshold_one_keeps_everything(dets in detections(30)) {
        prop_assert_eq!(nms(&dets, 1.0).len(), dets.len());
    }
}

#[test]
fn paper_anchor_lattice() {
    let spec = ModelConfig::paper().anchor_spec();
    let anchors = generate_anchors(&spec);
    assert_eq!(anchors.len(), 34_560);
    assert_eq!(spec.count(), anchors.len());
    for a in &anchors {
        assert!(a.cx > 0.0 && a.cx < spec.image_w as f64);
        assert!(a.cy > 0.0 && a.cy < spec.image_h as f64);
    }
}

#[test]
fn desk_anchors_share_centers_per_cell() {
    let spec = ModelConfig::desk().anchor_spec();
    let anchors = generate_anchors(&spec);
    let per = spec.anchors_per_cell();
    assert_eq!(anchors.len(), 1728);
    for cell in anchors.chunks(per) {
        assert!(cell.iter().all(|a| a.cx == cell[0].cx && a.cy == cell[0].cy));
        // Every ratio of a scale has the same area.
        for scale in cell.chunks(spec.ratios.len()) {
            let area = scale[0].area();
            assert!(scale.iter().all(|a| (a.area() - area).abs() < 1e-9 * area));
        }
    }
}
