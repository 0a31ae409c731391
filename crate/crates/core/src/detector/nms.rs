use super::DetectorOutput;
use crate::geometry::{iou, Detection};

/// Greedy per-class non-maximum suppression.
///
/// Candidates at or below `score_threshold` are dropped first. The rest are
/// visited by confidence (descending, ties by index), and each kept box
/// removes every later same-class box overlapping it by more than
/// `iou_threshold`.
pub fn greedy_nms(candidates: &[Detection], iou_threshold: f64, score_threshold: f64) -> DetectorOutput {
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].confidence > score_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .confidence
            .total_cmp(&candidates[a].confidence)
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        let keep = &candidates[order[i]];
        kept.push(keep.clone());
        for j in (i + 1)..order.len() {
            if suppressed[j] {
                continue;
            }
            let other = &candidates[order[j]];
            if other.label == keep.label && iou(&keep.bbox, &other.bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    DetectorOutput { detections: kept }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use proptest::prelude::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, label: &str, c: f64) -> Detection {
        Detection::new(BoundingBox::new(x1, y1, x2, y2), label, c)
    }

    #[test]
    fn examples() {
        let out = greedy_nms(
            &[det(0., 0., 10., 10., "person", 0.8), det(0., 0., 10., 10., "person", 0.9)],
            0.5,
            0.5,
        );
        assert_eq!(out.detections, vec![det(0., 0., 10., 10., "person", 0.9)]);

        let out = greedy_nms(
            &[det(0., 0., 10., 10., "person", 0.9), det(20., 20., 30., 30., "person", 0.9)],
            0.5,
            0.5,
        );
        assert_eq!(out.detections.len(), 2);

        assert!(greedy_nms(&[det(0., 0., 1., 1., "person", 0.4)], 0.5, 0.5)
            .detections
            .is_empty());
    }

    #[test]
    fn classes_do_not_suppress_each_other() {
        let out = greedy_nms(
            &[det(0., 0., 10., 10., "person", 0.9), det(0., 0., 10., 10., "car", 0.8)],
            0.5,
            0.5,
        );
        assert_eq!(out.detections.len(), 2);
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        proptest::collection::vec(
            (0.0..40.0f64, 0.0..40.0f64, 1.0..20.0f64, 1.0..20.0f64, 0..2usize, 0.0..1.0f64),
            0..30,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h, l, c)| {
                    Detection::new(BoundingBox::from_xywh(x, y, w, h), ["person", "car"][l], c)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn invariants(dets in arb_dets(), thr in 0.1..0.9f64) {
            let out = greedy_nms(&dets, thr, 0.3);
            for (i, a) in out.detections.iter().enumerate() {
                prop_assert!(a.confidence > 0.3);
                for b in &out.detections[i + 1..] {
                    if a.label == b.label {
                        prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
                    }
                }
            }
            let again = greedy_nms(&out.detections, thr, 0.3);
            prop_assert_eq!(again, out);
        }
    }
}
