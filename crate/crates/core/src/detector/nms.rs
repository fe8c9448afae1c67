//! Per-class greedy non-maximum suppression.

use std::cmp::Ordering;

use crate::boxes::{iou, Detection};

pub const DEFAULT_NMS_IOU: f64 = 0.6;

/// Score descending, then `x_min`, then `y_min` ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
}

/// Keep, per class, the best-ordered box and drop any same-class box whose
/// IoU with an already kept box exceeds `iou_threshold`. Output is sorted by
/// class, then in keep order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted: Vec<Detection> = dets.to_vec();
    sorted.sort_by(|a, b| a.class_id.cmp(&b.class_id).then(detection_order(a, b)));
    let mut kept: Vec<Detection> = Vec::new();
    let mut class_start = 0;
    for d in sorted {
        if kept.last().map_or(true, |k| k.class_id != d.class_id) {
            class_start = kept.len();
        }
        if kept[class_start..].iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;

    fn det(class_id: usize, score: f64, x: f64) -> Detection {
        Detection { class_id, score, bbox: BBox::new(x, 0.0, x + 10.0, 10.0) }
    }

    #[test]
    fn identical_boxes_keep_best() {
        let out = nms(&[det(0, 0.8, 0.0), det(0, 0.9, 0.0)], DEFAULT_NMS_IOU);
        assert_eq!(out, vec![det(0, 0.9, 0.0)]);
    }

    #[test]
    fn disjoint_and_cross_class_survive() {
        let d = [det(0, 0.5, 0.0), det(0, 0.6, 20.0), det(1, 0.7, 0.0)];
        assert_eq!(nms(&d, DEFAULT_NMS_IOU).len(), 3);
    }

    #[test]
    fn threshold_is_strict() {
        // intersection 6, union 10
        let a = Detection { class_id: 0, score: 0.9, bbox: BBox::new(0.0, 0.0, 8.0, 1.0) };
        let b = Detection { class_id: 0, score: 0.8, bbox: BBox::new(2.0, 0.0, 10.0, 1.0) };
        assert_eq!(iou(&a.bbox, &b.bbox), 0.6);
        assert_eq!(nms(&[a, b], 0.6).len(), 2);
        assert_eq!(nms(&[a, b], 0.59).len(), 1);
    }
}
