//! Anchors, box encoding/decoding and target assignment.

use crate::boxes::{BBox, Detection, GroundTruthBox};
use crate::detector::level_stride;
use crate::error::{shape_err, Result};
use crate::tensor::sigmoid;

/// Bound on the log-scale size offsets.
pub const SIZE_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub width: f64,
    pub height: f64,
    pub level: usize,
}

impl Anchor {
    /// One square anchor of side `4·stride` per level.
    pub fn defaults() -> Vec<Anchor> {
        [3, 4, 5]
            .iter()
            .map(|&level| {
                let side = 4.0 * level_stride(level) as f64;
                Anchor { width: side, height: side, level }
            })
            .collect()
    }
}

/// Grid size of one prediction level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShape {
    pub level: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LevelShape {
    pub fn stride(&self) -> usize {
        level_stride(self.level)
    }
}

/// Level grids for an image of the given size.
pub fn level_shapes(levels: &[usize], height: usize, width: usize) -> Vec<LevelShape> {
    levels
        .iter()
        .map(|&level| LevelShape { level, rows: height / level_stride(level), cols: width / level_stride(level) })
        .collect()
}

/// One positive location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub level: usize,
    /// Index among the anchors of this level.
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
    pub gt_index: usize,
    pub class_id: usize,
    pub bbox: BBox,
    pub shape_iou: f64,
}

/// IoU of two boxes sharing a center.
pub fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

fn cell_of(center: f64, stride: usize, cells: usize) -> usize {
    ((center / stride as f64).floor().max(0.0) as usize).min(cells.saturating_sub(1))
}

/// Match each ground truth to its best-shaped anchor at the cell containing
/// its center. Ties go to the lower level, then the lower anchor index. When
/// two boxes claim the same location the higher shape IoU wins, then the
/// lower box index; the loser stays unassigned.
pub fn assign_targets(
    gts: &[GroundTruthBox],
    anchors: &[Anchor],
    levels: &[LevelShape],
    image_height: usize,
    image_width: usize,
) -> Vec<Assignment> {
    let mut chosen: Vec<Assignment> = Vec::new();
    for (gi, gt) in gts.iter().enumerate() {
        let b = gt.to_pixels(image_width, image_height);
        let (cx, cy) = b.center();
        let mut best: Option<Assignment> = None;
        for ls in levels {
            let level_anchors = anchors.iter().filter(|a| a.level == ls.level);
            for (ai, anc) in level_anchors.enumerate() {
                let s = shape_iou(b.width(), b.height(), anc.width, anc.height);
                if best.as_ref().map_or(true, |x| s > x.shape_iou) {
                    best = Some(Assignment {
                        level: ls.level,
                        anchor: ai,
                        row: cell_of(cy, ls.stride(), ls.rows),
                        col: cell_of(cx, ls.stride(), ls.cols),
                        gt_index: gi,
                        class_id: gt.class_id,
                        bbox: b,
                        shape_iou: s,
                    });
                }
            }
        }
        let Some(cand) = best else { continue };
        let slot = chosen
            .iter()
            .position(|c| (c.level, c.anchor, c.row, c.col) == (cand.level, cand.anchor, cand.row, cand.col));
        match slot {
            Some(i) if cand.shape_iou > chosen[i].shape_iou => chosen[i] = cand,
            Some(_) => {}
            None => chosen.push(cand),
        }
    }
    chosen.sort_by_key(|c| c.gt_index);
    chosen
}

/// Regression targets `(t_x, t_y, t_w, t_h)` for a box at a location.
/// Centers exactly on a cell edge are nudged inside so the logit is finite.
pub fn encode(b: &BBox, anchor: &Anchor, row: usize, col: usize) -> [f64; 4] {
    let s = level_stride(anchor.level) as f64;
    let (cx, cy) = b.center();
    let logit = |p: f64| {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        (p / (1.0 - p)).ln()
    };
    [
        logit(cx / s - col as f64),
        logit(cy / s - row as f64),
        (b.width() / anchor.width).ln(),
        (b.height() / anchor.height).ln(),
    ]
}

/// Box for raw offsets at a location, before clipping.
pub fn decode_box(t: [f64; 4], anchor: &Anchor, row: usize, col: usize) -> BBox {
    let s = level_stride(anchor.level) as f64;
    let cx = (col as f64 + sigmoid(t[0])) * s;
    let cy = (row as f64 + sigmoid(t[1])) * s;
    let w = anchor.width * t[2].clamp(-SIZE_CLAMP, SIZE_CLAMP).exp();
    let h = anchor.height * t[3].clamp(-SIZE_CLAMP, SIZE_CLAMP).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Detections from one image's raw maps. `raw` holds `(level, values)` with
/// values laid out `[A·(5+C), rows, cols]`. Scores below `conf_threshold`
/// are dropped.
pub fn decode(
    raw: &[(usize, &[f64])],
    anchors: &[Anchor],
    num_classes: usize,
    image_height: usize,
    image_width: usize,
    conf_threshold: f64,
) -> Result<Vec<Detection>> {
    let per = 5 + num_classes;
    let mut out = Vec::new();
    for &(level, values) in raw {
        let level_anchors: Vec<&Anchor> = anchors.iter().filter(|a| a.level == level).collect();
        let s = level_stride(level);
        let (rows, cols) = (image_height / s, image_width / s);
        if values.len() != level_anchors.len() * per * rows * cols {
            return Err(shape_err!("level {level} map has {} values, expected {}", values.len(), level_anchors.len() * per * rows * cols));
        }
        let plane = rows * cols;
        for (ai, anc) in level_anchors.iter().enumerate() {
            let at = |k: usize, cell: usize| values[(ai * per + k) * plane + cell];
            for row in 0..rows {
                for col in 0..cols {
                    let cell = row * cols + col;
                    let mut best = 0;
                    for c in 1..num_classes {
                        if at(5 + c, cell) > at(5 + best, cell) {
                            best = c;
                        }
                    }
                    let score = sigmoid(at(4, cell)) * sigmoid(at(5 + best, cell));
                    if score < conf_threshold {
                        continue;
                    }
                    let t = [at(0, cell), at(1, cell), at(2, cell), at(3, cell)];
                    let bbox = decode_box(t, anc, row, col).clip(image_width as f64, image_height as f64);
                    if bbox.is_valid() {
                        out.push(Detection { class_id: best, score, bbox });
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_offsets_decode_to_cell_center_anchor() {
        let anc = Anchor { width: 32.0, height: 32.0, level: 3 };
        let b = decode_box([0.0; 4], &anc, 0, 0);
        assert_eq!(b.center(), (4.0, 4.0));
        assert_eq!((b.width(), b.height()), (32.0, 32.0));
        let b = decode_box([0.0, 0.0, 2f64.ln(), 0.0], &anc, 0, 0);
        assert!((b.width() - 64.0).abs() < 1e-12);
    }

    #[test]
    fn zero_map_scores_a_quarter() {
        let anchors = vec![Anchor { width: 32.0, height: 32.0, level: 3 }];
        let values = vec![0.0; 6 * 4 * 4];
        let dets = decode(&[(3, &values)], &anchors, 1, 32, 32, 0.25).unwrap();
        assert_eq!(dets.len(), 16);
        assert!(dets.iter().all(|d| d.score == 0.25));
        assert!(decode(&[(3, &values)], &anchors, 1, 32, 32, 0.26).unwrap().is_empty());
    }

    #[test]
    fn encode_decode_round_trip() {
        let anc = Anchor { width: 16.0, height: 24.0, level: 4 };
        let b = BBox::new(20.0, 35.0, 41.0, 60.0);
        let (cx, cy) = b.center();
        let (row, col) = ((cy / 16.0) as usize, (cx / 16.0) as usize);
        let back = decode_box(encode(&b, &anc, row, col), &anc, row, col);
        for (x, y) in [(back.x_min, b.x_min), (back.y_min, b.y_min), (back.x_max, b.x_max), (back.y_max, b.y_max)] {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_anchor_match_is_the_positive() {
        let anchors = Anchor::defaults();
        let levels = level_shapes(&[3, 4, 5], 128, 128);
        // 64x64 box centered in a level-4 cell matches the level-4 anchor exactly.
        let gt = GroundTruthBox { class_id: 0, cx: 40.0 / 128.0, cy: 56.0 / 128.0, w: 0.5, h: 0.5 };
        let asg = assign_targets(&[gt], &anchors, &levels, 128, 128);
        assert_eq!(asg.len(), 1);
        assert_eq!((asg[0].level, asg[0].anchor, asg[0].row, asg[0].col), (4, 0, 3, 2));
        assert_eq!(asg[0].shape_iou, 1.0);
        assert!(assign_targets(&[], &anchors, &levels, 128, 128).is_empty());
    }

    #[test]
    fn collisions_keep_better_match() {
        let anchors = vec![Anchor { width: 8.0, height: 8.0, level: 3 }];
        let levels = level_shapes(&[3], 32, 32);
        let g0 = GroundTruthBox { class_id: 0, cx: 0.1, cy: 0.1, w: 0.5, h: 0.5 };
        let g1 = GroundTruthBox { class_id: 1, cx: 0.12, cy: 0.12, w: 0.25, h: 0.25 };
        let asg = assign_targets(&[g0, g1], &anchors, &levels, 32, 32);
        assert_eq!(asg.len(), 1);
        assert_eq!(asg[0].gt_index, 1);
        let asg = assign_targets(&[g1, g1], &anchors, &levels, 32, 32);
        assert_eq!(asg.len(), 1);
        assert_eq!(asg[0].gt_index, 0);
    }
}
