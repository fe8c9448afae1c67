//! Detection loss: objectness and class cross-entropy plus an IoU box term.

use crate::detector::head::{Assignment, SIZE_CLAMP};
use crate::detector::{level_stride, DetectorConfig};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub box_loss: f64,
}

/// Loss nodes on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub box_loss: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        LossBreakdown {
            total: tape.scalar(self.total).as_f64(),
            cls: tape.scalar(self.cls).as_f64(),
            box_loss: tape.scalar(self.box_loss).as_f64(),
        }
    }
}

/// `L = L_cls + L_box` over a batch.
///
/// `L_cls` is the objectness cross-entropy averaged over every location and
/// anchor of the batch, plus the class cross-entropy summed
/// over positives and their classes, divided by `max(1, #positives)`.
/// `L_box` is `Σ (1 − IoU(decoded, target))` over positives divided by
/// `max(1, #positives)`.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    raw: &[(usize, Var)],
    assignments: &[Vec<Assignment>],
    cfg: &DetectorConfig,
) -> Result<LossVars> {
    let per = cfg.outputs_per_anchor();
    let nc = cfg.num_classes;
    let batch = assignments.len();
    let positives: usize = assignments.iter().map(Vec::len).sum();
    let pos_norm = T::lit(1.0 / positives.max(1) as f64);

    let mut obj_terms = Vec::new();
    let mut locations = 0usize;
    let mut cls_terms = Vec::new();
    let mut ious = Vec::new();
    for &(level, map) in raw {
        let s = tape.shape(map).to_vec();
        let na = cfg.anchors_at(level).len();
        if s.len() != 4 || s[0] != batch || s[1] != na * per {
            return Err(shape_err!("level {level} map {s:?} does not match batch {batch} with {na} anchors"));
        }
        let plane = s[2] * s[3];
        locations += batch * na * plane;
        let idx = |n: usize, a: usize, k: usize, cell: usize| ((n * na + a) * per + k) * plane + cell;

        let mut obj_idx = Vec::with_capacity(batch * na * plane);
        let mut obj_target = vec![T::zero(); batch * na * plane];
        for n in 0..batch {
            for a in 0..na {
                for cell in 0..plane {
                    obj_idx.push(idx(n, a, 4, cell));
                }
            }
        }
        let level_pos: Vec<(usize, &Assignment)> = assignments
            .iter()
            .enumerate()
            .flat_map(|(n, v)| v.iter().filter(|p| p.level == level).map(move |p| (n, p)))
            .collect();
        for &(n, p) in &level_pos {
            if p.row >= s[2] || p.col >= s[3] || p.anchor >= na {
                return Err(shape_err!("assignment {p:?} outside level {level} grid {}x{}", s[2], s[3]));
            }
            obj_target[(n * na + p.anchor) * plane + p.row * s[3] + p.col] = T::one();
        }
        let logits = tape.gather(map, &obj_idx)?;
        let bce = tape.bce_with_logits(logits, &obj_target)?;
        obj_terms.push(tape.sum(bce));

        if level_pos.is_empty() {
            continue;
        }
        let cell = |p: &Assignment| p.row * s[3] + p.col;
        let mut cls_idx = Vec::new();
        let mut cls_target = Vec::new();
        for &(n, p) in &level_pos {
            for c in 0..nc {
                cls_idx.push(idx(n, p.anchor, 5 + c, cell(p)));
                cls_target.push(if c == p.class_id { T::one() } else { T::zero() });
            }
        }
        let cl = tape.gather(map, &cls_idx)?;
        let cb = tape.bce_with_logits(cl, &cls_target)?;
        cls_terms.push(tape.sum(cb));

        // Decoded positive boxes, one vector per coordinate.
        let anchors = cfg.anchors_at(level);
        let stride = T::lit(level_stride(level) as f64);
        let k = level_pos.len();
        let pick = |tape: &mut Tape<T>, ch: usize| {
            let ix: Vec<usize> = level_pos.iter().map(|&(n, p)| idx(n, p.anchor, ch, cell(p))).collect();
            tape.gather(map, &ix)
        };
        let constant = |tape: &mut Tape<T>, f: &dyn Fn(&Assignment) -> f64| {
            tape.constant(&[k], level_pos.iter().map(|(_, p)| T::lit(f(p))).collect())
        };
        let tx = pick(tape, 0)?;
        let ty = pick(tape, 1)?;
        let tw = pick(tape, 2)?;
        let th = pick(tape, 3)?;
        let col = constant(tape, &|p| p.col as f64)?;
        let row = constant(tape, &|p| p.row as f64)?;
        let aw = constant(tape, &|p| anchors[p.anchor].width)?;
        let ah = constant(tape, &|p| anchors[p.anchor].height)?;
        let sx = tape.sigmoid(tx);
        let sx = tape.add(sx, col)?;
        let cx = tape.scale(sx, stride);
        let sy = tape.sigmoid(ty);
        let sy = tape.add(sy, row)?;
        let cy = tape.scale(sy, stride);
        let clamp = T::lit(SIZE_CLAMP);
        let tw = tape.clamp(tw, -clamp, clamp);
        let ew = tape.exp(tw);
        let w = tape.mul(ew, aw)?;
        let th = tape.clamp(th, -clamp, clamp);
        let eh = tape.exp(th);
        let h = tape.mul(eh, ah)?;

        let half = T::lit(0.5);
        let hw = tape.scale(w, half);
        let hh = tape.scale(h, half);
        let x1 = tape.sub(cx, hw)?;
        let x2 = tape.add(cx, hw)?;
        let y1 = tape.sub(cy, hh)?;
        let y2 = tape.add(cy, hh)?;
        let gx1 = constant(tape, &|p| p.bbox.x_min)?;
        let gx2 = constant(tape, &|p| p.bbox.x_max)?;
        let gy1 = constant(tape, &|p| p.bbox.y_min)?;
        let gy2 = constant(tape, &|p| p.bbox.y_max)?;
        let garea = constant(tape, &|p| p.bbox.area())?;

        let ix2 = tape.minimum(x2, gx2)?;
        let ix1 = tape.maximum(x1, gx1)?;
        let iw = tape.sub(ix2, ix1)?;
        let iw = tape.relu(iw);
        let iy2 = tape.minimum(y2, gy2)?;
        let iy1 = tape.maximum(y1, gy1)?;
        let ih = tape.sub(iy2, iy1)?;
        let ih = tape.relu(ih);
        let inter = tape.mul(iw, ih)?;
        let area = tape.mul(w, h)?;
        let union = tape.add(area, garea)?;
        let union = tape.sub(union, inter)?;
        let iou = tape.div(inter, union)?;
        ious.push(tape.sum(iou));
    }

    let zero = tape.constant(&[1], vec![T::zero()])?;
    let sum_all = |tape: &mut Tape<T>, terms: &[Var]| -> Result<Var> {
        let mut acc = zero;
        for &t in terms {
            acc = tape.add(acc, t)?;
        }
        Ok(acc)
    };
    let obj = sum_all(tape, &obj_terms)?;
    let obj = tape.scale(obj, T::lit(1.0 / locations.max(1) as f64));
    let cls_pos = sum_all(tape, &cls_terms)?;
    let cls_pos = tape.scale(cls_pos, pos_norm);
    let cls = tape.add(obj, cls_pos)?;
    let iou_sum = sum_all(tape, &ious)?;
    // (P − Σ IoU) / max(1, P)
    let neg = tape.scale(iou_sum, -pos_norm);
    let box_loss = tape.add_scalar(neg, T::lit(positives as f64) * pos_norm);
    let total = tape.add(cls, box_loss)?;
    Ok(LossVars { total, cls, box_loss })
}
