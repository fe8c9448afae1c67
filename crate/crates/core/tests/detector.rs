//! Head decoding, target assignment, loss and suppression against
//! straight-line references, plus backbone identities and the overfit check.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2adet::boxes::{iou, BBox, Detection, GroundTruthBox};
use s2adet::detector::nms::DEFAULT_NMS_IOU;
use s2adet::detector::*;
use s2adet::tensor::{Tape, Tensor};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn anchors() -> Vec<Anchor> {
    vec![
        Anchor { width: 12.0, height: 10.0, level: 3 },
        Anchor { width: 20.0, height: 24.0, level: 3 },
        Anchor { width: 30.0, height: 30.0, level: 4 },
    ]
}

fn random_gt(rng: &mut impl Rng, classes: usize) -> GroundTruthBox {
    GroundTruthBox {
        class_id: rng.gen_range(0..classes),
        cx: rng.gen_range(0.05..0.95),
        cy: rng.gen_range(0.05..0.95),
        w: rng.gen_range(0.05..0.6),
        h: rng.gen_range(0.05..0.6),
    }
}

#[test]
fn decode_matches_per_cell_oracle() {
    let (h, w, nc) = (64usize, 32usize, 3usize);
    let anchors = anchors();
    let per = 5 + nc;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l3: Vec<f64> = (0..2 * per * 8 * 4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let l4: Vec<f64> = (0..per * 4 * 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let conf = 0.1;
        let got = decode(&[(3, &l3), (4, &l4)], &anchors, nc, h, w, conf).unwrap();

        let mut want = Vec::new();
        for (level, vals) in [(3usize, &l3), (4, &l4)] {
            let s = 1usize << level;
            let (rows, cols) = (h / s, w / s);
            let level_anchors: Vec<&Anchor> = anchors.iter().filter(|a| a.level == level).collect();
            for (a, anc) in level_anchors.iter().enumerate() {
                for i in 0..rows {
                    for j in 0..cols {
                        let v = |k: usize| vals[((a * per + k) * rows + i) * cols + j];
                        let best = (0..nc).fold(0, |b, c| if v(5 + c) > v(5 + b) { c } else { b });
                        let score = sig(v(4)) * sig(v(5 + best));
                        if score < conf {
                            continue;
                        }
                        let cx = (j as f64 + sig(v(0))) * s as f64;
                        let cy = (i as f64 + sig(v(1))) * s as f64;
                        let bw = anc.width * v(2).clamp(-4.0, 4.0).exp();
                        let bh = anc.height * v(3).clamp(-4.0, 4.0).exp();
                        let b = BBox::new(
                            (cx - bw / 2.0).max(0.0),
                            (cy - bh / 2.0).max(0.0),
                            (cx + bw / 2.0).min(w as f64),
                            (cy + bh / 2.0).min(h as f64),
                        );
                        if b.x_max > b.x_min && b.y_max > b.y_min {
                            want.push(Detection { class_id: best, score, bbox: b });
                        }
                    }
                }
            }
        }
        assert_eq!(got.len(), want.len(), "seed {seed}");
        for (g, e) in got.iter().zip(&want) {
            assert_eq!(g.class_id, e.class_id);
            assert!((g.score - e.score).abs() < 1e-12);
            for (x, y) in [(g.bbox.x_min, e.bbox.x_min), (g.bbox.y_min, e.bbox.y_min), (g.bbox.x_max, e.bbox.x_max), (g.bbox.y_max, e.bbox.y_max)] {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

/// Brute force: every (level, anchor) for each box, then resolve shared
/// locations by shape IoU and box index.
fn assign_oracle(gts: &[GroundTruthBox], anchors: &[Anchor], h: usize, w: usize) -> Vec<(usize, usize, usize, usize, usize)> {
    let mut claims = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        let (bw, bh) = (g.w * w as f64, g.h * h as f64);
        let mut best: Option<(f64, usize, usize)> = None;
        for level in [3usize, 4, 5] {
            for (ai, a) in anchors.iter().filter(|a| a.level == level).enumerate() {
                let inter = bw.min(a.width) * bh.min(a.height);
                let s = inter / (bw * bh + a.width * a.height - inter);
                if best.map_or(true, |(b, _, _)| s > b) {
                    best = Some((s, level, ai));
                }
            }
        }
        let Some((s, level, ai)) = best else { continue };
        let stride = (1usize << level) as f64;
        let row = ((g.cy * h as f64 / stride) as usize).min(h / (1 << level) - 1);
        let col = ((g.cx * w as f64 / stride) as usize).min(w / (1 << level) - 1);
        claims.push((s, gi, (level, ai, row, col)));
    }
    let mut out: Vec<(usize, usize, usize, usize, usize)> = claims
        .iter()
        .filter(|(s, gi, key)| {
            claims.iter().all(|(s2, g2, k2)| k2 != key || g2 == gi || *s2 < *s || (*s2 == *s && g2 > gi))
        })
        .map(|&(_, gi, (l, a, r, c))| (gi, l, a, r, c))
        .collect();
    out.sort();
    out
}

#[test]
fn assignment_matches_brute_force() {
    let (h, w) = (64, 96);
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut anchors = anchors();
        if seed % 2 == 0 {
            anchors.push(Anchor { width: 64.0, height: 40.0, level: 5 });
        }
        let gts: Vec<GroundTruthBox> = (0..rng.gen_range(0..8)).map(|_| random_gt(&mut rng, 2)).collect();
        let levels = level_shapes(&[3, 4, 5], h, w);
        let got: Vec<_> = assign_targets(&gts, &anchors, &levels, h, w)
            .iter()
            .map(|a| (a.gt_index, a.level, a.anchor, a.row, a.col))
            .collect();
        assert_eq!(got, assign_oracle(&gts, &anchors, h, w), "seed {seed}");
    }
}

fn bce(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Straight-line loss for one batch of raw maps.
fn loss_oracle(raw: &[(usize, Tensor<f64>)], asg: &[Vec<Assignment>], cfg: &DetectorConfig) -> (f64, f64) {
    let per = 5 + cfg.num_classes;
    let positives: usize = asg.iter().map(Vec::len).sum();
    let norm = positives.max(1) as f64;
    let (mut obj, mut locs, mut cls, mut ious) = (0.0, 0usize, 0.0, 0.0);
    for (level, t) in raw {
        let s = t.shape();
        let na = cfg.anchors_at(*level).len();
        let at = |n: usize, a: usize, k: usize, r: usize, c: usize| t.data()[(((n * na + a) * per + k) * s[2] + r) * s[3] + c];
        for n in 0..s[0] {
            for a in 0..na {
                for r in 0..s[2] {
                    for c in 0..s[3] {
                        let pos = asg[n].iter().any(|p| p.level == *level && p.anchor == a && p.row == r && p.col == c);
                        obj += bce(at(n, a, 4, r, c), if pos { 1.0 } else { 0.0 });
                        locs += 1;
                    }
                }
            }
        }
        for (n, list) in asg.iter().enumerate() {
            for p in list.iter().filter(|p| p.level == *level) {
                for k in 0..cfg.num_classes {
                    cls += bce(at(n, p.anchor, 5 + k, p.row, p.col), if k == p.class_id { 1.0 } else { 0.0 });
                }
                let anc = cfg.anchors_at(*level)[p.anchor];
                let v = |k| at(n, p.anchor, k, p.row, p.col);
                let b = decode_box([v(0), v(1), v(2), v(3)], &anc, p.row, p.col);
                ious += iou(&b, &p.bbox);
            }
        }
    }
    let cls_total = obj / locs as f64 + cls / norm;
    (cls_total, (positives as f64 - ious) / norm)
}

fn loss_of(raw: &[(usize, Tensor<f64>)], asg: &[Vec<Assignment>], cfg: &DetectorConfig) -> LossBreakdown {
    let mut tape = Tape::new();
    let vars: Vec<(usize, _)> = raw.iter().map(|(l, t)| (*l, tape.leaf(t))).collect();
    detection_loss(&mut tape, &vars, asg, cfg).unwrap().breakdown(&tape)
}

fn loss_config() -> DetectorConfig {
    let mut cfg = DetectorConfig::new(3);
    cfg.anchors = anchors();
    cfg
}

fn random_raw(cfg: &DetectorConfig, batch: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<(usize, Tensor<f64>)> {
    cfg.head_levels()
        .into_iter()
        .map(|l| {
            let c = cfg.anchors_at(l).len() * cfg.outputs_per_anchor();
            (l, Tensor::uniform(&[batch, c, h >> l, w >> l], -2.0, 2.0, rng))
        })
        .collect()
}

#[test]
fn loss_matches_straight_line_oracle() {
    let cfg = loss_config();
    let (h, w) = (64, 64);
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = random_raw(&cfg, 3, h, w, &mut rng);
        let gts: Vec<Vec<GroundTruthBox>> = (0..3).map(|_| (0..rng.gen_range(0..5)).map(|_| random_gt(&mut rng, 3)).collect()).collect();
        let levels = level_shapes(&cfg.head_levels(), h, w);
        let asg: Vec<Vec<Assignment>> = gts.iter().map(|g| assign_targets(g, &cfg.anchors, &levels, h, w)).collect();
        let got = loss_of(&raw, &asg, &cfg);
        let (cls, bx) = loss_oracle(&raw, &asg, &cfg);
        assert!((got.cls - cls).abs() < 1e-10, "seed {seed}: {} vs {cls}", got.cls);
        assert!((got.box_loss - bx).abs() < 1e-10, "seed {seed}: {} vs {bx}", got.box_loss);
        assert!((got.total - (got.cls + got.box_loss)).abs() < 1e-9);
    }
}

/// Raw maps whose positives decode exactly onto their boxes with logits of
/// magnitude `m` pointing the right way everywhere.
fn confident_maps(cfg: &DetectorConfig, asg: &[Assignment], h: usize, w: usize, m: f64) -> Vec<(usize, Tensor<f64>)> {
    let per = cfg.outputs_per_anchor();
    cfg.head_levels()
        .into_iter()
        .map(|l| {
            let na = cfg.anchors_at(l).len();
            let (rows, cols) = (h >> l, w >> l);
            let mut t = Tensor::full(&[1, na * per, rows, cols], -m);
            for p in asg.iter().filter(|p| p.level == l) {
                let enc = encode(&p.bbox, &cfg.anchors_at(l)[p.anchor], p.row, p.col);
                let at = |k: usize| ((p.anchor * per + k) * rows + p.row) * cols + p.col;
                for (k, v) in enc.iter().enumerate() {
                    t.data_mut()[at(k)] = *v;
                }
                t.data_mut()[at(4)] = m;
                t.data_mut()[at(5 + p.class_id)] = m;
            }
            (l, t)
        })
        .collect()
}

#[test]
fn loss_vanishes_in_the_saturated_limit() {
    let cfg = loss_config();
    let gts = [
        GroundTruthBox { class_id: 2, cx: 0.3, cy: 0.4, w: 0.2, h: 0.25 },
        GroundTruthBox { class_id: 0, cx: 0.7, cy: 0.6, w: 0.4, h: 0.45 },
    ];
    let levels = level_shapes(&cfg.head_levels(), 64, 64);
    let asg = assign_targets(&gts, &cfg.anchors, &levels, 64, 64);
    assert_eq!(asg.len(), 2);
    let mut prev = f64::INFINITY;
    for m in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let l = loss_of(&confident_maps(&cfg, &asg, 64, 64, m), &[asg.clone()], &cfg);
        assert!(l.box_loss.abs() < 1e-9, "decoded boxes equal targets: {}", l.box_loss);
        assert!(l.total < prev);
        prev = l.total;
    }
    assert!(prev < 1e-12);
}

/// Reference suppression: rank everything once, then a box survives iff no
/// better-ranked surviving box of its class overlaps it above the threshold.
fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    let better = |i: usize, j: usize| {
        let (a, b) = (&dets[i], &dets[j]);
        a.score > b.score
            || (a.score == b.score && (a.bbox.x_min < b.bbox.x_min || (a.bbox.x_min == b.bbox.x_min && a.bbox.y_min < b.bbox.y_min)))
    };
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by_key(|&i| (0..n).filter(|&j| better(j, i)).count());
    let mut keep = vec![false; n];
    for (pos, &i) in rank.iter().enumerate() {
        keep[i] = rank[..pos]
            .iter()
            .all(|&j| !keep[j] || dets[j].class_id != dets[i].class_id || iou(&dets[j].bbox, &dets[i].bbox) <= thr);
    }
    let mut out: Vec<Detection> = rank.iter().filter(|&&i| keep[i]).map(|&i| dets[i]).collect();
    out.sort_by_key(|d| d.class_id);
    out
}

fn random_dets(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..40.0f64), rng.gen_range(0.0..40.0f64));
            let (w, h) = (rng.gen_range(2.0..20.0f64), rng.gen_range(2.0..20.0f64));
            // Coarse scores and coordinates make ties common.
            Detection {
                class_id: rng.gen_range(0..classes),
                score: (rng.gen_range(1..10) as f64) / 10.0,
                bbox: BBox::new(x.round(), y.round(), (x + w).round() + 1.0, (y + h).round() + 1.0),
            }
        })
        .collect()
}

#[test]
fn nms_matches_quadratic_reference() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = if seed < 100 { rng.gen_range(0..11) } else { 50 };
        let dets = random_dets(&mut rng, n, 3);
        for thr in [0.3, DEFAULT_NMS_IOU] {
            assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr), "seed {seed}");
        }
    }
}

#[test]
fn tied_streams_double_the_single_stream_features() {
    let mut single = DetectorConfig::new(1);
    single.backbone.streams = StreamMode::Single;
    let mut dual = single.clone();
    dual.backbone.streams = StreamMode::Dual;
    dual.backbone.ssa_stages.clear();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p1 = DetectorParams::<f64>::init(&single, &mut rng).unwrap();
    let p2 = DetectorParams { stream_e: p1.stream_a.clone(), ..p1.clone() };
    let x = Tensor::randn(&[2, 3, 64, 64], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let one = backbone_forward(&mut tape, &p1, &single.backbone, "", xv, None).unwrap();
    let two = backbone_forward(&mut tape, &p2, &dual.backbone, "", xv, Some(xv)).unwrap();
    for (a, b) in one.iter().zip(&two) {
        let doubled: Vec<f64> = tape.value(*a).iter().map(|v| 2.0 * v).collect();
        assert_eq!(doubled, tape.value(*b));
    }
}

#[test]
fn zero_head_weights_give_zero_logits() {
    let mut cfg = DetectorConfig::new(1);
    cfg.anchors = Anchor::defaults();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = DetectorParams::<f64>::init(&cfg, &mut rng).unwrap();
    for (_, h) in &mut p.heads {
        h.w = Tensor::zeros(h.w.shape());
        h.b = Tensor::zeros(h.b.shape());
    }
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::randn(&[1, 3, 64, 64], 1.0, &mut rng));
    let raw = detector_forward(&mut tape, &p, &cfg, x, Some(x)).unwrap();
    assert_eq!(raw.len(), 3);
    for (_, v) in raw {
        assert_eq!(tape.shape(v)[1], 6);
        assert!(tape.value(v).iter().all(|&x| x == 0.0));
    }
}

#[test]
fn overfits_a_small_synthetic_set() {
    use s2adet::pipeline::data::make_batch;
    use s2adet::pipeline::{InputMode, Sample};
    use s2adet::synthetic::{generate, SyntheticSceneSpec};

    let scenes = generate(&SyntheticSceneSpec::two_class(64, 64, 16, 2.0, 5), 16).unwrap();
    let samples: Vec<Sample> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (sa, se) = s2adet::hid::decouple(&s.cube, &Default::default()).unwrap();
            Sample { id: i.to_string(), sa, se, boxes: s.boxes.clone() }
        })
        .collect();
    let mut cfg = DetectorConfig::new(2);
    cfg.neck = Neck::FusedP3;
    cfg.anchors = vec![Anchor { width: 16.0, height: 16.0, level: 3 }];
    let mut params = DetectorParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut opt = Optimizer::sgd(0.9);
    let refs: Vec<&Sample> = samples.iter().collect();
    let batches: Vec<Batch<f64>> = refs.chunks(8).map(|c| make_batch(c, InputMode::SpatialSpectral).unwrap()).collect();
    let initial: f64 = batches.iter().map(|b| evaluate_loss(&params, &cfg, b).unwrap().total).sum::<f64>() / 2.0;
    let steps = 300;
    for step in 0..steps {
        let lr = poly_lr(0.02, step, steps, 0.9);
        let l = train_step(&mut params, &cfg, &batches[step % 2], &mut opt, lr).unwrap();
        assert!((l.total - (l.cls + l.box_loss)).abs() < 1e-9);
    }
    let last: f64 = batches.iter().map(|b| evaluate_loss(&params, &cfg, b).unwrap().total).sum::<f64>() / 2.0;
    assert!(last <= 0.1 * initial, "loss {initial} -> {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn encode_then_decode_reproduces_the_box(
        cx in 0.02f64..0.98, cy in 0.02f64..0.98, w in 0.05f64..0.9, h in 0.05f64..0.9,
    ) {
        let anchors = anchors();
        let levels = level_shapes(&[3, 4], 96, 64);
        let g = GroundTruthBox { class_id: 0, cx, cy, w, h };
        let a = assign_targets(&[g], &anchors, &levels, 96, 64)[0];
        let anc = anchors.iter().filter(|x| x.level == a.level).nth(a.anchor).unwrap();
        let back = decode_box(encode(&a.bbox, anc, a.row, a.col), anc, a.row, a.col);
        for (x, y) in [(back.x_min, a.bbox.x_min), (back.y_min, a.bbox.y_min), (back.x_max, a.bbox.x_max), (back.y_max, a.bbox.y_max)] {
            prop_assert!((x - y).abs() < 1e-6, "{:?} vs {:?}", back, a.bbox);
        }
    }

    #[test]
    fn nms_keeps_an_antichain(seed in 0u64..10_000, n in 0usize..40, thr in 0.1f64..0.9) {
        let dets = random_dets(&mut ChaCha8Rng::seed_from_u64(seed), n, 2);
        let kept = nms(&dets, thr);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= thr);
            }
        }
    }

    #[test]
    fn nms_ignores_score_scale(seed in 0u64..10_000, n in 0usize..40, c in 0.01f64..100.0) {
        let dets = random_dets(&mut ChaCha8Rng::seed_from_u64(seed), n, 2);
        let scaled: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score * c, ..*d }).collect();
        let boxes = |v: Vec<Detection>| v.into_iter().map(|d| (d.class_id, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max)).collect::<Vec<_>>();
        prop_assert_eq!(boxes(nms(&dets, 0.6)), boxes(nms(&scaled, 0.6)));
    }
}
