//! Average precision, mean AP over IoU thresholds, confusion matrices and
//! annotation-set statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::boxes::{iou, read_annotations, BBox, Detection};
use crate::error::{Error, Result};

pub use crate::boxes::iou as box_iou;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// A detection tagged with the image it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDetection {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// A ground-truth box (pixels) tagged with its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageBox {
    pub image: usize,
    pub bbox: BBox,
}

/// Score descending, then image id, then `x_min`.
fn ranking(a: &ImageDetection, b: &ImageDetection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.image.cmp(&b.image)).then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
}

/// Greedy matching in ranking order. Returns the ranked detections with a
/// true-positive flag each.
pub fn match_detections(dets: &[ImageDetection], gts: &[ImageBox], iou_thresh: f64) -> Vec<(ImageDetection, bool)> {
    let mut ranked = dets.to_vec();
    ranked.sort_by(ranking);
    let mut used = vec![false; gts.len()];
    ranked
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.image != d.image {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_thresh && best.map_or(true, |(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                used[gi] = true;
            }
            (d, best.is_some())
        })
        .collect()
}

/// Area under the precision envelope for ranked TP flags.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// All-points interpolated AP of one class. Zero when there is no ground
/// truth.
pub fn average_precision(dets: &[ImageDetection], gts: &[ImageBox], iou_thresh: f64) -> f64 {
    let flags: Vec<bool> = match_detections(dets, gts, iou_thresh).into_iter().map(|(_, f)| f).collect();
    ap_from_flags(&flags, gts.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub num_classes: usize,
    /// `None` for classes with neither ground truth nor detections; those
    /// are left out of the means.
    pub per_class_ap50: Vec<Option<f64>>,
    pub per_class_ap5095: Vec<Option<f64>>,
    pub map50: f64,
    pub map5095: f64,
    /// `(C+1)×(C+1)`: row = true class, column = predicted class; index `C`
    /// is background.
    pub confusion: Vec<Vec<u64>>,
    pub gt_counts: Vec<usize>,
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Class-agnostic greedy matching at IoU 0.5 of detections scoring at least
/// `conf` against one image's boxes, accumulated into `confusion`.
fn accumulate_confusion(dets: &[Detection], gts: &[(usize, BBox)], conf: f64, confusion: &mut [Vec<u64>]) {
    let bg = confusion.len() - 1;
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.score >= conf).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.bbox.x_min.total_cmp(&b.bbox.x_min)));
    let mut used = vec![false; gts.len()];
    for d in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (_, g)) in gts.iter().enumerate() {
            let v = iou(&d.bbox, g);
            if !used[gi] && v >= 0.5 && best.map_or(true, |(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                used[gi] = true;
                confusion[gts[gi].0][d.class_id.min(bg)] += 1;
            }
            None => confusion[bg][d.class_id.min(bg)] += 1,
        }
    }
    for (gi, (c, _)) in gts.iter().enumerate() {
        if !used[gi] {
            confusion[*c][bg] += 1;
        }
    }
}

/// Per-class AP at 0.5 and averaged over 0.50:0.95, their class means, and
/// the confusion matrix of detections scoring at least `confusion_conf`.
/// `dets[i]` and `gts[i]` belong to image `i`; ground truth is `(class, box)`
/// in pixels.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<(usize, BBox)>], num_classes: usize, confusion_conf: f64) -> Result<EvalResult> {
    if dets.len() != gts.len() {
        return Err(Error::InvalidArgument(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    for (c, _) in gts.iter().flatten() {
        if *c >= num_classes {
            return Err(Error::InvalidArgument(format!("ground-truth class {c} outside 0..{num_classes}")));
        }
    }
    let thresholds = coco_thresholds();
    let mut per50 = Vec::with_capacity(num_classes);
    let mut per5095 = Vec::with_capacity(num_classes);
    let mut gt_counts = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let cd: Vec<ImageDetection> = dets
            .iter()
            .enumerate()
            .flat_map(|(i, v)| v.iter().filter(|d| d.class_id == c).map(move |d| ImageDetection { image: i, score: d.score, bbox: d.bbox }))
            .collect();
        let cg: Vec<ImageBox> = gts
            .iter()
            .enumerate()
            .flat_map(|(i, v)| v.iter().filter(|(k, _)| *k == c).map(move |(_, b)| ImageBox { image: i, bbox: *b }))
            .collect();
        gt_counts.push(cg.len());
        if cd.is_empty() && cg.is_empty() {
            per50.push(None);
            per5095.push(None);
            continue;
        }
        let aps: Vec<f64> = thresholds.iter().map(|&t| average_precision(&cd, &cg, t)).collect();
        per50.push(Some(aps[0]));
        per5095.push(Some(aps.iter().sum::<f64>() / aps.len() as f64));
    }
    let mut confusion = vec![vec![0u64; num_classes + 1]; num_classes + 1];
    for (d, g) in dets.iter().zip(gts) {
        accumulate_confusion(d, g, confusion_conf, &mut confusion);
    }
    Ok(EvalResult {
        num_classes,
        map50: mean_present(&per50),
        map5095: mean_present(&per5095),
        per_class_ap50: per50,
        per_class_ap5095: per5095,
        confusion,
        gt_counts,
    })
}

impl EvalResult {
    /// `key = value` lines.
    pub fn metrics_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "map50 = {:.6}", self.map50);
        let _ = writeln!(s, "map5095 = {:.6}", self.map5095);
        for c in 0..self.num_classes {
            let fmt = |v: Option<f64>| v.map_or("excluded".to_string(), |x| format!("{x:.6}"));
            let _ = writeln!(s, "ap50.class{c} = {}", fmt(self.per_class_ap50[c]));
            let _ = writeln!(s, "ap5095.class{c} = {}", fmt(self.per_class_ap5095[c]));
            let _ = writeln!(s, "gt_count.class{c} = {}", self.gt_counts[c]);
        }
        s
    }

    pub fn confusion_csv(&self) -> String {
        let names: Vec<String> = (0..self.num_classes).map(|c| format!("class{c}")).chain(["background".to_string()]).collect();
        let mut s = format!("true\\pred,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }

    pub fn table_text(&self) -> String {
        let mut s = format!("{:<10} {:>8} {:>10} {:>6}\n", "class", "AP50", "AP50:95", "GT");
        for c in 0..self.num_classes {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
            let _ = writeln!(s, "{:<10} {:>8} {:>10} {:>6}", format!("class{c}"), f(self.per_class_ap50[c]), f(self.per_class_ap5095[c]), self.gt_counts[c]);
        }
        let _ = writeln!(s, "{:<10} {:>8.1} {:>10.1}", "all", 100.0 * self.map50, 100.0 * self.map5095);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetStats {
    pub images: usize,
    pub per_class: BTreeMap<usize, usize>,
    pub total: usize,
    pub mean_per_image: f64,
    /// Image count per split manifest, when manifests were given.
    pub splits: BTreeMap<String, usize>,
}

impl DatasetStats {
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images = {}", self.images);
        for (c, n) in &self.per_class {
            let _ = writeln!(s, "objects.class{c} = {n}");
        }
        let _ = writeln!(s, "objects.total = {}", self.total);
        let _ = writeln!(s, "objects.mean_per_image = {:.4}", self.mean_per_image);
        for (k, n) in &self.splits {
            let _ = writeln!(s, "split.{k} = {n}");
        }
        s
    }
}

/// Count annotated objects in every `*.txt` file of `dir`. Split manifests
/// (`train.txt`, `val.txt`, `test.txt`) in `splits_dir` are counted too.
pub fn validate_dataset(dir: &Path, splits_dir: Option<&Path>) -> Result<DatasetStats> {
    let mut stats = DatasetStats::default();
    for path in sorted_files(dir, "txt")? {
        let gts = read_annotations(&path)?;
        stats.images += 1;
        for g in gts {
            *stats.per_class.entry(g.class_id).or_default() += 1;
            stats.total += 1;
        }
    }
    stats.mean_per_image = if stats.images == 0 { 0.0 } else { stats.total as f64 / stats.images as f64 };
    if let Some(sd) = splits_dir {
        for name in ["train", "val", "test"] {
            let p = sd.join(format!("{name}.txt"));
            if p.exists() {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                stats.splits.insert(name.to_string(), text.lines().filter(|l| !l.trim().is_empty()).count());
            }
        }
    }
    Ok(stats)
}

/// Files in `dir` with the given extension, sorted by name.
pub fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0)
    }

    #[test]
    fn single_exact_match_is_perfect() {
        let d = [ImageDetection { image: 0, score: 0.9, bbox: b(0.0) }];
        let g = [ImageBox { image: 0, bbox: b(0.0) }];
        assert_eq!(average_precision(&d, &g, 0.5), 1.0);
    }

    #[test]
    fn false_positive_first_halves_ap() {
        let d = [
            ImageDetection { image: 0, score: 0.9, bbox: b(50.0) },
            ImageDetection { image: 0, score: 0.8, bbox: b(0.0) },
        ];
        let g = [ImageBox { image: 0, bbox: b(0.0) }];
        assert_eq!(average_precision(&d, &g, 0.5), 0.5);
    }

    #[test]
    fn no_ground_truth_gives_zero() {
        let d = [ImageDetection { image: 0, score: 0.9, bbox: b(0.0) }];
        assert_eq!(average_precision(&d, &[], 0.5), 0.0);
        assert_eq!(average_precision(&[], &[], 0.5), 0.0);
    }

    #[test]
    fn detections_in_other_images_do_not_match() {
        let d = [ImageDetection { image: 1, score: 0.9, bbox: b(0.0) }];
        let g = [ImageBox { image: 0, bbox: b(0.0) }];
        assert_eq!(average_precision(&d, &g, 0.5), 0.0);
    }

    #[test]
    fn perfect_three_class_eval() {
        let gts: Vec<Vec<(usize, BBox)>> = (0..3).map(|c| vec![(c, b(20.0 * c as f64))]).collect();
        let dets: Vec<Vec<Detection>> = gts.iter().map(|g| g.iter().map(|&(c, bb)| Detection { class_id: c, score: 0.9, bbox: bb }).collect()).collect();
        let r = evaluate(&dets, &gts, 3, 0.25).unwrap();
        assert_eq!((r.map50, r.map5095), (1.0, 1.0));
        for c in 0..3 {
            assert_eq!(r.confusion[c][c], 1);
            assert_eq!(r.confusion[c].iter().sum::<u64>(), 1);
        }
    }

    #[test]
    fn wrong_class_everywhere() {
        let gts = vec![vec![(0, b(0.0))], vec![(1, b(0.0))]];
        let dets = vec![
            vec![Detection { class_id: 1, score: 0.9, bbox: b(0.0) }],
            vec![Detection { class_id: 0, score: 0.9, bbox: b(0.0) }],
        ];
        let r = evaluate(&dets, &gts, 2, 0.25).unwrap();
        assert_eq!(r.map50, 0.0);
        assert_eq!(r.confusion[0][1], 1);
        assert_eq!(r.confusion[1][0], 1);
    }

    #[test]
    fn absent_class_is_excluded() {
        let gts = vec![vec![(0, b(0.0))]];
        let dets = vec![vec![Detection { class_id: 0, score: 0.9, bbox: b(0.0) }]];
        let r = evaluate(&dets, &gts, 3, 0.25).unwrap();
        assert_eq!(r.per_class_ap50, vec![Some(1.0), None, None]);
        assert_eq!(r.map50, 1.0);
        assert!(r.metrics_text().contains("ap50.class1 = excluded"));
    }

    #[test]
    fn dataset_counts() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(validate_dataset(dir.path(), None).unwrap().total, 0);
        std::fs::write(dir.path().join("a.txt"), "0 0.5 0.5 0.1 0.1\n1 0.2 0.2 0.1 0.1\n").unwrap();
        std::fs::write(dir.path().join("b.txt"), "0 0.5 0.5 0.1 0.1\n").unwrap();
        std::fs::write(dir.path().join("c.txt"), "").unwrap();
        let s = validate_dataset(dir.path(), None).unwrap();
        assert_eq!((s.images, s.total), (3, 3));
        assert_eq!(s.per_class[&0], 2);
        std::fs::write(dir.path().join("d.txt"), "0 0.5 0.5 0.1\n").unwrap();
        let err = validate_dataset(dir.path(), None).unwrap_err().to_string();
        assert!(err.contains("d.txt:1"), "{err}");
    }
}
