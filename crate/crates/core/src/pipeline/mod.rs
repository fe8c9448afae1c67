//! The file-based pipeline behind the `s2a` commands:
//! generate → decouple → split → train → detect → eval.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! images/<id>_sa.ppm, <id>_se.ppm, <id>_{sa,se}.provenance
//! splits/{train,val,test}.txt
//! train/train_log.txt, last.ckpt, best.ckpt, final.ckpt
//! detections/<id>.txt
//! overlays/<id>.ppm
//! eval/metrics.txt, confusion.csv, table.txt
//! ```

pub mod config;
pub mod data;
pub mod fit;
pub mod split;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::boxes::{format_annotations, format_detections, parse_detections, read_annotations, Detection};
use crate::cube_io::{read_cube, render_image, write_cube, Role};
use crate::detector::predict;
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, sorted_files, EvalResult};
use crate::gradsuite::{detector_suite, op_suite, ssa_suite, CaseResult, DETECTOR_COORDS, DETECTOR_FLOOR};
use crate::hid::{decouple, fit_pca, select_bands};
use crate::synthetic::render_scene;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::GradCheckOptions;

pub use config::{InputMode, PipelineConfig};
pub use data::{image_tensor, load_sample, Sample};
pub use fit::{fit, load_model, FitReport};
pub use split::{split_images, split_sizes, LabeledImage, SplitResult};

/// Overlay colors for classes 0, 1, 2; further classes cycle.
pub const CLASS_COLORS: [[u8; 3]; 3] = [[0, 0, 255], [255, 255, 0], [255, 0, 0]];

pub fn images_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("images")
}

pub fn splits_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("splits")
}

pub fn train_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("train")
}

pub fn detections_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("detections")
}

pub fn overlays_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("overlays")
}

pub fn eval_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("eval")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Cube files (`*.hdr`) in the cube directory, by name.
fn cube_files(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    sorted_files(&cfg.cube_dir, "hdr")
}

/// Render the synthetic corpus: `scene_NNNN` cubes and annotations.
pub fn cmd_generate(cfg: &PipelineConfig) -> Result<usize> {
    let spec = cfg.synth.spec(cfg.train.seed);
    spec.validate()?;
    create_dir(&cfg.cube_dir)?;
    create_dir(&cfg.annotation_dir)?;
    for i in 0..cfg.synth.count {
        let scene = render_scene(&spec, i as u64)?;
        let id = format!("scene_{i:04}");
        write_cube(&scene.cube, cfg.cube_dir.join(format!("{id}.hdr")))?;
        write_text(&cfg.annotation_dir.join(format!("{id}.txt")), &format_annotations(&scene.boxes))?;
    }
    info!("generated {} scenes in {}", cfg.synth.count, cfg.cube_dir.display());
    Ok(cfg.synth.count)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecoupleSummary {
    pub written: Vec<String>,
    pub skipped: Vec<(String, String)>,
}

/// Decouple every cube into an SA/SE pair with provenance sidecars.
/// Unreadable cubes are skipped and reported.
pub fn cmd_decouple(cfg: &PipelineConfig) -> Result<DecoupleSummary> {
    let files = cube_files(cfg)?;
    let mut summary = DecoupleSummary::default();
    if files.is_empty() {
        warn!("no cubes in {}", cfg.cube_dir.display());
        return Ok(summary);
    }
    let dir = images_dir(cfg);
    create_dir(&dir)?;
    for f in files {
        let id = stem(&f);
        let pair = read_cube(&f).and_then(|c| decouple(&c, &cfg.decouple));
        match pair {
            Ok((sa, se)) => {
                for img in [&sa, &se] {
                    render_image(img, data::image_path(&dir, &id, img.role))?;
                    write_text(&data::provenance_path(&dir, &id, img.role), &img.provenance)?;
                }
                summary.written.push(id);
            }
            Err(e) => {
                warn!("skipping {}: {e}", f.display());
                summary.skipped.push((id, e.to_string()));
            }
        }
    }
    Ok(summary)
}

/// Band selection for each cube, as a text report.
pub fn cmd_bandselect(cfg: &PipelineConfig, k: usize) -> Result<String> {
    let mut out = String::new();
    for f in cube_files(cfg)? {
        let cube = read_cube(&f)?;
        let sel = select_bands::<f64>(&cube, k)?;
        let wl: Vec<String> = sel.representatives.iter().map(|&b| cube.wavelengths_nm()[b].to_string()).collect();
        let _ = writeln!(
            out,
            "{} boundaries={:?} bands={:?} wavelengths_nm=[{}] objective={:e}",
            stem(&f),
            sel.segment_boundaries,
            sel.representatives,
            wl.join(", "),
            sel.objective_value
        );
    }
    Ok(out)
}

/// Principal components of each cube, as a text report.
pub fn cmd_pca(cfg: &PipelineConfig, k: usize) -> Result<String> {
    let mut out = String::new();
    for f in cube_files(cfg)? {
        let cube = read_cube(&f)?;
        let model = fit_pca::<f64>(&cube, k)?;
        let total: f64 = crate::hid::pca::spectral_covariance::<f64>(&cube).1.iter().step_by(cube.bands() + 1).sum();
        let ratios: Vec<String> =
            model.explained_variance.iter().map(|v| format!("{:.6}", if total > 0.0 { v / total } else { 0.0 })).collect();
        let _ = writeln!(
            out,
            "{} eigenvalues=[{}] explained_ratio=[{}]",
            stem(&f),
            model.explained_variance.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(", "),
            ratios.join(", ")
        );
    }
    Ok(out)
}

fn labeled_images(cfg: &PipelineConfig) -> Result<Vec<LabeledImage>> {
    let classes = cfg.detector.num_classes;
    sorted_files(&cfg.annotation_dir, "txt")?
        .iter()
        .map(|p| {
            let mut counts = vec![0; classes];
            for g in read_annotations(p)? {
                *counts.get_mut(g.class_id).ok_or_else(|| invalid!("{}: class {} >= num_classes {classes}", p.display(), g.class_id))? += 1;
            }
            Ok(LabeledImage { id: stem(p), class_counts: counts })
        })
        .collect()
}

/// Partition the annotated images and write `splits/{train,val,test}.txt`.
pub fn cmd_split(cfg: &PipelineConfig) -> Result<SplitResult> {
    let items = labeled_images(cfg)?;
    let r = split_images(&items, &cfg.split_ratios, cfg.split_tolerance, cfg.split_attempts, cfg.train.seed)?;
    if !r.balanced {
        warn!(
            "no shuffle within {} attempts kept class shares within {}; using the best (deviation {:.3})",
            r.attempts, cfg.split_tolerance, r.max_deviation
        );
    }
    let dir = splits_dir(cfg);
    create_dir(&dir)?;
    for (name, ids) in split::SPLIT_NAMES.iter().zip(&r.splits) {
        let mut text = ids.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        write_text(&dir.join(format!("{name}.txt")), &text)?;
    }
    Ok(r)
}

fn split_ids(cfg: &PipelineConfig, name: &str) -> Result<Vec<String>> {
    if name == "all" {
        return Ok(sorted_files(&images_dir(cfg), "ppm")?
            .iter()
            .filter_map(|p| stem(p).strip_suffix("_sa").map(String::from))
            .collect());
    }
    data::read_manifest(&splits_dir(cfg).join(format!("{name}.txt")))
}

fn split_samples(cfg: &PipelineConfig, name: &str) -> Result<Vec<Sample>> {
    data::load_samples(&images_dir(cfg), &cfg.annotation_dir, &split_ids(cfg, name)?)
}

/// Train on the train split, validating on val.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<FitReport> {
    let train = split_samples(cfg, "train")?;
    let val = split_samples(cfg, "val")?;
    info!("training on {} images, validating on {}", train.len(), val.len());
    fit(cfg, &train, &val, Some(&train_dir(cfg)))
}

fn checkpoint_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| train_dir(cfg).join(fit::FINAL_CHECKPOINT))
}

/// Detections for the configured split: one text file per image at the
/// evaluation threshold and an overlay of those at `conf_threshold`.
pub fn cmd_detect(cfg: &PipelineConfig) -> Result<usize> {
    let ck = Checkpoint::read(&checkpoint_path(cfg))?;
    let params = load_model(&ck, &cfg.detector)?;
    let ids = split_ids(cfg, &cfg.detect_split)?;
    let (det_dir, ov_dir) = (detections_dir(cfg), overlays_dir(cfg));
    create_dir(&det_dir)?;
    create_dir(&ov_dir)?;
    for id in &ids {
        let s = load_sample(&images_dir(cfg), &cfg.annotation_dir, id)?;
        let sa = image_tensor(&[&s.sa])?;
        let se = s.second(cfg.inputs).map(|im| image_tensor(&[im])).transpose()?;
        let dets = predict(&params, &cfg.detector, &sa, se.as_ref(), cfg.eval_conf_threshold, cfg.nms_iou)?.remove(0);
        write_text(&det_dir.join(format!("{id}.txt")), &format_detections(&dets))?;
        let mut overlay = s.sa.clone();
        for d in dets.iter().filter(|d| d.score >= cfg.conf_threshold) {
            let b = d.bbox;
            overlay.draw_rect(b.x_min, b.y_min, b.x_max - 1.0, b.y_max - 1.0, CLASS_COLORS[d.class_id % CLASS_COLORS.len()]);
        }
        render_image(&overlay, ov_dir.join(format!("{id}.ppm")))?;
    }
    Ok(ids.len())
}

/// Score the detection files against the annotations of the same ids.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<EvalResult> {
    let det_dir = detections_dir(cfg);
    let ids = split_ids(cfg, &cfg.detect_split)?;
    let mut problems = Vec::new();
    let det_ids: Vec<String> = sorted_files(&det_dir, "txt")?.iter().map(|p| stem(p)).collect();
    for d in det_ids.iter().filter(|d| !ids.contains(d)) {
        problems.push(format!("{}: no such image in split `{}`", det_dir.join(format!("{d}.txt")).display(), cfg.detect_split));
    }
    let mut dets: Vec<Vec<Detection>> = Vec::new();
    let mut gts = Vec::new();
    for id in &ids {
        let dpath = det_dir.join(format!("{id}.txt"));
        let apath = cfg.annotation_dir.join(format!("{id}.txt"));
        let text = match std::fs::read_to_string(&dpath) {
            Ok(t) => t,
            Err(_) => {
                problems.push(format!("{}: missing detections for image `{id}`", dpath.display()));
                continue;
            }
        };
        if !apath.exists() {
            problems.push(format!("{}: missing annotations for image `{id}`", apath.display()));
            continue;
        }
        let sa = crate::cube_io::read_image(data::image_path(&images_dir(cfg), id, Role::SpatialAggregated), Role::SpatialAggregated)?;
        dets.push(parse_detections(&text, &dpath.display().to_string())?);
        gts.push(read_annotations(&apath)?.iter().map(|g| (g.class_id, g.to_pixels(sa.width, sa.height))).collect());
    }
    if !problems.is_empty() {
        return Err(invalid!("detection and annotation ids disagree:\n{}", problems.join("\n")));
    }
    let result = evaluate(&dets, &gts, cfg.detector.num_classes, cfg.conf_threshold)?;
    let dir = eval_dir(cfg);
    create_dir(&dir)?;
    write_text(&dir.join("metrics.txt"), &result.metrics_text())?;
    write_text(&dir.join("confusion.csv"), &result.confusion_csv())?;
    write_text(&dir.join("table.txt"), &result.table_text())?;
    Ok(result)
}

/// Gradient suites named in `gradcheck.modules` over `gradcheck.seeds`
/// seeds starting at the configured seed. Fails with a numerical error if
/// any case exceeds tolerance.
pub fn cmd_gradcheck(cfg: &PipelineConfig) -> Result<String> {
    let mut out = String::new();
    if cfg.gradcheck_modules.is_empty() {
        warn!("gradcheck: empty module list, nothing to check");
        out.push_str("no modules checked\n");
        return Ok(out);
    }
    let opts = GradCheckOptions::default();
    let mut failures = Vec::new();
    for module in &cfg.gradcheck_modules {
        let mut worst = 0.0f64;
        let mut cases = 0;
        let mut skipped = 0;
        for s in 0..cfg.gradcheck_seeds as u64 {
            let seed = cfg.train.seed + s;
            let results: Vec<CaseResult> = match module.as_str() {
                "ops" => op_suite(seed, &opts)?,
                "ssa" => ssa_suite(seed, &opts)?,
                "detector" => detector_suite(seed, &opts)?,
                other => return Err(invalid!("unknown gradcheck module `{other}` (ops, ssa, detector)")),
            };
            for c in results {
                cases += 1;
                skipped += c.report.skipped;
                worst = worst.max(c.report.max_rel_error);
                if !c.report.passed {
                    failures.push(format!("{module} seed {seed} {}: max_rel_error={:e}", c.name, c.report.max_rel_error));
                }
            }
        }
        let _ = writeln!(out, "module={module} seeds={} cases={cases} max_rel_error={worst:e} kink_skipped={skipped}", cfg.gradcheck_seeds);
    }
    let _ = writeln!(out, "tol={:e} eps={:e} detector_floor={DETECTOR_FLOOR:e} detector_coords={DETECTOR_COORDS}", opts.tol, opts.eps);
    if !failures.is_empty() {
        return Err(Error::Numerical(format!("gradient check failed:\n{}", failures.join("\n"))));
    }
    Ok(out)
}
