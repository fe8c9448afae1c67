//! Epoch loop: shuffling, augmentation, schedule, validation, checkpoints.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{evaluate_loss, poly_lr, train_step, DetectorConfig, DetectorParams, LossBreakdown, Optimizer};
use crate::error::{invalid, Error, Result};
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::data::{make_batch, random_flips, Sample};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Parameters, Tensor};

pub const MODEL_PREFIX: &str = "model";
const META_EPOCH: &str = "meta.epoch";
const META_ANCHORS: &str = "meta.anchors";
const META_CLASSES: &str = "meta.num_classes";
const META_BEST: &str = "meta.best_loss";

pub const LOG_FILE: &str = "train_log.txt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Everything needed to continue training.
pub fn training_checkpoint(params: &DetectorParams<f64>, cfg: &DetectorConfig, opt: &Optimizer<f64>, next_epoch: usize, best: f64) -> Checkpoint<f64> {
    let mut ck = Checkpoint::from_params(params, MODEL_PREFIX);
    opt.save_into(&mut ck);
    ck.set_scalar(META_EPOCH, next_epoch as f64);
    ck.set_scalar(META_CLASSES, cfg.num_classes as f64);
    ck.set_scalar(META_BEST, best);
    let a: Vec<f64> = cfg.anchors.iter().flat_map(|a| [a.width, a.height, a.level as f64]).collect();
    ck.insert(META_ANCHORS, Tensor::new(vec![cfg.anchors.len(), 3], a).expect("anchor table"));
    ck
}

/// Model weights from a checkpoint written for `cfg`. Rejects missing,
/// reshaped or unexpected tensors and differing anchors or class counts.
pub fn load_model(ck: &Checkpoint<f64>, cfg: &DetectorConfig) -> Result<DetectorParams<f64>> {
    let mut params = DetectorParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_into(&mut params, MODEL_PREFIX)?;
    let names: std::collections::BTreeSet<String> = params.named(MODEL_PREFIX).into_iter().map(|(n, _)| n).collect();
    let model_dot = format!("{MODEL_PREFIX}.");
    if let Some(extra) = ck.tensors.keys().find(|k| k.starts_with(&model_dot) && !names.contains(*k)) {
        return Err(invalid!("checkpoint tensor `{extra}` has no counterpart in the configured model"));
    }
    if let Some(c) = ck.scalar(META_CLASSES) {
        if c as usize != cfg.num_classes {
            return Err(invalid!("checkpoint was trained for {c} classes, config has {}", cfg.num_classes));
        }
    }
    if let Some(t) = ck.get(META_ANCHORS) {
        let want: Vec<f64> = cfg.anchors.iter().flat_map(|a| [a.width, a.height, a.level as f64]).collect();
        if t.data() != want.as_slice() {
            return Err(invalid!("checkpoint anchors {:?} differ from configured anchors", t.data()));
        }
    }
    Ok(params)
}

/// Per-epoch record, written as one `key=value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        let mut s = format!(
            "epoch={} lr={} steps={} total={} cls={} box={}",
            self.epoch, self.lr, self.steps, self.train.total, self.train.cls, self.train.box_loss
        );
        if let Some(v) = &self.val {
            let _ = write!(s, " val_total={} val_cls={} val_box={}", v.total, v.cls, v.box_loss);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub records: Vec<EpochRecord>,
    /// Loss of each optimizer step in order.
    pub step_losses: Vec<LossBreakdown>,
    pub first_epoch: usize,
    pub params: DetectorParams<f64>,
}

fn mean_breakdown(parts: &[(LossBreakdown, usize)]) -> LossBreakdown {
    let n: usize = parts.iter().map(|(_, k)| k).sum();
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(|(l, k)| f(l) * *k as f64).sum::<f64>() / n.max(1) as f64;
    LossBreakdown { total: avg(|l| l.total), cls: avg(|l| l.cls), box_loss: avg(|l| l.box_loss) }
}

/// Mean loss over `samples`, in batches, weighted by batch size.
pub fn dataset_loss(params: &DetectorParams<f64>, pc: &PipelineConfig, samples: &[Sample]) -> Result<LossBreakdown> {
    let mut parts = Vec::new();
    for chunk in samples.chunks(pc.train.batch) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        parts.push((evaluate_loss(params, &pc.detector, &make_batch(&refs, pc.inputs)?)?, chunk.len()));
    }
    Ok(mean_breakdown(&parts))
}

struct Outputs {
    dir: PathBuf,
    log: std::fs::File,
}

impl Outputs {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let log = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { dir: dir.to_path_buf(), log })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.log, "{s}").map_err(|e| Error::io(self.dir.join(LOG_FILE), e))
    }

    fn save(&self, name: &str, ck: &Checkpoint<f64>) -> Result<()> {
        ck.write(&self.dir.join(name))
    }
}

/// Train on `train`, validating on `val` after each epoch. With `out`, the
/// log and the last, best and final checkpoints are written there. Epoch
/// `e` shuffles and flips with its own random stream, so a resumed run
/// continues exactly as an uninterrupted one would.
pub fn fit(pc: &PipelineConfig, train: &[Sample], val: &[Sample], out: Option<&Path>) -> Result<FitReport> {
    if train.is_empty() {
        return Err(invalid!("no training images"));
    }
    let cfg = &pc.detector;
    let t = &pc.train;
    let (mut params, mut opt, first_epoch, mut best) = match &pc.resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            let params = load_model(&ck, cfg)?;
            let mut opt = Optimizer::load_from(&ck);
            opt.momentum = t.momentum;
            let epoch = ck.scalar(META_EPOCH).ok_or_else(|| invalid!("{} lacks {META_EPOCH}", path.display()))? as usize;
            info!("resuming from {} at epoch {epoch}", path.display());
            (params, opt, epoch, ck.scalar(META_BEST).unwrap_or(f64::INFINITY))
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
            (DetectorParams::init(cfg, &mut rng)?, Optimizer::sgd(t.momentum), 0, f64::INFINITY)
        }
    };
    let mut outputs = out.map(|d| Outputs::open(d, pc.resume.is_some())).transpose()?;
    let mut report = FitReport { records: Vec::new(), step_losses: Vec::new(), first_epoch, params: params.clone() };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in first_epoch..t.max_epoch {
        let lr = poly_lr(t.lr, epoch, t.max_epoch, t.power);
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        rng.set_stream(1 + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        for chunk in order.chunks(t.batch) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut batch = make_batch(&refs, pc.inputs)?;
            if t.flip {
                batch = random_flips(batch, &mut rng);
            }
            match train_step(&mut params, cfg, &batch, &mut opt, lr) {
                Ok(l) => {
                    report.step_losses.push(l);
                    parts.push((l, chunk.len()));
                }
                Err(e @ Error::Numerical(_)) => {
                    if let Some(o) = outputs.as_mut() {
                        o.line(&format!("epoch={epoch} lr={lr} aborted=non_finite_loss"))?;
                    }
                    warn!("epoch {epoch}: {e}; the last checkpoint holds the previous epoch");
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = mean_breakdown(&parts);
        let val_loss = if val.is_empty() { None } else { Some(dataset_loss(&params, pc, val)?) };
        let rec = EpochRecord { epoch, lr, steps: parts.len(), train: train_loss, val: val_loss };
        info!("{}", rec.line());
        let score = val_loss.map_or(train_loss.total, |v| v.total);
        let improved = score < best;
        if improved {
            best = score;
        }
        if let Some(o) = outputs.as_mut() {
            o.line(&rec.line())?;
            let ck = training_checkpoint(&params, cfg, &opt, epoch + 1, best);
            o.save(LAST_CHECKPOINT, &ck)?;
            if improved {
                o.save(BEST_CHECKPOINT, &ck)?;
            }
        }
        report.records.push(rec);
    }
    if let Some(o) = outputs.as_ref() {
        o.save(FINAL_CHECKPOINT, &training_checkpoint(&params, cfg, &opt, t.max_epoch.max(first_epoch), best))?;
    }
    report.params = params;
    Ok(report)
}
