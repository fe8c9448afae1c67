//! Poly learning-rate schedule, SGD with optional momentum, and one
//! optimization step.

use std::collections::BTreeMap;

use crate::boxes::{Detection, GroundTruthBox};
use crate::detector::head::{assign_targets, decode, level_shapes, Assignment};
use crate::detector::loss::{detection_loss, LossBreakdown};
use crate::detector::nms::nms;
use crate::detector::{detector_forward, DetectorConfig, DetectorParams};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Parameters, Tape, Tensor};

pub const BASE_LR: f64 = 0.01;
pub const POLY_POWER: f64 = 0.9;

/// `base · (1 − epoch / max_epoch)^power`, zero from `max_epoch` on.
pub fn poly_lr(base: f64, epoch: usize, max_epoch: usize, power: f64) -> f64 {
    if max_epoch == 0 || epoch >= max_epoch {
        return 0.0;
    }
    base * (1.0 - epoch as f64 / max_epoch as f64).powf(power)
}

/// SGD: `v ← μ·v + g`, `w ← w − lr·v`. With `μ = 0` this is plain SGD.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Optimizer<T> {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<T>>,
}

const VELOCITY_PREFIX: &str = "optimizer.velocity";

impl<T: Scalar> Optimizer<T> {
    pub fn sgd(momentum: f64) -> Self {
        Self { momentum, velocity: BTreeMap::new() }
    }

    /// Apply and clear the gradients accumulated in `params`.
    pub fn step<M: Parameters<T> + ?Sized>(&mut self, params: &mut M, lr: f64) {
        let mu = T::lit(self.momentum);
        let lr = T::lit(lr);
        let velocity = &mut self.velocity;
        params.visit_mut("", &mut |name, t| {
            let Some(g) = t.grad().map(<[T]>::to_vec) else { return };
            let v = velocity.entry(name.to_string()).or_insert_with(|| vec![T::zero(); g.len()]);
            for ((w, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = mu * *vi + *gi;
                *w -= lr * *vi;
            }
            t.zero_grad();
        });
    }

    pub fn save_into(&self, ck: &mut Checkpoint<T>) {
        for (name, v) in &self.velocity {
            let t = Tensor::new(vec![v.len()], v.clone()).expect("flat shape");
            ck.insert(&format!("{VELOCITY_PREFIX}.{name}"), t);
        }
        ck.set_scalar("optimizer.momentum", self.momentum);
    }

    pub fn load_from(ck: &Checkpoint<T>) -> Self {
        let prefix = format!("{VELOCITY_PREFIX}.");
        let velocity = ck
            .tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&prefix).map(|n| (n.to_string(), t.data().to_vec())))
            .collect();
        Self { momentum: ck.scalar("optimizer.momentum").unwrap_or(0.0), velocity }
    }
}

/// A batch of image pairs with their boxes. Images are `[N, 3, H, W]`.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub sa: Tensor<T>,
    pub se: Option<Tensor<T>>,
    pub gts: Vec<Vec<GroundTruthBox>>,
}

impl<T: Scalar> Batch<T> {
    pub fn height(&self) -> usize {
        self.sa.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.sa.shape()[3]
    }

    pub fn assignments(&self, cfg: &DetectorConfig) -> Vec<Vec<Assignment>> {
        let levels = level_shapes(&cfg.head_levels(), self.height(), self.width());
        self.gts.iter().map(|g| assign_targets(g, &cfg.anchors, &levels, self.height(), self.width())).collect()
    }
}

/// Forward, loss, backward and one optimizer update.
pub fn train_step<T: Scalar>(
    params: &mut DetectorParams<T>,
    cfg: &DetectorConfig,
    batch: &Batch<T>,
    opt: &mut Optimizer<T>,
    lr: f64,
) -> Result<LossBreakdown> {
    if batch.sa.shape().len() != 4 || batch.gts.len() != batch.sa.shape()[0] {
        return Err(invalid!("batch has {} annotation lists for images {:?}", batch.gts.len(), batch.sa.shape()));
    }
    let mut tape = Tape::new();
    let sa = tape.leaf(&batch.sa);
    let se = batch.se.as_ref().map(|t| tape.leaf(t));
    let raw = detector_forward(&mut tape, params, cfg, sa, se)?;
    let loss = detection_loss(&mut tape, &raw, &batch.assignments(cfg), cfg)?;
    let breakdown = loss.breakdown(&tape);
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {breakdown:?}")));
    }
    tape.backward(loss.total)?;
    params.zero_grads();
    params.collect_grads("", &tape);
    opt.step(params, lr);
    Ok(breakdown)
}

/// Loss without an update.
pub fn evaluate_loss<T: Scalar>(params: &DetectorParams<T>, cfg: &DetectorConfig, batch: &Batch<T>) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let sa = tape.leaf(&batch.sa);
    let se = batch.se.as_ref().map(|t| tape.leaf(t));
    let raw = detector_forward(&mut tape, params, cfg, sa, se)?;
    Ok(detection_loss(&mut tape, &raw, &batch.assignments(cfg), cfg)?.breakdown(&tape))
}

/// Decoded, suppressed detections for every image of a batch.
pub fn predict<T: Scalar>(
    params: &DetectorParams<T>,
    cfg: &DetectorConfig,
    sa: &Tensor<T>,
    se: Option<&Tensor<T>>,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    let mut tape = Tape::new();
    let sav = tape.leaf(sa);
    let sev = se.map(|t| tape.leaf(t));
    let raw = detector_forward(&mut tape, params, cfg, sav, sev)?;
    let (n, h, w) = (sa.shape()[0], sa.shape()[2], sa.shape()[3]);
    let mut out = Vec::with_capacity(n);
    for img in 0..n {
        let per_level: Vec<(usize, Vec<f64>)> = raw
            .iter()
            .map(|&(level, v)| {
                let vals = tape.value(v);
                let chunk = vals.len() / n;
                (level, vals[img * chunk..(img + 1) * chunk].iter().map(|x| x.as_f64()).collect())
            })
            .collect();
        let refs: Vec<(usize, &[f64])> = per_level.iter().map(|(l, v)| (*l, v.as_slice())).collect();
        let dets = decode(&refs, &cfg.anchors, cfg.num_classes, h, w, conf_threshold)?;
        out.push(nms(&dets, nms_iou));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(poly_lr(BASE_LR, 0, 50, POLY_POWER), 0.01);
        assert_eq!(poly_lr(BASE_LR, 50, 50, POLY_POWER), 0.0);
        let mid = poly_lr(BASE_LR, 25, 50, POLY_POWER);
        assert!((mid - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((mid - 0.005359).abs() < 1e-6);
    }

    #[test]
    fn momentum_accumulates() {
        let mut t = crate::ssa::SsaParams::<f64>::zeros(&crate::ssa::SsaConfig::new(1, 2, 2));
        t.w_k.accumulate_grad(&[1.0]);
        let mut opt = Optimizer::sgd(0.5);
        opt.step(&mut t, 0.1);
        assert_eq!(t.w_k.data(), &[-0.1]);
        assert!(t.w_k.grad().is_none());
        t.w_k.accumulate_grad(&[1.0]);
        opt.step(&mut t, 0.1);
        assert!((t.w_k.data()[0] - (-0.1 - 0.15)).abs() < 1e-15);
    }
}
