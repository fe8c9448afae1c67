//! Finite-difference checks over every differentiable op and neural module
//! at small shapes. Used by the `gradcheck` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};

/// One named check and its outcome.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

type Head = Tensor<f64>;

/// Contract an output with a fixed random tensor so every output element
/// contributes a gradient of order one.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, head: &Head) -> Result<Var> {
    let w = tape.constant(tape.shape(y).to_vec().as_slice(), head.data().to_vec())?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Random values with magnitude at least `gap`, so piecewise ops are probed
/// away from their kinks.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(gap..1.5);
        if rng.gen_bool(0.5) { v } else { -v }
    })
}

struct Suite<'a> {
    rng: ChaCha8Rng,
    opts: GradCheckOptions,
    out: &'a mut Vec<CaseResult>,
}

impl Suite<'_> {
    fn randn(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut self.rng)
    }

    /// Check `op` with respect to `x`, summed against a random head of the
    /// output's shape.
    fn unary<F>(&mut self, name: &str, x: Tensor<f64>, op: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        let mut probe = Tape::new();
        let xv = probe.leaf(&x);
        let y = op(&mut probe, xv)?;
        let head = self.randn(probe.shape(y));
        let report = grad_check(
            |t, x| {
                let y = op(t, x)?;
                weighted_sum(t, y, &head)
            },
            &x,
            &self.opts,
        )?;
        self.out.push(CaseResult { name: name.to_string(), report });
        Ok(())
    }

    /// Check a binary op with respect to each operand in turn.
    fn binary<F>(&mut self, name: &str, a: Tensor<f64>, b: Tensor<f64>, op: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
    {
        let b_const = b.clone();
        self.unary(&format!("{name}/lhs"), a.clone(), |t, x| {
            let bv = t.constant(b_const.shape(), b_const.data().to_vec())?;
            op(t, x, bv)
        })?;
        self.unary(&format!("{name}/rhs"), b, |t, x| {
            let av = t.constant(a.shape(), a.data().to_vec())?;
            op(t, av, x)
        })
    }
}

/// Every tape op, each on fresh random inputs drawn from `seed`.
pub fn op_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    let mut s = Suite { rng: ChaCha8Rng::seed_from_u64(seed), opts: *opts, out: &mut out };

    let (a, b) = (s.randn(&[3, 4]), s.randn(&[3, 4]));
    s.binary("add", a.clone(), b.clone(), |t, x, y| t.add(x, y))?;
    s.binary("sub", a.clone(), b.clone(), |t, x, y| t.sub(x, y))?;
    s.binary("mul", a.clone(), b.clone(), |t, x, y| t.mul(x, y))?;
    let den = away_from_zero(&[3, 4], 0.5, &mut s.rng);
    s.binary("div", a.clone(), den, |t, x, y| t.div(x, y))?;
    // Separate the operands so no pair ties within eps.
    let b_far = b.map(|v| v + 0.05);
    s.binary("minimum", a.clone(), b_far.clone(), |t, x, y| t.minimum(x, y))?;
    s.binary("maximum", a.clone(), b_far, |t, x, y| t.maximum(x, y))?;

    let x = s.randn(&[2, 3, 4]);
    let row = s.randn(&[1, 3, 1]);
    s.binary("add_broadcast", x.clone(), row.clone(), |t, x, b| t.add_broadcast(x, b))?;
    s.binary("mul_broadcast", x.clone(), row, |t, x, b| t.mul_broadcast(x, b))?;

    s.unary("scale", a.clone(), |t, x| Ok(t.scale(x, -1.7)))?;
    s.unary("add_scalar", a.clone(), |t, x| Ok(t.add_scalar(x, 0.3)))?;
    let kinky = away_from_zero(&[3, 4], 1e-3, &mut s.rng);
    s.unary("relu", kinky.clone(), |t, x| Ok(t.relu(x)))?;
    s.unary("sigmoid", a.clone(), |t, x| Ok(t.sigmoid(x)))?;
    s.unary("exp", a.clone(), |t, x| Ok(t.exp(x)))?;
    let clamp_in = kinky.map(|v| {
        let w = v * 1.6;
        if (w.abs() - 0.8).abs() < 1e-2 { w * 1.1 } else { w }
    });
    s.unary("clamp", clamp_in, |t, x| Ok(t.clamp(x, -0.8, 0.8)))?;
    let targets: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
    s.unary("bce_with_logits", a.clone(), move |t, x| t.bce_with_logits(x, &targets))?;

    let (m1, m2) = (s.randn(&[4, 5]), s.randn(&[5, 3]));
    s.binary("matmul", m1, m2, |t, x, y| t.matmul(x, y))?;
    let (b1, b2) = (s.randn(&[2, 3, 4]), s.randn(&[2, 4, 2]));
    s.binary("matmul_batched", b1, b2, |t, x, y| t.matmul(x, y))?;

    s.unary("permute", x.clone(), |t, x| t.permute(x, &[2, 0, 1]))?;
    s.unary("transpose", x.clone(), |t, x| t.transpose(x))?;
    s.unary("reshape", x.clone(), |t, x| t.reshape(x, &[6, 4]))?;
    let sm = s.randn(&[3, 7]);
    s.unary("softmax", sm.clone(), |t, x| t.softmax(x, 1))?;
    s.unary("softmax_axis0", x.clone(), |t, x| t.softmax(x, 0))?;
    s.unary("sum", x.clone(), |t, x| Ok(t.sum(x)))?;
    s.unary("mean", x.clone(), |t, x| Ok(t.mean(x)))?;
    s.unary("mean_axis", x.clone(), |t, x| t.mean_axis(x, 1))?;
    s.unary("max_axis", x.clone(), |t, x| t.max_axis(x, 2))?;
    let other = s.randn(&[2, 2, 4]);
    s.binary("concat", x.clone(), other, |t, x, y| t.concat(&[x, y], 1))?;
    s.unary("narrow", x.clone(), |t, x| t.narrow(x, 2, 1, 2))?;
    s.unary("split", x.clone(), |t, x| {
        let parts = t.split(x, 2, &[1, 3])?;
        let sq = t.mul(parts[1], parts[1])?;
        let s1 = t.sum(sq);
        let s0 = t.sum(parts[0]);
        t.add(s0, s1)
    })?;

    let img = s.randn(&[1, 2, 6, 6]);
    let k3 = s.randn(&[3, 2, 3, 3]);
    s.binary("conv2d", img.clone(), k3.clone(), |t, x, w| t.conv2d(x, w, 1, 0))?;
    s.binary("conv2d_stride2_pad1", img.clone(), k3, |t, x, w| t.conv2d(x, w, 2, 1))?;
    let dk = s.randn(&[2, 1, 2, 2]);
    s.binary("depthwise_conv2d", img.clone(), dk, |t, x, w| t.depthwise_conv2d(x, w, 2, 0))?;
    s.unary("gather", img.clone(), |t, x| t.gather(x, &[0, 5, 5, 17, 71]))?;
    s.unary("upsample", img, |t, x| t.upsample(x, 2))?;

    let (q, k) = (s.randn(&[4, 3]), s.randn(&[3, 5]));
    s.binary("matmul_softmax_mean", q, k, |t, x, y| {
        let p = t.matmul(x, y)?;
        let sm = t.softmax(p, 1)?;
        let e = t.exp(sm);
        Ok(t.mean(e))
    })?;
    Ok(out)
}

/// Full attention block at n = 16 tokens, d = 4, r = 2: inputs and every
/// parameter.
pub fn ssa_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<CaseResult>> {
    use crate::ssa::{ssa_forward, SsaConfig, SsaParams, StreamPair};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SsaConfig::new(4, 4, 4);
    let mut params = SsaParams::<f64>::init(&cfg, &mut rng);
    // Larger output projections than the init so every path matters.
    params.split_a_w = Tensor::randn(&[8, 4], 0.5, &mut rng).requires_grad();
    params.split_e_w = Tensor::randn(&[8, 4], 0.5, &mut rng).requires_grad();
    let shape = [1, cfg.n(), cfg.d];
    let a = Tensor::randn(&shape, 1.0, &mut rng);
    let e = Tensor::randn(&shape, 1.0, &mut rng);
    let head_a = Tensor::randn(&shape, 1.0, &mut rng);
    let head_e = Tensor::randn(&shape, 1.0, &mut rng);

    let forward = |t: &mut Tape<f64>, p: &SsaParams<f64>, a: Var, e: Var| -> Result<Var> {
        let v = p.bind(t, "ssa");
        let out = ssa_forward(t, StreamPair { a, e }, &cfg, &v)?;
        let la = weighted_sum(t, out.a, &head_a)?;
        let le = weighted_sum(t, out.e, &head_e)?;
        t.add(la, le)
    };

    let mut out = Vec::new();
    let e_c = e.clone();
    let report = grad_check(
        |t, x| {
            let ev = t.leaf(&e_c);
            forward(t, &params, x, ev)
        },
        &a,
        opts,
    )?;
    out.push(CaseResult { name: "ssa/input_a".into(), report });
    let a_c = a.clone();
    let report = grad_check(
        |t, x| {
            let av = t.leaf(&a_c);
            forward(t, &params, av, x)
        },
        &e,
        opts,
    )?;
    out.push(CaseResult { name: "ssa/input_e".into(), report });
    let report = grad_check_params(
        &mut params,
        "ssa",
        |t, p| {
            let av = t.leaf(&a);
            let ev = t.leaf(&e);
            forward(t, p, av, ev)
        },
        opts,
    )?;
    out.push(CaseResult { name: "ssa/params".into(), report });
    Ok(out)
}

/// Coordinates sampled per detector check unless the options say otherwise.
pub const DETECTOR_COORDS: usize = 40;
/// Denominator floor for end-to-end detector checks. Their outputs sum
/// thousands of terms, so central differences resolve gradients only to
/// about 1e-9 absolute.
pub const DETECTOR_FLOOR: f64 = 1e-4;

/// End-to-end checks of the detector at 64×64: backbone with attention
/// blocks and both necks through a weighted sum of the head maps, and the
/// detection loss against a random head map.
pub fn detector_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<CaseResult>> {
    use crate::boxes::GroundTruthBox;
    use crate::detector::head::{assign_targets, level_shapes};
    use crate::detector::{detection_loss, detector_forward, Anchor, DetectorConfig, DetectorParams, Neck};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = GradCheckOptions {
        max_coords: Some(opts.max_coords.unwrap_or(DETECTOR_COORDS)),
        floor: opts.floor.max(DETECTOR_FLOOR),
        ..*opts
    };
    let mut out = Vec::new();
    for neck in [Neck::ThreeLevel, Neck::FusedP3] {
        let mut cfg = DetectorConfig::new(2);
        cfg.neck = neck;
        if neck == Neck::FusedP3 {
            cfg.anchors.truncate(1);
        }
        let mut params = DetectorParams::<f64>::init(&cfg, &mut rng)?;
        let sa = Tensor::randn(&[1, 3, 64, 64], 1.0, &mut rng);
        let se = Tensor::randn(&[1, 3, 64, 64], 1.0, &mut rng);
        let heads: Vec<Tensor<f64>> = cfg
            .head_levels()
            .iter()
            .map(|&l| {
                let side = 64 >> l;
                Tensor::randn(&[1, cfg.anchors_at(l).len() * cfg.outputs_per_anchor(), side, side], 1.0, &mut rng)
            })
            .collect();
        let forward = |t: &mut Tape<f64>, p: &DetectorParams<f64>, a: Var, e: Var| -> Result<Var> {
            let raw = detector_forward(t, p, &cfg, a, Some(e))?;
            let mut acc = None;
            for ((_, y), h) in raw.iter().zip(&heads) {
                let term = weighted_sum(t, *y, h)?;
                acc = Some(match acc {
                    None => term,
                    Some(prev) => t.add(prev, term)?,
                });
            }
            Ok(acc.expect("at least one head"))
        };
        let tag = match neck {
            Neck::ThreeLevel => "three_level",
            Neck::FusedP3 => "fused_p3",
        };
        let se_c = se.clone();
        let report = grad_check(
            |t, x| {
                let ev = t.leaf(&se_c);
                forward(t, &params, x, ev)
            },
            &sa,
            &sampled,
        )?;
        out.push(CaseResult { name: format!("detector/{tag}/input_sa"), report });
        let report = grad_check_params(
            &mut params,
            "",
            |t, p| {
                let av = t.leaf(&sa);
                let ev = t.leaf(&se);
                forward(t, p, av, ev)
            },
            &sampled,
        )?;
        out.push(CaseResult { name: format!("detector/{tag}/params"), report });
    }

    let mut cfg = DetectorConfig::new(3);
    cfg.anchors = vec![
        Anchor { width: 12.0, height: 10.0, level: 3 },
        Anchor { width: 20.0, height: 24.0, level: 3 },
        Anchor { width: 30.0, height: 30.0, level: 4 },
    ];
    let gts: Vec<GroundTruthBox> = (0..4)
        .map(|i| GroundTruthBox {
            class_id: i % 3,
            cx: rng.gen_range(0.15..0.85),
            cy: rng.gen_range(0.15..0.85),
            w: rng.gen_range(0.1..0.4),
            h: rng.gen_range(0.1..0.4),
        })
        .collect();
    let levels = level_shapes(&cfg.head_levels(), 32, 32);
    let assignments = vec![assign_targets(&gts, &cfg.anchors, &levels, 32, 32), Vec::new()];
    let per = cfg.outputs_per_anchor();
    let raw3 = Tensor::randn(&[2, 2 * per, 4, 4], 1.0, &mut rng);
    let raw4 = Tensor::randn(&[2, per, 2, 2], 1.0, &mut rng);
    let loss = |t: &mut Tape<f64>, r3: Var, r4: Var| -> Result<Var> {
        Ok(detection_loss(t, &[(3, r3), (4, r4)], &assignments, &cfg)?.total)
    };
    let r4c = raw4.clone();
    let report = grad_check(
        |t, x| {
            let r4 = t.leaf(&r4c);
            loss(t, x, r4)
        },
        &raw3,
        opts,
    )?;
    out.push(CaseResult { name: "detector/loss/level3".into(), report });
    let report = grad_check(
        |t, x| {
            let r3 = t.leaf(&raw3);
            loss(t, r3, x)
        },
        &raw4,
        opts,
    )?;
    out.push(CaseResult { name: "detector/loss/level4".into(), report });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_one_seed() {
        let opts = GradCheckOptions::default();
        for case in op_suite(11, &opts).unwrap().into_iter().chain(ssa_suite(11, &opts).unwrap()) {
            assert!(case.report.passed, "{}: {:?}", case.name, case.report);
        }
    }
}
