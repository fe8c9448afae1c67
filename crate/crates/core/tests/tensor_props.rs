//! Tape operations against nested-loop references, plus algebraic
//! properties and gradient checks of composite graphs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2adet::tensor::{grad_check, GradCheckOptions, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, depthwise: bool) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let xa = |b: usize, ch: usize, i: isize, j: isize| {
        if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
            0.0
        } else {
            x.data()[((b * c + ch) * h + i as usize) * wd + j as usize]
        }
    };
    let mut out = Vec::new();
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    let chans: Vec<usize> = if depthwise { vec![oc] } else { (0..c).collect() };
                    for (wc, &ch) in chans.iter().enumerate() {
                        for ki in 0..k {
                            for kj in 0..k {
                                let yi = (i * stride + ki) as isize - pad as isize;
                                let xj = (j * stride + kj) as isize - pad as isize;
                                let wv = w.data()[((oc * w.shape()[1] + wc) * k + ki) * k + kj];
                                s += wv * xa(b, ch, yi, xj);
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::<f64>::randn(&[4, 7], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
    let c = tape.matmul(av, bv).unwrap();
    let mut want = vec![0.0; 12];
    for i in 0..4 {
        for j in 0..3 {
            for k in 0..7 {
                want[i * 3 + j] += a.data()[i * 7 + k] * b.data()[k * 3 + j];
            }
        }
    }
    assert!(close(tape.value(c), &want, 1e-12));
}

#[test]
fn backward_is_deterministic() {
    let mut r = rng(2);
    let x = Tensor::<f64>::randn(&[2, 3, 6, 6], 1.0, &mut r).requires_grad();
    let w = Tensor::<f64>::randn(&[4, 3, 3, 3], 0.3, &mut r).requires_grad();
    let run = || {
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
        let y = tape.conv2d(xv, wv, 2, 1).unwrap();
        let y = tape.sigmoid(y);
        let s = tape.softmax(y, 1).unwrap();
        let l = tape.sum(s);
        let l2 = tape.mul(l, l).unwrap();
        tape.backward(l2).unwrap();
        (tape.grad(xv).unwrap().to_vec(), tape.grad(wv).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn composite_graph_passes_gradient_check() {
    let opts = GradCheckOptions::default();
    for seed in 0..20 {
        let mut r = rng(seed);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 0.4, &mut r);
        let dw = Tensor::<f64>::randn(&[3, 1, 3, 3], 0.4, &mut r);
        let m = Tensor::<f64>::randn(&[5, 4], 0.5, &mut r);
        let x = Tensor::<f64>::randn(&[1, 2, 5, 4], 1.0, &mut r);
        let report = grad_check(
            |t, xv| {
                let (wv, dv, mv) = (t.leaf(&w), t.leaf(&dw), t.leaf(&m));
                let y = t.conv2d(xv, wv, 1, 1)?;
                let y = t.depthwise_conv2d(y, dv, 1, 1)?;
                let y = t.sigmoid(y);
                let y = t.reshape(y, &[15, 4])?;
                let mt = t.transpose(mv)?;
                let z = t.matmul(y, mt)?;
                let z = t.softmax(z, 1)?;
                let e = t.exp(y);
                let p = t.mul(e, e)?;
                let (a, b) = (t.sum(z), t.mean(p));
                let ab = t.mul(a, b)?;
                t.add(ab, b)
            },
            &x,
            &opts,
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(seed in 0u64..100_000, rows in 1usize..6, cols in 1usize..9, c in -50.0f64..50.0) {
        let x = Tensor::<f64>::uniform(&[rows, cols], -20.0, 20.0, &mut rng(seed));
        let shifted = x.map(|v| v + c);
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(&x), tape.leaf(&shifted));
        let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
        let (va, vb) = (tape.value(sa).to_vec(), tape.value(sb).to_vec());
        for r in 0..rows {
            let s: f64 = va[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
        for (p, q) in va.iter().zip(&vb) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
    }

    #[test]
    fn single_precision_softmax_sums_to_one(seed in 0u64..100_000, cols in 1usize..40) {
        let x = Tensor::<f32>::uniform(&[3, cols], -10.0, 10.0, &mut rng(seed));
        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let s = tape.softmax(a, 1).unwrap();
        for r in tape.value(s).chunks(cols) {
            prop_assert!((r.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn convolutions_match_nested_loops(
        seed in 0u64..100_000, c in 1usize..4, o in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, pad in 0usize..2,
    ) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[2, c, h, w], 1.0, &mut r);
        let kw = Tensor::<f64>::randn(&[o, c, k, k], 1.0, &mut r);
        let dk = Tensor::<f64>::randn(&[c, 1, k, k], 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, kv, dv) = (tape.leaf(&x), tape.leaf(&kw), tape.leaf(&dk));
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        prop_assert!(close(tape.value(y), &conv_oracle(&x, &kw, stride, pad, false), 1e-12));
        let d = tape.depthwise_conv2d(xv, dv, stride, pad).unwrap();
        prop_assert!(close(tape.value(d), &conv_oracle(&x, &dk, stride, pad, true), 1e-12));
    }

    #[test]
    fn convolution_is_linear_in_its_input(seed in 0u64..100_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[1, 2, 6, 5], 1.0, &mut r);
        let y = Tensor::<f64>::randn(&[1, 2, 6, 5], 1.0, &mut r);
        let kw = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let mix = Tensor::new(vec![1, 2, 6, 5], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let mut tape = Tape::new();
        let kv = tape.leaf(&kw);
        let out: Vec<Vec<f64>> = [&x, &y, &mix]
            .iter()
            .map(|t| {
                let v = tape.leaf(t);
                let c = tape.conv2d(v, kv, 1, 1).unwrap();
                tape.value(c).to_vec()
            })
            .collect();
        let combined: Vec<f64> = out[0].iter().zip(&out[1]).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(close(&out[2], &combined, 1e-10));
    }
}
