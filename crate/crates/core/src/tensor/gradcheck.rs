//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Parameters, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor: errors on near-zero gradients are measured
    /// absolutely below this magnitude.
    pub floor: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4, floor: 1e-6, max_coords: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates left out because a piecewise op (ReLU, clamp, min/max,
    /// argmax) switched branch inside the `±eps` stencil, where central
    /// differences do not measure the derivative.
    pub skipped: usize,
    pub passed: bool,
}

impl GradCheckReport {
    fn new() -> Self {
        Self { max_rel_error: 0.0, worst: None, analytic: 0.0, numeric: 0.0, checked: 0, skipped: 0, passed: true }
    }

    /// Pass when every compared coordinate is within tolerance and at least
    /// one was compared whenever any were skipped.
    fn finish(mut self, opts: &GradCheckOptions) -> Self {
        self.passed = self.max_rel_error <= opts.tol && (self.checked > 0 || self.skipped == 0);
        self
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64, opts: &GradCheckOptions) {
        let err = relative_error(analytic, numeric, opts.floor);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), idx));
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    /// Combine reports of several checks.
    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.analytic = other.analytic;
            self.numeric = other.numeric;
        }
        self.passed &= other.passed;
        self
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn coords(n: usize, opts: &GradCheckOptions) -> Vec<usize> {
    match opts.max_coords {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

fn scalar_output<T: Scalar>(tape: &Tape<T>, out: Var) -> Result<f64> {
    if tape.value(out).len() != 1 {
        return Err(invalid!("gradient check needs a scalar function, got shape {:?}", tape.shape(out)));
    }
    let v = tape.scalar(out).as_f64();
    if !v.is_finite() {
        return Err(Error::Numerical("non-finite function value during gradient check".into()));
    }
    Ok(v)
}

/// Compare the tape gradient of scalar `f` at `x` with central differences.
/// Coordinates whose stencil crosses a kink are counted in
/// [`GradCheckReport::skipped`] instead of compared.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(invalid!("eps must be positive"));
    }
    let eval = |t: &Tensor<T>| -> Result<(f64, Vec<u32>)> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        Ok((scalar_output(&tape, out)?, tape.branch_pattern()))
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().requires_grad());
    let out = f(&mut tape, xv)?;
    scalar_output(&tape, out)?;
    tape.backward(out)?;
    let zeros = vec![T::zero(); x.numel()];
    let analytic = tape.grad(xv).unwrap_or(&zeros).to_vec();
    let pattern = tape.branch_pattern();

    let mut report = GradCheckReport::new();
    let mut probe = x.clone();
    for i in coords(x.numel(), opts) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::lit(opts.eps);
        let (plus, pp) = eval(&probe)?;
        probe.data_mut()[i] = orig - T::lit(opts.eps);
        let (minus, pm) = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if pp != pattern || pm != pattern {
            report.skipped += 1;
            continue;
        }
        report.record("x", i, analytic[i].as_f64(), (plus - minus) / (2.0 * opts.eps), opts);
    }
    Ok(report.finish(opts))
}

/// Same check over every parameter of a model. `f` must bind the model's
/// tensors with [`Tape::param`] under `prefix` and return a scalar.
pub fn grad_check_params<T, M, F>(model: &mut M, prefix: &str, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    M: Parameters<T>,
    F: Fn(&mut Tape<T>, &M) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(invalid!("eps must be positive"));
    }
    let eval = |m: &M| -> Result<(f64, Vec<u32>)> {
        let mut tape = Tape::new();
        let out = f(&mut tape, m)?;
        Ok((scalar_output(&tape, out)?, tape.branch_pattern()))
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, model)?;
    scalar_output(&tape, out)?;
    tape.backward(out)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit(prefix, &mut |name, t| {
        let g = match tape.param_grad(name) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        };
        analytic.push((name.to_string(), g));
    });

    // Flatten all coordinates so sampling covers the whole model uniformly.
    let offsets: Vec<usize> = analytic
        .iter()
        .scan(0, |acc, (_, g)| {
            let start = *acc;
            *acc += g.len();
            Some(start)
        })
        .collect();
    let total: usize = analytic.iter().map(|(_, g)| g.len()).sum();

    let pattern = tape.branch_pattern();
    let mut report = GradCheckReport::new();
    for flat in coords(total, opts) {
        let which = offsets.partition_point(|&o| o <= flat) - 1;
        let (name, grads) = &analytic[which];
        let idx = flat - offsets[which];
        let mut orig = T::zero();
        model.visit(prefix, &mut |n, t| {
            if n == name {
                orig = t.data()[idx];
            }
        });
        let at = |v: T, model: &mut M| {
            model.visit_mut(prefix, &mut |n, t| {
                if n == name {
                    t.data_mut()[idx] = v;
                }
            })
        };
        at(orig + T::lit(opts.eps), model);
        let plus = eval(model);
        at(orig - T::lit(opts.eps), model);
        let minus = eval(model);
        at(orig, model);
        let ((plus, pp), (minus, pm)) = (plus?, minus?);
        if pp != pattern || pm != pattern {
            report.skipped += 1;
            continue;
        }
        report.record(name, idx, grads[idx], (plus - minus) / (2.0 * opts.eps), opts);
    }
    Ok(report.finish(opts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let rep = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed);
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
        assert_eq!(rep.checked, 2);
    }

    #[test]
    fn wrong_backward_is_caught() {
        let x = Tensor::new(vec![3], vec![0.3f64, -1.2, 2.0]).unwrap();
        let rep = grad_check(
            |t, x| {
                // cube forward with a deliberately wrong derivative 2x
                let y = t.custom_unary(
                    x,
                    |v| v.iter().map(|a| a * a * a).collect(),
                    Box::new(|x, _, g| x.iter().zip(g).map(|(a, g)| 2.0 * a * g).collect()),
                )?;
                Ok(t.sum(y))
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!rep.passed);
        assert!(rep.max_rel_error > 0.1);
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let x = Tensor::new(vec![4], vec![-0.5f64, 0.25, 1.5, -2.0]).unwrap();
        let rep = grad_check(
            |t, x| {
                let r = t.relu(x);
                let s = t.mul(r, r)?;
                Ok(t.sum(s))
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn stencils_across_a_kink_are_skipped() {
        // At 0 the ReLU's subgradient is 0 but the central difference is 0.5.
        let x = Tensor::new(vec![3], vec![0.0f64, 1.0, -1.0]).unwrap();
        let rep = grad_check(
            |t, x| {
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!((rep.checked, rep.skipped), (2, 1));
    }

    #[test]
    fn all_skipped_is_not_a_pass() {
        let x = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let rep = grad_check(
            |t, x| {
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!rep.passed);
    }

    #[test]
    fn non_scalar_is_rejected() {
        let x = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        assert!(grad_check(|_, x| Ok(x), &x, &GradCheckOptions::default()).is_err());
    }

    #[test]
    fn subsampling_limits_work() {
        let x = Tensor::from_fn(&[50], |i| i as f64 * 0.1);
        let opts = GradCheckOptions { max_coords: Some(7), ..Default::default() };
        let rep = grad_check(|t, x| Ok(t.sum(x)), &x, &opts).unwrap();
        assert_eq!(rep.checked, 7);
        assert!(rep.passed);
    }
}
