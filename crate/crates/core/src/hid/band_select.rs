//! Optimal neighborhood reconstruction band selection.
//!
//! The band axis is split into `k` contiguous segments, each with one
//! representative band. Every band in a segment is reconstructed from its
//! representative by the scalar least-squares fit `w = <x_b, x_r> / <x_r, x_r>`,
//! and the partition plus representatives minimizing the total squared
//! residual is found exactly by dynamic programming over segment boundaries.

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Num, Zero};

use crate::cube_io::HyperCube;
use crate::error::{invalid, Result};

/// Arithmetic used for the reconstruction objective. Floating-point types
/// give the fast path; [`BigRational`] evaluates the objective exactly.
pub trait BandScalar: Num + Clone + PartialOrd + Debug {
    fn from_sample(x: f32) -> Self;
}

impl BandScalar for f64 {
    fn from_sample(x: f32) -> Self {
        x as f64
    }
}

impl BandScalar for f32 {
    fn from_sample(x: f32) -> Self {
        x
    }
}

impl BandScalar for BigRational {
    fn from_sample(x: f32) -> Self {
        BigRational::from_float(x).unwrap_or_else(|| BigRational::from_integer(BigInt::zero()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSelection<T> {
    /// `k + 1` strictly increasing indices from 0 to B.
    pub segment_boundaries: Vec<usize>,
    /// One band per segment, `representatives[i]` inside segment `i`.
    pub representatives: Vec<usize>,
    /// Total squared reconstruction residual.
    pub objective_value: T,
}

/// Gram matrix `G[i][j] = <x_i, x_j>` of the flattened band planes.
pub fn band_gram<T: BandScalar>(cube: &HyperCube) -> Vec<Vec<T>> {
    let planes: Vec<Vec<T>> = (0..cube.bands())
        .map(|b| cube.plane(b).iter().map(|&v| T::from_sample(v)).collect())
        .collect();
    let bands = cube.bands();
    let mut g = vec![vec![T::zero(); bands]; bands];
    for i in 0..bands {
        for j in i..bands {
            let mut s = T::zero();
            for (a, b) in planes[i].iter().zip(&planes[j]) {
                s = s + a.clone() * b.clone();
            }
            g[i][j] = s.clone();
            g[j][i] = s;
        }
    }
    g
}

/// `residuals[b][r]`: squared error of reconstructing band `b` from band `r`.
pub fn reconstruction_residuals<T: BandScalar>(gram: &[Vec<T>]) -> Vec<Vec<T>> {
    let n = gram.len();
    let mut res = vec![vec![T::zero(); n]; n];
    for b in 0..n {
        for r in 0..n {
            let grr = &gram[r][r];
            let v = if grr.is_zero() {
                gram[b][b].clone()
            } else {
                gram[b][b].clone() - gram[b][r].clone() * gram[b][r].clone() / grr.clone()
            };
            // Float round-off can dip just below zero.
            res[b][r] = if v < T::zero() { T::zero() } else { v };
        }
    }
    res
}

/// Best representative and cost for every segment `[i, j)`, indexed
/// `[i][j]` with `j > i`.
fn segment_costs<T: BandScalar>(res: &[Vec<T>]) -> Vec<Vec<Option<(T, usize)>>> {
    let n = res.len();
    let mut table = vec![vec![None; n + 1]; n];
    for i in 0..n {
        // acc[r - i] = sum of residual(b, r) for b in [i, j)
        let mut acc: Vec<T> = vec![T::zero(); n - i];
        for j in (i + 1)..=n {
            let b = j - 1;
            for (off, a) in acc.iter_mut().enumerate() {
                *a = a.clone() + res[b][i + off].clone();
            }
            let mut best: Option<(T, usize)> = None;
            for r in i..j {
                let c = &acc[r - i];
                if best.as_ref().map_or(true, |(bc, _)| c < bc) {
                    best = Some((c.clone(), r));
                }
            }
            table[i][j] = best;
        }
    }
    table
}

/// Select `k` bands of `cube` by exact contiguous-segment reconstruction.
///
/// Among optimal solutions the lexicographically smallest boundary sequence
/// wins, then the smallest representatives.
pub fn select_bands<T: BandScalar>(cube: &HyperCube, k: usize) -> Result<BandSelection<T>> {
    let bands = cube.bands();
    if k == 0 || k > bands {
        return Err(invalid!("band selection needs 1 <= k <= {bands}, got k = {k}"));
    }
    let res = reconstruction_residuals(&band_gram::<T>(cube));
    let seg = segment_costs(&res);
    let cost = |i: usize, j: usize| seg[i][j].as_ref().expect("non-empty segment");

    // suffix[m][i]: best cost of covering [i, B) with m segments, and the
    // smallest first boundary achieving it.
    let mut suffix: Vec<Vec<Option<(T, usize)>>> = vec![vec![None; bands + 1]; k + 1];
    for i in 0..bands {
        suffix[1][i] = Some((cost(i, bands).0.clone(), bands));
    }
    for m in 2..=k {
        for i in 0..bands {
            let mut best: Option<(T, usize)> = None;
            // Leave at least m-1 bands for the remaining segments.
            for j in (i + 1)..=(bands + 1 - m) {
                let Some((rest, _)) = &suffix[m - 1][j] else { continue };
                let total = cost(i, j).0.clone() + rest.clone();
                if best.as_ref().map_or(true, |(b, _)| total < *b) {
                    best = Some((total, j));
                }
            }
            suffix[m][i] = best;
        }
    }

    let (objective_value, _) = suffix[k][0].clone().expect("k <= B leaves a feasible partition");
    let mut boundaries = vec![0];
    let mut representatives = Vec::with_capacity(k);
    let mut start = 0;
    for m in (1..=k).rev() {
        let (_, next) = suffix[m][start].as_ref().expect("feasible suffix");
        representatives.push(cost(start, *next).1);
        boundaries.push(*next);
        start = *next;
    }
    Ok(BandSelection { segment_boundaries: boundaries, representatives, objective_value })
}
