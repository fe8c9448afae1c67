//! Spectral-spatial aggregation block.
//!
//! Two token streams `a` (spatial) and `e` (spectral), each `[N, n, d]` on an
//! `h × w` grid, exchange information through cross attention over a joint,
//! spatially reduced key/value set, pass a residual feed-forward layer, are
//! re-weighted by channel and spatial attention, and are projected back into
//! one correction per stream.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::impl_parameters;
use crate::nn::{linear, scaled_normal, tokens_to_map, zeros_param};
use crate::scalar::Scalar;
use crate::tensor::{child, Tape, Tensor, Var};

pub const SAM_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsaConfig {
    pub d: usize,
    pub d_k: usize,
    /// Must equal `d`: attention output is added back onto the stream.
    pub d_v: usize,
    pub r: usize,
    pub ffn_expansion: usize,
    pub sam_reduction: usize,
    pub h: usize,
    pub w: usize,
}

impl SsaConfig {
    pub fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, d_k: d, d_v: d, r: 2, ffn_expansion: 4, sam_reduction: 4, h, w }
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }

    /// Reduced token count per stream.
    pub fn m(&self) -> usize {
        (self.h / self.r) * (self.w / self.r)
    }

    pub fn sam_hidden(&self) -> usize {
        (2 * self.d / self.sam_reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_k == 0 || self.d_v == 0 || self.r == 0 || self.ffn_expansion == 0 || self.sam_reduction == 0 {
            return Err(invalid!("attention dims, r, expansion and reduction must be positive: {self:?}"));
        }
        if self.d_v != self.d {
            return Err(invalid!("d_v = {} must equal d = {} for the residual connection", self.d_v, self.d));
        }
        if self.h == 0 || self.w == 0 || self.h % self.r != 0 || self.w % self.r != 0 {
            return Err(invalid!("token grid {}x{} is not divisible by r = {}", self.h, self.w, self.r));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsaParams<T> {
    pub w_q_a: Tensor<T>,
    pub w_q_e: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub dw_k: Tensor<T>,
    pub dw_v: Tensor<T>,
    pub ffn1_w: Tensor<T>,
    pub ffn1_b: Tensor<T>,
    pub ffn2_w: Tensor<T>,
    pub ffn2_b: Tensor<T>,
    pub sam_fc1_w: Tensor<T>,
    pub sam_fc1_b: Tensor<T>,
    pub sam_fc2_w: Tensor<T>,
    pub sam_fc2_b: Tensor<T>,
    pub sam_conv_w: Tensor<T>,
    pub sam_conv_b: Tensor<T>,
    pub split_a_w: Tensor<T>,
    pub split_a_b: Tensor<T>,
    pub split_e_w: Tensor<T>,
    pub split_e_b: Tensor<T>,
}

impl_parameters!(SsaParams {
    w_q_a, w_q_e, w_k, w_v, dw_k, dw_v, ffn1_w, ffn1_b, ffn2_w, ffn2_b, sam_fc1_w, sam_fc1_b, sam_fc2_w,
    sam_fc2_b, sam_conv_w, sam_conv_b, split_a_w, split_a_b, split_e_w, split_e_b,
});

impl<T: Scalar> SsaParams<T> {
    pub fn zeros(cfg: &SsaConfig) -> Self {
        let (d, dk, dv, r) = (cfg.d, cfg.d_k, cfg.d_v, cfg.r);
        let hidden = dv * cfg.ffn_expansion;
        let sh = cfg.sam_hidden();
        Self {
            w_q_a: zeros_param(&[d, dk]),
            w_q_e: zeros_param(&[d, dk]),
            w_k: zeros_param(&[d, dk]),
            w_v: zeros_param(&[d, dv]),
            dw_k: zeros_param(&[dk, 1, r, r]),
            dw_v: zeros_param(&[dv, 1, r, r]),
            ffn1_w: zeros_param(&[dv, hidden]),
            ffn1_b: zeros_param(&[hidden]),
            ffn2_w: zeros_param(&[hidden, d]),
            ffn2_b: zeros_param(&[d]),
            sam_fc1_w: zeros_param(&[2 * d, sh]),
            sam_fc1_b: zeros_param(&[sh]),
            sam_fc2_w: zeros_param(&[sh, 2 * d]),
            sam_fc2_b: zeros_param(&[2 * d]),
            sam_conv_w: zeros_param(&[1, 2, SAM_KERNEL, SAM_KERNEL]),
            sam_conv_b: zeros_param(&[1]),
            split_a_w: zeros_param(&[2 * d, d]),
            split_a_b: zeros_param(&[d]),
            split_e_w: zeros_param(&[2 * d, d]),
            split_e_b: zeros_param(&[d]),
        }
    }

    /// Random init. Reduction kernels start as r×r averages; the output
    /// projections start small so the block begins close to a no-op.
    pub fn init(cfg: &SsaConfig, rng: &mut impl Rng) -> Self {
        let (d, dk, dv, r) = (cfg.d, cfg.d_k, cfg.d_v, cfg.r);
        let hidden = dv * cfg.ffn_expansion;
        let sh = cfg.sam_hidden();
        let avg = T::lit(1.0 / (r * r) as f64);
        Self {
            w_q_a: scaled_normal(&[d, dk], d, 1.0, rng),
            w_q_e: scaled_normal(&[d, dk], d, 1.0, rng),
            w_k: scaled_normal(&[d, dk], d, 1.0, rng),
            w_v: scaled_normal(&[d, dv], d, 1.0, rng),
            dw_k: Tensor::full(&[dk, 1, r, r], avg).requires_grad(),
            dw_v: Tensor::full(&[dv, 1, r, r], avg).requires_grad(),
            ffn1_w: scaled_normal(&[dv, hidden], dv, 2f64.sqrt(), rng),
            ffn1_b: zeros_param(&[hidden]),
            ffn2_w: scaled_normal(&[hidden, d], hidden, 0.5, rng),
            ffn2_b: zeros_param(&[d]),
            sam_fc1_w: scaled_normal(&[2 * d, sh], 2 * d, 2f64.sqrt(), rng),
            sam_fc1_b: zeros_param(&[sh]),
            sam_fc2_w: scaled_normal(&[sh, 2 * d], sh, 1.0, rng),
            sam_fc2_b: zeros_param(&[2 * d]),
            sam_conv_w: scaled_normal(&[1, 2, SAM_KERNEL, SAM_KERNEL], 2 * SAM_KERNEL * SAM_KERNEL, 1.0, rng),
            sam_conv_b: zeros_param(&[1]),
            split_a_w: scaled_normal(&[2 * d, d], 2 * d, 0.1, rng),
            split_a_b: zeros_param(&[d]),
            split_e_w: scaled_normal(&[2 * d, d], 2 * d, 0.1, rng),
            split_e_b: zeros_param(&[d]),
        }
    }

    /// Exchange the roles of the two streams: query projections and output
    /// projections swap, and the SAM MLP is re-indexed so that it sees the
    /// swapped channel halves in the original order.
    pub fn swapped(&self, cfg: &SsaConfig) -> Self {
        let d = cfg.d;
        let sh = cfg.sam_hidden();
        let swap_rows = |t: &Tensor<T>, cols: usize| {
            let mut out = t.clone();
            let src = t.data();
            let dst = out.data_mut();
            for i in 0..2 * d {
                let j = (i + d) % (2 * d);
                dst[j * cols..(j + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
            }
            out
        };
        let swap_cols = |t: &Tensor<T>, rows: usize| {
            let mut out = t.clone();
            let src = t.data();
            let dst = out.data_mut();
            for row in 0..rows {
                for i in 0..2 * d {
                    dst[row * 2 * d + (i + d) % (2 * d)] = src[row * 2 * d + i];
                }
            }
            out
        };
        Self {
            w_q_a: self.w_q_e.clone(),
            w_q_e: self.w_q_a.clone(),
            sam_fc1_w: swap_rows(&self.sam_fc1_w, sh),
            sam_fc2_w: swap_cols(&self.sam_fc2_w, sh),
            sam_fc2_b: swap_cols(&self.sam_fc2_b, 1),
            split_a_w: swap_rows(&self.split_e_w, d),
            split_a_b: self.split_e_b.clone(),
            split_e_w: swap_rows(&self.split_a_w, d),
            split_e_b: self.split_a_b.clone(),
            ..self.clone()
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, prefix: &str) -> SsaVars {
        let mut p = |name: &str, t: &Tensor<T>| tape.param(&child(prefix, name), t);
        SsaVars {
            w_q_a: p("w_q_a", &self.w_q_a),
            w_q_e: p("w_q_e", &self.w_q_e),
            w_k: p("w_k", &self.w_k),
            w_v: p("w_v", &self.w_v),
            dw_k: p("dw_k", &self.dw_k),
            dw_v: p("dw_v", &self.dw_v),
            ffn1_w: p("ffn1_w", &self.ffn1_w),
            ffn1_b: p("ffn1_b", &self.ffn1_b),
            ffn2_w: p("ffn2_w", &self.ffn2_w),
            ffn2_b: p("ffn2_b", &self.ffn2_b),
            sam_fc1_w: p("sam_fc1_w", &self.sam_fc1_w),
            sam_fc1_b: p("sam_fc1_b", &self.sam_fc1_b),
            sam_fc2_w: p("sam_fc2_w", &self.sam_fc2_w),
            sam_fc2_b: p("sam_fc2_b", &self.sam_fc2_b),
            sam_conv_w: p("sam_conv_w", &self.sam_conv_w),
            sam_conv_b: p("sam_conv_b", &self.sam_conv_b),
            split_a_w: p("split_a_w", &self.split_a_w),
            split_a_b: p("split_a_b", &self.split_a_b),
            split_e_w: p("split_e_w", &self.split_e_w),
            split_e_b: p("split_e_b", &self.split_e_b),
        }
    }
}

/// [`SsaParams`] bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct SsaVars {
    pub w_q_a: Var,
    pub w_q_e: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub dw_k: Var,
    pub dw_v: Var,
    pub ffn1_w: Var,
    pub ffn1_b: Var,
    pub ffn2_w: Var,
    pub ffn2_b: Var,
    pub sam_fc1_w: Var,
    pub sam_fc1_b: Var,
    pub sam_fc2_w: Var,
    pub sam_fc2_b: Var,
    pub sam_conv_w: Var,
    pub sam_conv_b: Var,
    pub split_a_w: Var,
    pub split_a_b: Var,
    pub split_e_w: Var,
    pub split_e_b: Var,
}

/// Spatial- and spectral-stream tokens, each `[N, n, d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamPair {
    pub a: Var,
    pub e: Var,
}

impl StreamPair {
    pub fn swap(self) -> Self {
        Self { a: self.e, e: self.a }
    }
}

fn check_pair<T: Scalar>(tape: &Tape<T>, pair: StreamPair, cfg: &SsaConfig) -> Result<usize> {
    let s = tape.shape(pair.a);
    if s != tape.shape(pair.e) {
        return Err(shape_err!("stream shapes differ: {s:?} vs {:?}", tape.shape(pair.e)));
    }
    if s.len() != 3 || s[1] != cfg.n() || s[2] != cfg.d {
        return Err(shape_err!("stream shape {s:?} does not match [N, {}, {}]", cfg.n(), cfg.d));
    }
    Ok(s[0])
}

/// `[N, n, d, 2]` with the last axis indexing (a, e).
pub fn stack_features<T: Scalar>(tape: &mut Tape<T>, pair: StreamPair) -> Result<Var> {
    let s = tape.shape(pair.a).to_vec();
    if s != tape.shape(pair.e) {
        return Err(shape_err!("stream shapes differ: {s:?} vs {:?}", tape.shape(pair.e)));
    }
    let mut s1 = s.clone();
    s1.push(1);
    let a = tape.reshape(pair.a, &s1)?;
    let e = tape.reshape(pair.e, &s1)?;
    tape.concat(&[a, e], s.len())
}

pub fn unstack_features<T: Scalar>(tape: &mut Tape<T>, f: Var) -> Result<StreamPair> {
    let s = tape.shape(f).to_vec();
    if s.last() != Some(&2) {
        return Err(shape_err!("stacked features need a trailing axis of 2, got {s:?}"));
    }
    let axis = s.len() - 1;
    let parts = tape.split(f, axis, &[1, 1])?;
    let a = tape.reshape(parts[0], &s[..axis])?;
    let e = tape.reshape(parts[1], &s[..axis])?;
    Ok(StreamPair { a, e })
}

/// Project one stream, reduce its token grid by `r`, return `[N, m, c]`.
fn reduce_stream<T: Scalar>(tape: &mut Tape<T>, x: Var, proj: Var, dw: Var, cfg: &SsaConfig) -> Result<Var> {
    let p = linear(tape, x, proj, None)?;
    let map = tokens_to_map(tape, p, cfg.h, cfg.w)?;
    let red = tape.depthwise_conv2d(map, dw, cfg.r, 0)?;
    crate::nn::map_to_tokens(tape, red)
}

/// Joint keys `[N, 2m, d_k]` and values `[N, 2m, d_v]`: the reduced tokens of
/// stream a followed by those of stream e.
pub fn spatial_reduce<T: Scalar>(tape: &mut Tape<T>, f: Var, cfg: &SsaConfig, v: &SsaVars) -> Result<(Var, Var)> {
    cfg.validate()?;
    let pair = unstack_features(tape, f)?;
    check_pair(tape, pair, cfg)?;
    let ka = reduce_stream(tape, pair.a, v.w_k, v.dw_k, cfg)?;
    let ke = reduce_stream(tape, pair.e, v.w_k, v.dw_k, cfg)?;
    let va = reduce_stream(tape, pair.a, v.w_v, v.dw_v, cfg)?;
    let ve = reduce_stream(tape, pair.e, v.w_v, v.dw_v, cfg)?;
    Ok((tape.concat(&[ka, ke], 1)?, tape.concat(&[va, ve], 1)?))
}

/// `x W + b` where the last axis of `x` (and the rows of `W`) hold the two
/// stream halves of width `d`. Each half is reduced on its own and the two
/// partial products are added, so exchanging the halves changes no bits.
fn halves_linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>, d: usize) -> Result<Var> {
    let last = tape.shape(x).len() - 1;
    let (xa, xe) = (tape.narrow(x, last, 0, d)?, tape.narrow(x, last, d, d)?);
    let (wa, we) = (tape.narrow(w, 0, 0, d)?, tape.narrow(w, 0, d, d)?);
    let ya = linear(tape, xa, wa, None)?;
    let ye = linear(tape, xe, we, None)?;
    let y = tape.add(ya, ye)?;
    match b {
        None => Ok(y),
        Some(b) => {
            let mut bs = vec![1; last];
            bs.push(tape.shape(b).iter().product());
            let b = tape.reshape(b, &bs)?;
            tape.add_broadcast(y, b)
        }
    }
}

/// Softmax attention of `x`'s queries over the joint key set `[k_a; k_e]`,
/// with every sum over keys split into its two stream halves.
fn attend<T: Scalar>(tape: &mut Tape<T>, x: Var, wq: Var, k: Var, val: Var, cfg: &SsaConfig) -> Result<Var> {
    let m = cfg.m();
    let q = linear(tape, x, wq, None)?;
    let scale = T::lit(1.0 / (cfg.d_k as f64).sqrt());
    let mut scores = Vec::with_capacity(2);
    let mut values = Vec::with_capacity(2);
    for half in 0..2 {
        let kh = tape.narrow(k, 1, half * m, m)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(q, kt)?;
        scores.push(tape.scale(s, scale));
        values.push(tape.narrow(val, 1, half * m, m)?);
    }
    let (ma, me) = (tape.max_axis(scores[0], 2)?, tape.max_axis(scores[1], 2)?);
    let top = tape.maximum(ma, me)?;
    let shift = tape.scale(top, -T::one());
    let mut mass = Vec::with_capacity(2);
    let mut weighted = Vec::with_capacity(2);
    for (s, v) in scores.into_iter().zip(values) {
        let z = tape.add_broadcast(s, shift)?;
        let e = tape.exp(z);
        mass.push(tape.mean_axis(e, 2)?);
        weighted.push(tape.matmul(e, v)?);
    }
    // Both halves were averaged over m keys; the 1/m cancels in the ratio.
    let num = tape.add(weighted[0], weighted[1])?;
    let num = tape.scale(num, T::lit(1.0 / m as f64));
    let den = tape.add(mass[0], mass[1])?;
    let shape = tape.shape(num).to_vec();
    let ones = tape.constant(&shape, vec![T::one(); shape.iter().product()])?;
    let den = tape.mul_broadcast(ones, den)?;
    tape.div(num, den)
}

/// Attention output per stream, `[N, n, d_v]`. Queries come from each stream
/// with its own projection; both attend over the joint key set `[N, 2m, d_k]`
/// as laid out by [`spatial_reduce`].
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    pair: StreamPair,
    k: Var,
    val: Var,
    cfg: &SsaConfig,
    v: &SsaVars,
) -> Result<StreamPair> {
    let n = check_pair(tape, pair, cfg)?;
    let ks = tape.shape(k);
    if ks.len() != 3 || ks[0] != n || ks[1] != 2 * cfg.m() || ks[2] != cfg.d_k || tape.shape(val)[..2] != ks[..2] {
        return Err(shape_err!("keys {:?} / values {:?} do not fit {cfg:?}", ks, tape.shape(val)));
    }
    Ok(StreamPair {
        a: attend(tape, pair.a, v.w_q_a, k, val, cfg)?,
        e: attend(tape, pair.e, v.w_q_e, k, val, cfg)?,
    })
}

fn ffn<T: Scalar>(tape: &mut Tape<T>, x: Var, v: &SsaVars) -> Result<Var> {
    let h = linear(tape, x, v.ffn1_w, Some(v.ffn1_b))?;
    let h = tape.relu(h);
    linear(tape, h, v.ffn2_w, Some(v.ffn2_b))
}

/// `x̃ = x + attn`, then `x̄ = x̃ + FFN(x̃)` for both streams with one FFN.
pub fn residual_ffn<T: Scalar>(tape: &mut Tape<T>, input: StreamPair, attn: StreamPair, v: &SsaVars) -> Result<StreamPair> {
    let mut out = [input.a, input.e];
    for (slot, add) in out.iter_mut().zip([attn.a, attn.e]) {
        let t = tape.add(*slot, add)?;
        let f = ffn(tape, t, v)?;
        *slot = tape.add(t, f)?;
    }
    Ok(StreamPair { a: out[0], e: out[1] })
}

fn sam_mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, v: &SsaVars, d: usize) -> Result<Var> {
    let h = halves_linear(tape, x, v.sam_fc1_w, Some(v.sam_fc1_b), d)?;
    let h = tape.relu(h);
    linear(tape, h, v.sam_fc2_w, Some(v.sam_fc2_b))
}

/// Channel then spatial attention on `f: [N, n, 2d]` laid out on the
/// `h × w` grid.
pub fn sam_attention<T: Scalar>(tape: &mut Tape<T>, f: Var, cfg: &SsaConfig, v: &SsaVars) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 || s[1] != cfg.n() || s[2] != 2 * cfg.d {
        return Err(shape_err!("SAM input {s:?} does not match [N, {}, {}]", cfg.n(), 2 * cfg.d));
    }
    let avg = tape.mean_axis(f, 1)?;
    let max = tape.max_axis(f, 1)?;
    let ma = sam_mlp(tape, avg, v, cfg.d)?;
    let mm = sam_mlp(tape, max, v, cfg.d)?;
    let logits = tape.add(ma, mm)?;
    let mc = tape.sigmoid(logits);
    let fc = tape.mul_broadcast(f, mc)?;

    let (fa, fe) = (tape.narrow(fc, 2, 0, cfg.d)?, tape.narrow(fc, 2, cfg.d, cfg.d)?);
    let (mean_a, mean_e) = (tape.mean_axis(fa, 2)?, tape.mean_axis(fe, 2)?);
    let cmean = tape.add(mean_a, mean_e)?;
    let cmean = tape.scale(cmean, T::lit(0.5));
    let cmax = tape.max_axis(fc, 2)?;
    let desc = tape.concat(&[cmean, cmax], 2)?;
    let map = tokens_to_map(tape, desc, cfg.h, cfg.w)?;
    let conv = crate::nn::conv2d_bias(tape, map, v.sam_conv_w, v.sam_conv_b, 1, SAM_KERNEL / 2)?;
    let ms = tape.sigmoid(conv);
    let ms = tape.reshape(ms, &[s[0], s[1], 1])?;
    tape.mul_broadcast(fc, ms)
}

/// Two independent per-token projections `2d → d` of the same input.
pub fn split_project<T: Scalar>(tape: &mut Tape<T>, fs: Var, v: &SsaVars, d: usize) -> Result<StreamPair> {
    Ok(StreamPair {
        a: halves_linear(tape, fs, v.split_a_w, Some(v.split_a_b), d)?,
        e: halves_linear(tape, fs, v.split_e_w, Some(v.split_e_b), d)?,
    })
}

/// Corrections `(a_T, e_T)` for a stream pair, same shapes as the input.
pub fn ssa_forward<T: Scalar>(tape: &mut Tape<T>, pair: StreamPair, cfg: &SsaConfig, v: &SsaVars) -> Result<StreamPair> {
    cfg.validate()?;
    check_pair(tape, pair, cfg)?;
    let f = stack_features(tape, pair)?;
    let (k, val) = spatial_reduce(tape, f, cfg, v)?;
    let attn = cross_attention(tape, pair, k, val, cfg, v)?;
    let bar = residual_ffn(tape, pair, attn, v)?;
    let tilde = tape.concat(&[bar.a, bar.e], 2)?;
    let fs = sam_attention(tape, tilde, cfg, v)?;
    split_project(tape, fs, v, cfg.d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(tape: &mut Tape<f64>, cfg: &SsaConfig, rng: &mut ChaCha8Rng) -> StreamPair {
        let shape = [1, cfg.n(), cfg.d];
        let a = tape.leaf(&Tensor::randn(&shape, 1.0, rng));
        let e = tape.leaf(&Tensor::randn(&shape, 1.0, rng));
        StreamPair { a, e }
    }

    #[test]
    fn config_validation() {
        assert!(SsaConfig::new(4, 4, 4).validate().is_ok());
        assert!(SsaConfig { r: 3, ..SsaConfig::new(4, 4, 4) }.validate().is_err());
        assert!(SsaConfig { d_v: 2, ..SsaConfig::new(4, 4, 4) }.validate().is_err());
    }

    #[test]
    fn stack_round_trip() {
        let cfg = SsaConfig::new(3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let p = pair(&mut tape, &cfg, &mut rng);
        let f = stack_features(&mut tape, p).unwrap();
        assert_eq!(tape.shape(f), &[1, 4, 3, 2]);
        assert_eq!(tape.value(f)[1], tape.value(p.e)[0]);
        let back = unstack_features(&mut tape, f).unwrap();
        assert_eq!(tape.value(back.a), tape.value(p.a));
        assert_eq!(tape.value(back.e), tape.value(p.e));
    }

    #[test]
    fn output_shapes_match_input() {
        let cfg = SsaConfig::new(4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = SsaParams::<f64>::init(&cfg, &mut rng);
        let mut tape = Tape::new();
        let p = pair(&mut tape, &cfg, &mut rng);
        let v = params.bind(&mut tape, "ssa");
        let out = ssa_forward(&mut tape, p, &cfg, &v).unwrap();
        assert_eq!(tape.shape(out.a), tape.shape(p.a));
        assert_eq!(tape.shape(out.e), tape.shape(p.e));
        assert_eq!(params.named("ssa").len(), 20);
    }

    #[test]
    fn zero_split_gives_zero_corrections() {
        let cfg = SsaConfig::new(4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = SsaParams::<f64>::init(&cfg, &mut rng);
        params.split_a_w = Tensor::zeros(&[8, 4]);
        params.split_e_w = Tensor::zeros(&[8, 4]);
        let mut tape = Tape::new();
        let p = pair(&mut tape, &cfg, &mut rng);
        let v = params.bind(&mut tape, "");
        let out = ssa_forward(&mut tape, p, &cfg, &v).unwrap();
        assert!(tape.value(out.a).iter().chain(tape.value(out.e)).all(|&x| x == 0.0));
    }
}
