//! Layer helpers on top of the tape shared by the attention block and the
//! detector.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// `x · w (+ b)` over the last axis of `x`, any leading dims. `w` is
/// `[in, out]`, `b` is `[out]`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    let din = *xs.last().ok_or_else(|| shape_err!("linear on a scalar"))?;
    if ws.len() != 2 || ws[0] != din {
        return Err(shape_err!("linear: input {xs:?} with weight {ws:?}"));
    }
    let rows = xs.iter().product::<usize>() / din.max(1);
    let flat = tape.reshape(x, &[rows, din])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        let b2 = tape.reshape(b, &[1, ws[1]])?;
        y = tape.add_broadcast(y, b2)?;
    }
    let mut out = xs;
    *out.last_mut().unwrap() = ws[1];
    tape.reshape(y, &out)
}

/// Convolution of `[N, C, H, W]` plus a per-output-channel bias `[Co]`.
pub fn conv2d_bias<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = tape.conv2d(x, w, stride, pad)?;
    let co = tape.shape(w)[0];
    let b4 = tape.reshape(b, &[1, co, 1, 1])?;
    tape.add_broadcast(y, b4)
}

/// `[N, C, H, W]` feature map to `[N, H·W, C]` tokens.
pub fn map_to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("expected a 4-D feature map, got {s:?}"));
    }
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    tape.permute(flat, &[0, 2, 1])
}

/// `[N, n, C]` tokens back to a `[N, C, h, w]` map.
pub fn tokens_to_map<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(shape_err!("cannot view tokens {s:?} as a {h}x{w} grid"));
    }
    let p = tape.permute(x, &[0, 2, 1])?;
    tape.reshape(p, &[s[0], s[2], h, w])
}

/// Normal init with standard deviation `gain / sqrt(fan_in)`.
pub fn scaled_normal<T: Scalar>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), rng).requires_grad()
}

pub fn zeros_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).requires_grad()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_per_row_product() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let w = tape.leaf(&Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap());
        let b = tape.leaf(&Tensor::new(vec![1], vec![0.5]).unwrap());
        let y = linear(&mut tape, x, w, Some(b)).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 1]);
        assert!(tape.value(y).iter().all(|&v| v == -0.5));
    }

    #[test]
    fn token_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_fn(&[2, 3, 2, 4], |i| i as f64));
        let t = map_to_tokens(&mut tape, x).unwrap();
        assert_eq!(tape.shape(t), &[2, 8, 3]);
        // token (y=1, x=2) of image 1, channel 2
        assert_eq!(tape.value(t)[(8 + 6) * 3 + 2], tape.value(x)[((3 + 2) * 2 + 1) * 4 + 2]);
        let back = tokens_to_map(&mut tape, t, 2, 4).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }
}
