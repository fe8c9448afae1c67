//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and a backward rule.
//! Nodes are only ever appended, so the list is topologically ordered and
//! [`Tape::backward`] is a single reverse sweep.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a user-defined unary op: `(input, output, grad_output) -> grad_input`.
pub type CustomBackward<T> = Box<dyn Fn(&[T], &[T], &[T]) -> Vec<T>>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Clamp(Var, T, T),
    BceWithLogits(Var, Vec<T>),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    SumAll(Var),
    MeanAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    DepthwiseConv2d { x: Var, w: Var, stride: usize, pad: usize },
    Gather(Var, Vec<usize>),
    Upsample(Var, usize),
    Custom(Var, CustomBackward<T>),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph plus, after [`Tape::backward`], the gradients.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).field("params", &self.params.len()).finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Output positions `o` with `0 <= o*stride + k - pad < size`, as a range.
fn valid_range(size: usize, out: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k { (size + pad - k - 1) / stride + 1 } else { 0 };
    lo.min(out)..hi.min(out)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Copy a node's value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// The branch every piecewise op took, in recording order: ReLU side,
    /// clamp region, selected min/max operand, argmax position. Two
    /// evaluations of the same graph with equal patterns lie on one smooth
    /// piece.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).iter().map(|&x| (x > T::zero()) as u32)),
                Op::Clamp(a, lo, hi) => out.extend(self.value(*a).iter().map(|&x| match x {
                    x if x < *lo => 0,
                    x if x > *hi => 2,
                    _ => 1,
                })),
                Op::Minimum(a, b) => out.extend(self.value(*a).iter().zip(self.value(*b)).map(|(x, y)| (y < x) as u32)),
                Op::Maximum(a, b) => out.extend(self.value(*a).iter().zip(self.value(*b)).map(|(x, y)| (y > x) as u32)),
                Op::MaxAxis(_, arg) => out.extend(arg.iter().map(|&i| i as u32)),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Record a leaf holding `t`'s values.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.is_trainable())
    }

    /// Record a constant (never differentiated).
    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(shape_err!("constant of shape {shape:?} given {} values", value.len()));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, false))
    }

    /// Bind a named parameter. Binding the same name twice returns the same node.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Gradient of a parameter bound with [`Tape::param`], after backward.
    pub fn param_grad(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, op, needs))
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let needs = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "minimum", |x, y| if y < x { y } else { x }, Op::Minimum(a, b))
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "maximum", |x, y| if y > x { y } else { x }, Op::Maximum(a, b))
    }

    /// Index map from output positions of `x` to positions of a broadcast
    /// operand `b` (same rank, each dim equal or 1).
    fn broadcast_index(&self, x: Var, b: Var) -> Result<Vec<usize>> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if xs.len() != bs.len() || xs.iter().zip(bs).any(|(&d, &e)| e != d && e != 1) {
            return Err(shape_err!("cannot broadcast {bs:?} onto {xs:?}"));
        }
        let rank = xs.len();
        let mut bstride = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            bstride[i] = if bs[i] == 1 { 0 } else { acc };
            acc *= bs[i];
        }
        let n = numel(xs);
        let mut idx = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        for _ in 0..n {
            idx.push(counter.iter().zip(&bstride).map(|(c, s)| c * s).sum());
            for d in (0..rank).rev() {
                counter[d] += 1;
                if counter[d] < xs[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        Ok(idx)
    }

    /// `x + b` with `b` broadcast along its size-1 dims.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let idx = self.broadcast_index(x, b)?;
        let bv = self.value(b);
        let value = self.value(x).iter().zip(&idx).map(|(&v, &i)| v + bv[i]).collect();
        let needs = self.needs(&[x, b]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddBroadcast(x, b), needs))
    }

    /// `x * m` with `m` broadcast along its size-1 dims.
    pub fn mul_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let idx = self.broadcast_index(x, m)?;
        let mv = self.value(m);
        let value = self.value(x).iter().zip(&idx).map(|(&v, &i)| v * mv[i]).collect();
        let needs = self.needs(&[x, m]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::MulBroadcast(x, m), needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map_unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map_unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| x.exp(), Op::Exp(a))
    }

    /// Clamp to `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.map_unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise binary cross-entropy of logits against fixed targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        if targets.len() != self.value(logits).len() {
            return Err(shape_err!("bce targets: {} vs {}", targets.len(), self.value(logits).len()));
        }
        let value = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let needs = self.needs(&[logits]);
        Ok(self.push(self.shape(logits).to_vec(), value, Op::BceWithLogits(logits, targets.to_vec()), needs))
    }

    /// Matrix product of 2-D operands, or batched product of 3-D operands
    /// with equal batch size.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(shape_err!("matmul {sa:?} x {sb:?}")),
        };
        let mut out = vec![T::zero(); batch * m * n];
        matmul_into(self.value(a), self.value(b), &mut out, batch, m, k, n);
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul(a, b), needs))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&i| i >= shape.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(shape_err!("bad permutation {axes:?} for shape {shape:?}"));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
        let value = permute_values(self.value(a), &shape, axes);
        let needs = self.needs(&[a]);
        Ok(self.push(out_shape, value, Op::Permute(a, axes.to_vec()), needs))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err!("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape(a)));
        }
        let value = self.value(a).to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), needs))
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(shape_err!("axis {axis} out of range for {:?}", self.shape(a)));
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let (outer, len, inner) = split_axis(self.shape(a), axis);
        let x = self.value(a);
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - m).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    y[at(j)] /= z;
                }
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(self.shape(a).to_vec(), y, Op::Softmax(a, axis), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let needs = self.needs(&[a]);
        self.push(vec![1], vec![s], Op::SumAll(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Mean over `axis`, which is kept with size 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let (outer, len, inner) = split_axis(self.shape(a), axis);
        let x = self.value(a);
        let inv = T::one() / T::lit(len as f64);
        let mut y = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in y[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        y.iter_mut().for_each(|v| *v *= inv);
        let mut shape = self.shape(a).to_vec();
        shape[axis] = 1;
        let needs = self.needs(&[a]);
        Ok(self.push(shape, y, Op::MeanAxis(a, axis), needs))
    }

    /// Max over `axis`, kept with size 1. The gradient flows to the first
    /// maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let (outer, len, inner) = split_axis(self.shape(a), axis);
        let x = self.value(a);
        let mut y = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for j in 1..len {
                    let at = (o * len + j) * inner + i;
                    if x[at] > x[best] {
                        best = at;
                    }
                }
                y[o * inner + i] = x[best];
                arg[o * inner + i] = best;
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape[axis] = 1;
        let needs = self.needs(&[a]);
        Ok(self.push(shape, y, Op::MaxAxis(a, arg), needs))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid!("concat of nothing"))?;
        self.check_axis(*first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err!("concat along {axis}: {:?} vs {base:?}", s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                value.extend_from_slice(&self.value(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = self.needs(parts);
        Ok(self.push(shape, value, Op::Concat(parts.to_vec(), axis), needs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        if start + len > shape[axis] || len == 0 {
            return Err(shape_err!("narrow [{start}, {}) of axis {axis} in {shape:?}", start + len));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            value.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let needs = self.needs(&[a]);
        Ok(self.push(out, value, Op::Narrow(a, axis, start), needs))
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        self.check_axis(a, axis)?;
        if sizes.iter().sum::<usize>() != self.shape(a)[axis] {
            return Err(shape_err!("split sizes {sizes:?} do not cover axis {axis} of {:?}", self.shape(a)));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [Co, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || stride == 0 {
            return Err(shape_err!("conv2d input {xs:?} with kernel {ws:?}, stride {stride}"));
        }
        let (oh, ow) = match (conv_out(xs[2], ws[2], stride, pad), conv_out(xs[3], ws[3], stride, pad)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => return Err(shape_err!("conv2d output would be empty for {xs:?} with kernel {ws:?}")),
        };
        let geo = ConvGeometry { n: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: ws[0], kh: ws[2], kw: ws[3], oh, ow, stride, pad, depthwise: false };
        let mut out = vec![T::zero(); geo.n * geo.cout * oh * ow];
        conv_forward(&geo, self.value(x), self.value(w), &mut out);
        let needs = self.needs(&[x, w]);
        Ok(self.push(vec![geo.n, geo.cout, oh, ow], out, Op::Conv2d { x, w, stride, pad }, needs))
    }

    /// Per-channel convolution of `x: [N, C, H, W]` with `w: [C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[1] != 1 || stride == 0 {
            return Err(shape_err!("depthwise conv input {xs:?} with kernel {ws:?}"));
        }
        let (oh, ow) = match (conv_out(xs[2], ws[2], stride, pad), conv_out(xs[3], ws[3], stride, pad)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => return Err(shape_err!("depthwise conv output would be empty for {xs:?}")),
        };
        let geo = ConvGeometry { n: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: xs[1], kh: ws[2], kw: ws[3], oh, ow, stride, pad, depthwise: true };
        let mut out = vec![T::zero(); geo.n * geo.cout * oh * ow];
        conv_forward(&geo, self.value(x), self.value(w), &mut out);
        let needs = self.needs(&[x, w]);
        Ok(self.push(vec![geo.n, geo.cout, oh, ow], out, Op::DepthwiseConv2d { x, w, stride, pad }, needs))
    }

    /// Flat elements `x[indices[i]]` as a 1-D node.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(shape_err!("gather index {bad} out of range {n}"));
        }
        let value = indices.iter().map(|&i| self.value(x)[i]).collect();
        let needs = self.needs(&[x]);
        Ok(self.push(vec![indices.len()], value, Op::Gather(x, indices.to_vec()), needs))
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(shape_err!("upsample needs a 4-D input and positive factor, got {s:?}"));
        }
        let (oh, ow) = (s[2] * factor, s[3] * factor);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in xv.chunks(s[2] * s[3]) {
            for y in 0..oh {
                for xx in 0..ow {
                    value.push(plane[(y / factor) * s[3] + xx / factor]);
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![s[0], s[1], oh, ow], value, Op::Upsample(x, factor), needs))
    }

    /// User-defined elementwise-shaped op with an explicit backward rule.
    pub fn custom_unary(&mut self, x: Var, forward: impl Fn(&[T]) -> Vec<T>, backward: CustomBackward<T>) -> Result<Var> {
        let value = forward(self.value(x));
        if value.len() != self.value(x).len() {
            return Err(shape_err!("custom op must preserve element count"));
        }
        let needs = self.needs(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Custom(x, backward), needs))
    }

    /// Reverse sweep from the scalar `loss`. Gradients of every node that
    /// depends on a trainable leaf become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                slot => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                send(*a, g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect());
                send(*b, g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                send(*a, g.iter().zip(y).map(|(&g, &y)| g / y).collect());
                send(*b, g.iter().zip(x.iter().zip(y)).map(|(&g, (&x, &y))| -g * x / (y * y)).collect());
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let pick_b: Vec<bool> = match &node.op {
                    Op::Minimum(..) => x.iter().zip(y).map(|(&x, &y)| y < x).collect(),
                    _ => x.iter().zip(y).map(|(&x, &y)| y > x).collect(),
                };
                send(*a, g.iter().zip(&pick_b).map(|(&g, &p)| if p { T::zero() } else { g }).collect());
                send(*b, g.iter().zip(&pick_b).map(|(&g, &p)| if p { g } else { T::zero() }).collect());
            }
            Op::AddBroadcast(x, b) | Op::MulBroadcast(x, b) => {
                let idx_map = self.broadcast_index(*x, *b).expect("validated in forward");
                let mut gb = vec![T::zero(); val(*b).len()];
                if let Op::AddBroadcast(..) = node.op {
                    for (&gi, &bi) in g.iter().zip(&idx_map) {
                        gb[bi] += gi;
                    }
                    send(*x, g.to_vec());
                } else {
                    let (xv, bv) = (val(*x), val(*b));
                    for ((&gi, &bi), &xi) in g.iter().zip(&idx_map).zip(xv) {
                        gb[bi] += gi * xi;
                    }
                    send(*x, g.iter().zip(&idx_map).map(|(&gi, &bi)| gi * bv[bi]).collect());
                }
                send(*b, gb);
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Relu(a) => send(
                *a,
                g.iter().zip(val(*a)).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect(),
            ),
            Op::Sigmoid(a) => send(
                *a,
                g.iter().zip(&node.value).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
            ),
            Op::Exp(a) => send(*a, g.iter().zip(&node.value).map(|(&g, &e)| g * e).collect()),
            Op::Clamp(a, lo, hi) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x > *lo && x < *hi { g } else { T::zero() })
                    .collect(),
            ),
            Op::BceWithLogits(a, t) => send(
                *a,
                g.iter().zip(val(*a)).zip(t).map(|((&g, &x), &t)| g * (sigmoid(x) - t)).collect(),
            ),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (batch, m, k, n) = if sa.len() == 2 { (1, sa[0], sa[1], sb[1]) } else { (sa[0], sa[1], sa[2], sb[2]) };
                if self.nodes[a.0].needs_grad {
                    // dA = dC · Bᵀ
                    let bt = transpose_batched(val(*b), batch, k, n);
                    let mut ga = vec![T::zero(); batch * m * k];
                    matmul_into(g, &bt, &mut ga, batch, m, n, k);
                    send(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dC
                    let at = transpose_batched(val(*a), batch, m, k);
                    let mut gb = vec![T::zero(); batch * k * n];
                    matmul_into(&at, g, &mut gb, batch, k, m, n);
                    send(*b, gb);
                }
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                send(*a, permute_values(g, &node.shape, &inverse));
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*a, gx);
            }
            Op::SumAll(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = split_axis(&self.nodes[a.0].shape, *axis);
                let inv = T::one() / T::lit(len as f64);
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * inv));
                    }
                }
                send(*a, gx);
            }
            Op::MaxAxis(a, arg) => {
                let mut gx = vec![T::zero(); val(*a).len()];
                for (&gi, &i) in g.iter().zip(arg) {
                    gx[i] += gi;
                }
                send(*a, gx);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[s..s + len * inner]);
                    }
                    send(p, gp);
                    offset += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let (outer, full, inner) = split_axis(&self.nodes[a.0].shape, *axis);
                let len = node.shape[*axis];
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let d = (o * full + start) * inner;
                    gx[d..d + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*a, gx);
            }
            Op::Conv2d { x, w, stride, pad } | Op::DepthwiseConv2d { x, w, stride, pad } => {
                let (xs, ws) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
                let depthwise = matches!(node.op, Op::DepthwiseConv2d { .. });
                let geo = ConvGeometry {
                    n: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: node.shape[1], kh: ws[2], kw: ws[3],
                    oh: node.shape[2], ow: node.shape[3], stride: *stride, pad: *pad, depthwise,
                };
                let mut gx = vec![T::zero(); val(*x).len()];
                let mut gw = vec![T::zero(); val(*w).len()];
                conv_backward(&geo, val(*x), val(*w), g, &mut gx, &mut gw);
                send(*x, gx);
                send(*w, gw);
            }
            Op::Gather(a, indices) => {
                let mut gx = vec![T::zero(); val(*a).len()];
                for (&gi, &i) in g.iter().zip(indices) {
                    gx[i] += gi;
                }
                send(*a, gx);
            }
            Op::Upsample(a, f) => {
                let s = &self.nodes[a.0].shape;
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let mut gx = vec![T::zero(); val(*a).len()];
                for (p, gp) in g.chunks(oh * ow).enumerate() {
                    let base = p * s[2] * s[3];
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[base + (y / f) * s[3] + xx / f] += gp[y * ow + xx];
                        }
                    }
                }
                send(*a, gx);
            }
            Op::Custom(a, rule) => send(*a, rule(val(*a), &node.value, g)),
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], batch: usize, m: usize, k: usize, n: usize) {
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let out = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn transpose_batched<T: Scalar>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = x[base + r * cols + c];
            }
        }
    }
    out
}

fn permute_values<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_stride = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_stride[i] = in_stride[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_stride[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x[offset]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    out
}

struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    depthwise: bool,
}

impl ConvGeometry {
    /// Input channels feeding output channel `co`.
    fn inputs_of(&self, co: usize) -> std::ops::Range<usize> {
        if self.depthwise { co..co + 1 } else { 0..self.cin }
    }

    fn weight_index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        let cin_w = if self.depthwise { 1 } else { self.cin };
        let ci_w = if self.depthwise { 0 } else { ci };
        ((co * cin_w + ci_w) * self.kh + ky) * self.kw + kx
    }

    /// Calls `f(out_offset, in_offset)` for every valid tap of kernel
    /// position (ky, kx) between plane pair bases.
    #[inline]
    fn for_each_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        let ys = valid_range(self.h, self.oh, ky, self.stride, self.pad);
        let xs = valid_range(self.w, self.ow, kx, self.stride, self.pad);
        for oy in ys {
            let iy = oy * self.stride + ky - self.pad;
            for ox in xs.clone() {
                let ix = ox * self.stride + kx - self.pad;
                f(oy * self.ow + ox, iy * self.w + ix);
            }
        }
    }
}

fn conv_forward<T: Scalar>(geo: &ConvGeometry, x: &[T], w: &[T], out: &mut [T]) {
    let (in_plane, out_plane) = (geo.h * geo.w, geo.oh * geo.ow);
    for n in 0..geo.n {
        for co in 0..geo.cout {
            let ob = (n * geo.cout + co) * out_plane;
            for ci in geo.inputs_of(co) {
                let ib = (n * geo.cin + ci) * in_plane;
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let wv = w[geo.weight_index(co, ci, ky, kx)];
                        if wv == T::zero() {
                            continue;
                        }
                        geo.for_each_tap(ky, kx, |o, i| out[ob + o] += wv * x[ib + i]);
                    }
                }
            }
        }
    }
}

fn conv_backward<T: Scalar>(geo: &ConvGeometry, x: &[T], w: &[T], g: &[T], gx: &mut [T], gw: &mut [T]) {
    let (in_plane, out_plane) = (geo.h * geo.w, geo.oh * geo.ow);
    for n in 0..geo.n {
        for co in 0..geo.cout {
            let ob = (n * geo.cout + co) * out_plane;
            for ci in geo.inputs_of(co) {
                let ib = (n * geo.cin + ci) * in_plane;
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let wi = geo.weight_index(co, ci, ky, kx);
                        let wv = w[wi];
                        let mut acc = T::zero();
                        geo.for_each_tap(ky, kx, |o, i| {
                            let go = g[ob + o];
                            acc += go * x[ib + i];
                            gx[ib + i] += go * wv;
                        });
                        gw[wi] += acc;
                    }
                }
            }
        }
    }
}
