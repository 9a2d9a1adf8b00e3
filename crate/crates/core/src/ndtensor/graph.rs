//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Nodes are appended to a tape in evaluation order, so the tape order is a
//! topological order and `backward` is a single reverse sweep. Reductions and
//! matrix products accumulate in a fixed left-to-right order, which makes
//! graph evaluation bitwise deterministic for identical inputs.

use std::sync::Arc;

use rayon::prelude::*;

use super::array::{
    broadcast_shape, broadcast_strides, for_each_broadcast1, for_each_broadcast2, Mask, NdArray,
};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Permute(TensorId, Vec<usize>),
    Reshape(TensorId),
    Concat(Vec<TensorId>, usize),
    Slice {
        input: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Broadcast(TensorId),
    Sum(TensorId, Vec<usize>),
    Mean(TensorId, Vec<usize>),
    SumAll(TensorId),
    MeanAll(TensorId),
    Max(TensorId, usize),
    Neg(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Sqrt(TensorId),
    Square(TensorId),
    Abs(TensorId),
    Relu(TensorId),
    Gelu(TensorId),
    Sigmoid(TensorId),
    Softplus(TensorId),
    Tanh(TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId, #[allow(dead_code)] f64),
    Softmax(TensorId, usize),
    MaskedSoftmax(TensorId, Arc<Mask>),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    trainable: bool,
}

/// A single computation graph. Build, evaluate eagerly, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Vec<f64>>,
    matmul_flops: u64,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi), tanh approximation
const GELU_A: f64 = 0.044715;

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of all matmuls evaluated so far (2 flops per MAC).
    pub fn flops(&self) -> u64 {
        self.matmul_flops
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, trainable: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            op,
            shape,
            values,
            trainable,
        });
        self.leaf_grads.push(Vec::new());
        TensorId(self.nodes.len() - 1)
    }

    /// Leaf node; `trainable` leaves receive gradients on `backward`.
    pub fn leaf(&mut self, array: &NdArray, trainable: bool) -> TensorId {
        self.push(
            Op::Leaf,
            array.shape().to_vec(),
            array.data().to_vec(),
            trainable,
        )
    }

    pub fn constant(&mut self, array: NdArray) -> TensorId {
        let (shape, data) = array.into_parts();
        self.push(Op::Leaf, shape, data, false)
    }

    pub fn constant_slice(&mut self, shape: &[usize], values: &[f64]) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(Op::Leaf, shape.to_vec(), values.to_vec(), false)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.push(Op::Leaf, vec![], vec![value], false)
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].values
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, t: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[t.0].values.len(), 1);
        self.nodes[t.0].values[0]
    }

    pub fn to_array(&self, t: TensorId) -> NdArray {
        NdArray::new(self.nodes[t.0].shape.clone(), self.nodes[t.0].values.clone()).unwrap()
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        if self.leaf_grads[t.0].is_empty() {
            None
        } else {
            Some(&self.leaf_grads[t.0])
        }
    }

    /// Resets accumulated leaf gradients. The training loop calls this at the
    /// start of every step.
    pub fn zero_grads(&mut self) {
        for g in &mut self.leaf_grads {
            g.clear();
        }
    }

    // ---- elementwise binary ----------------------------------------------

    fn binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        make: impl Fn(TensorId, TensorId) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::ShapeMismatch {
            op: op_name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        let (va, vb) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
        if sa == sb {
            for i in 0..numel {
                out[i] = f(va[i], vb[i]);
            }
        } else {
            let (sa, sb) = (sa.clone(), sb.clone());
            for_each_broadcast2(&out_shape, &sa, &sb, |oi, ai, bi| {
                out[oi] = f(va[ai], vb[bi]);
            });
        }
        Ok(self.push(make(a, b), out_shape, out, false))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    // ---- unary -------------------------------------------------------------

    fn unary(
        &mut self,
        a: TensorId,
        make: impl Fn(TensorId) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        self.push(make(a), shape, out, false)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Neg, |x| -x)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].values.iter().any(|&x| x < 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: "negative input".into(),
            });
        }
        Ok(self.unary(a, Op::Log, f64::ln))
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].values.iter().any(|&x| x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: "negative input".into(),
            });
        }
        Ok(self.unary(a, Op::Sqrt, f64::sqrt))
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Abs, f64::abs)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Gelu, |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Sigmoid, sigmoid_scalar)
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Softplus, softplus_scalar)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |t| Op::Scale(t, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |t| Op::AddScalar(t, c), |x| x + c)
    }

    // ---- shape ops ---------------------------------------------------------

    /// Permutes axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&mut self, a: TensorId, axes: &[usize]) -> Result<TensorId> {
        let in_shape = self.nodes[a.0].shape.clone();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || {
            for &ax in axes {
                if ax >= rank {
                    break;
                }
                seen[ax] = true;
            }
            seen.iter().any(|s| !s)
        } {
            return Err(Error::Domain {
                op: "permute",
                detail: format!("axes {axes:?} is not a permutation of 0..{rank}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
        let values = permute_values(&self.nodes[a.0].values, &in_shape, axes);
        Ok(self.push(Op::Permute(a, axes.to_vec()), out_shape, values, false))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let rank = self.nodes[a.0].shape.len();
        if rank < 2 {
            return Err(Error::Domain {
                op: "transpose",
                detail: format!("needs rank >= 2, got {rank}"),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].values.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let values = self.nodes[a.0].values.clone();
        Ok(self.push(Op::Reshape(a), shape.to_vec(), values, false))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Domain {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(Error::Domain {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            let compatible = s.len() == first.len()
                && s.iter()
                    .enumerate()
                    .all(|(d, &v)| d == axis || v == first[d]);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let out_row = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let s_axis = self.nodes[p.0].shape[axis];
            let vals = &self.nodes[p.0].values;
            let block = s_axis * inner;
            for o in 0..outer {
                let dst = o * out_row + offset;
                out[dst..dst + block].copy_from_slice(&vals[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        Ok(self.push(Op::Concat(parts.to_vec(), axis), out_shape, out, false))
    }

    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let in_shape = self.nodes[a.0].shape.clone();
        if axis >= in_shape.len() || start + len > in_shape[axis] {
            return Err(Error::Domain {
                op: "slice",
                detail: format!("range {start}..{} on axis {axis} of {in_shape:?}", start + len),
            });
        }
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        let vals = &self.nodes[a.0].values;
        let in_row = in_shape[axis] * inner;
        for o in 0..outer {
            let src = o * in_row + start * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&vals[src..src + len * inner]);
        }
        Ok(self.push(
            Op::Slice {
                input: a,
                axis,
                start,
                len,
            },
            out_shape,
            out,
            false,
        ))
    }

    /// Explicit broadcast to a target shape.
    pub fn broadcast_to(&mut self, a: TensorId, target: &[usize]) -> Result<TensorId> {
        let in_shape = self.nodes[a.0].shape.clone();
        match broadcast_shape(&in_shape, target) {
            Some(ref s) if s == target => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: in_shape,
                    rhs: target.to_vec(),
                })
            }
        }
        let mut out = vec![0.0; target.iter().product()];
        let vals = &self.nodes[a.0].values;
        for_each_broadcast1(target, &in_shape, |oi, ai| out[oi] = vals[ai]);
        Ok(self.push(Op::Broadcast(a), target.to_vec(), out, false))
    }

    // ---- reductions ----------------------------------------------------------

    fn reduced_shape(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
        let mut out = in_shape.to_vec();
        for &ax in axes {
            out[ax] = 1;
        }
        out
    }

    fn check_axes(op: &'static str, rank: usize, axes: &[usize]) -> Result<()> {
        if axes.is_empty() || axes.iter().any(|&a| a >= rank) || axes.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Domain {
                op,
                detail: format!("axes {axes:?} must be sorted, unique, and < {rank}"),
            });
        }
        Ok(())
    }

    /// Sum over `axes` (sorted, unique); reduced dimensions are kept with size 1.
    pub fn sum(&mut self, a: TensorId, axes: &[usize]) -> Result<TensorId> {
        let in_shape = self.nodes[a.0].shape.clone();
        Self::check_axes("sum", in_shape.len(), axes)?;
        let out_shape = Self::reduced_shape(&in_shape, axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        let vals = &self.nodes[a.0].values;
        for_each_broadcast1(&in_shape, &out_shape, |ii, oi| out[oi] += vals[ii]);
        Ok(self.push(Op::Sum(a, axes.to_vec()), out_shape, out, false))
    }

    /// Mean over `axes`; reduced dimensions are kept with size 1.
    pub fn mean(&mut self, a: TensorId, axes: &[usize]) -> Result<TensorId> {
        let in_shape = self.nodes[a.0].shape.clone();
        Self::check_axes("mean", in_shape.len(), axes)?;
        let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
        let out_shape = Self::reduced_shape(&in_shape, axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        let vals = &self.nodes[a.0].values;
        for_each_broadcast1(&in_shape, &out_shape, |ii, oi| out[oi] += vals[ii]);
        let inv = 1.0 / count as f64;
        for v in &mut out {
            *v *= inv;
        }
        Ok(self.push(Op::Mean(a, axes.to_vec()), out_shape, out, false))
    }

    /// Sum of all elements, producing a scalar node.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.nodes[a.0].values.iter().sum();
        self.push(Op::SumAll(a), vec![], vec![total], false)
    }

    /// Mean of all elements, producing a scalar node.
    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].values.len();
        let total: f64 = self.nodes[a.0].values.iter().sum();
        self.push(Op::MeanAll(a), vec![], vec![total / n as f64], false)
    }

    /// Max over one axis (kept with size 1). Ties route gradient to the first maximum.
    pub fn max(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let in_shape = self.nodes[a.0].shape.clone();
        Self::check_axes("max", in_shape.len(), &[axis])?;
        let (outer, lane, inner) = lane_dims(&in_shape, axis);
        let mut out_shape = in_shape.clone();
        out_shape[axis] = 1;
        let mut out = vec![0.0; outer * inner];
        let vals = &self.nodes[a.0].values;
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                for l in 0..lane {
                    let v = vals[(o * lane + l) * inner + i];
                    if v > best {
                        best = v;
                    }
                }
                out[o * inner + i] = best;
            }
        }
        Ok(self.push(Op::Max(a, axis), out_shape, out, false))
    }

    // ---- softmax ---------------------------------------------------------------

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let in_shape = self.nodes[a.0].shape.clone();
        Self::check_axes("softmax", in_shape.len(), &[axis])?;
        let (outer, lane, inner) = lane_dims(&in_shape, axis);
        let vals = &self.nodes[a.0].values;
        let mut out = vec![0.0; vals.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * lane + l) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for l in 0..lane {
                    m = m.max(vals[idx(l)]);
                }
                let mut s = 0.0;
                for l in 0..lane {
                    let e = (vals[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    s += e;
                }
                for l in 0..lane {
                    out[idx(l)] /= s;
                }
            }
        }
        Ok(self.push(Op::Softmax(a, axis), in_shape, out, false))
    }

    /// Softmax over the last axis that assigns exactly zero weight to masked
    /// positions and renormalizes over unmasked ones. The mask broadcasts
    /// against the input shape; `true` marks valid positions.
    pub fn masked_softmax(&mut self, a: TensorId, mask: &Mask) -> Result<TensorId> {
        let in_shape = self.nodes[a.0].shape.clone();
        if in_shape.is_empty() {
            return Err(Error::Domain {
                op: "masked-softmax",
                detail: "input must have rank >= 1".into(),
            });
        }
        if broadcast_shape(mask.shape(), &in_shape).as_deref() != Some(&in_shape[..]) {
            return Err(Error::ShapeMismatch {
                op: "masked-softmax",
                lhs: in_shape,
                rhs: mask.shape().to_vec(),
            });
        }
        let lane = *in_shape.last().unwrap();
        let rows = self.nodes[a.0].values.len() / lane;
        let ms = broadcast_strides(mask.shape(), &in_shape);
        let bits = mask.bits();
        let vals = &self.nodes[a.0].values;
        let mut out = vec![0.0; vals.len()];
        let mut row_coords = vec![0usize; in_shape.len().saturating_sub(1)];
        let mut mask_base = 0usize;
        let last_stride = ms[in_shape.len() - 1];
        for r in 0..rows {
            let base = r * lane;
            let mut m = f64::NEG_INFINITY;
            let mut any = false;
            for l in 0..lane {
                if bits[mask_base + last_stride * l] {
                    any = true;
                    m = m.max(vals[base + l]);
                }
            }
            if !any {
                return Err(Error::AllMasked);
            }
            let mut s = 0.0;
            for l in 0..lane {
                if bits[mask_base + last_stride * l] {
                    let e = (vals[base + l] - m).exp();
                    out[base + l] = e;
                    s += e;
                } else {
                    out[base + l] = 0.0;
                }
            }
            for l in 0..lane {
                out[base + l] /= s;
            }
            advance_row(&mut row_coords, &in_shape, &ms, &mut mask_base);
        }
        Ok(self.push(
            Op::MaskedSoftmax(a, Arc::new(mask.clone())),
            self.nodes[a.0].shape.clone(),
            out,
            false,
        ))
    }

    // ---- matmul -------------------------------------------------------------

    /// Matrix product of `[..., m, k]` and `[..., k, n]`; leading dimensions
    /// broadcast. A 2-D right operand acts as a shared weight matrix.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let lead = broadcast_shape(lead_a, lead_b).ok_or_else(|| Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let stacks: usize = lead.iter().product();
        let mut out_shape = lead.clone();
        out_shape.push(m);
        out_shape.push(n);

        let map_a = stack_map(lead_a, &lead);
        let map_b = stack_map(lead_b, &lead);
        let va = &self.nodes[a.0].values;
        let vb = &self.nodes[b.0].values;
        let mut out = vec![0.0; stacks * m * n];
        let macs = (stacks * m * k * n) as u64;
        if stacks > 1 && macs > PAR_MACS {
            out.par_chunks_mut(m * n).enumerate().for_each(|(s, c)| {
                mm2(
                    &va[map_a[s] * m * k..(map_a[s] + 1) * m * k],
                    &vb[map_b[s] * k * n..(map_b[s] + 1) * k * n],
                    c,
                    m,
                    k,
                    n,
                );
            });
        } else {
            for s in 0..stacks {
                mm2(
                    &va[map_a[s] * m * k..(map_a[s] + 1) * m * k],
                    &vb[map_b[s] * k * n..(map_b[s] + 1) * k * n],
                    &mut out[s * m * n..(s + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.matmul_flops += 2 * macs;
        Ok(self.push(Op::Matmul(a, b), out_shape, out, false))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of leaves accumulate across
    /// repeated calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut work: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        work[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if work[i].is_empty() {
                continue;
            }
            let (lo, hi) = work.split_at_mut(i);
            let g = &hi[0];
            self.propagate(i, g, lo);
        }
        for (i, w) in work.into_iter().enumerate() {
            if w.is_empty() || !self.nodes[i].trainable || !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let store = &mut self.leaf_grads[i];
            if store.is_empty() {
                *store = w;
            } else {
                for (s, v) in store.iter_mut().zip(&w) {
                    *s += v;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], work: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let ensure = |work: &mut [Vec<f64>], t: TensorId, len: usize| {
            if work[t.0].is_empty() {
                work[t.0] = vec![0.0; len];
            }
        };
        let parent_len = |t: TensorId| self.nodes[t.0].values.len();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.binary_backward(*a, *b, &node.shape, &node.values, g, work, |gv, _, _, _| {
                    (gv, gv)
                });
            }
            Op::Sub(a, b) => {
                self.binary_backward(*a, *b, &node.shape, &node.values, g, work, |gv, _, _, _| {
                    (gv, -gv)
                });
            }
            Op::Mul(a, b) => {
                self.binary_backward(*a, *b, &node.shape, &node.values, g, work, |gv, av, bv, _| {
                    (gv * bv, gv * av)
                });
            }
            Op::Div(a, b) => {
                self.binary_backward(*a, *b, &node.shape, &node.values, g, work, |gv, _, bv, ov| {
                    (gv / bv, -gv * ov / bv)
                });
            }
            Op::Matmul(a, b) => self.backward_matmul(*a, *b, &node.shape, g, work),
            Op::Permute(a, axes) => {
                ensure(work, *a, parent_len(*a));
                // out[coords(axes)] = in[coords]; invert by scattering.
                let inv = invert_permutation(axes);
                let grad_in = permute_values(g, &node.shape, &inv);
                for (w, v) in work[a.0].iter_mut().zip(&grad_in) {
                    *w += v;
                }
            }
            Op::Reshape(a) => {
                ensure(work, *a, parent_len(*a));
                for (w, v) in work[a.0].iter_mut().zip(g) {
                    *w += v;
                }
            }
            Op::Concat(parts, axis) => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[*axis + 1..].iter().product();
                let out_row = node.shape[*axis] * inner;
                let mut offset = 0usize;
                for &p in parts {
                    ensure(work, p, parent_len(p));
                    let s_axis = self.nodes[p.0].shape[*axis];
                    let block = s_axis * inner;
                    let wp = &mut work[p.0];
                    for o in 0..outer {
                        let src = o * out_row + offset;
                        for t in 0..block {
                            wp[o * block + t] += g[src + t];
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                ensure(work, *input, parent_len(*input));
                let in_shape = &self.nodes[input.0].shape;
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let in_row = in_shape[*axis] * inner;
                let wp = &mut work[input.0];
                for o in 0..outer {
                    let dst = o * in_row + start * inner;
                    let src = o * len * inner;
                    for t in 0..len * inner {
                        wp[dst + t] += g[src + t];
                    }
                }
            }
            Op::Broadcast(a) => {
                ensure(work, *a, parent_len(*a));
                let in_shape = self.nodes[a.0].shape.clone();
                let wp = &mut work[a.0];
                for_each_broadcast1(&node.shape, &in_shape, |oi, ai| wp[ai] += g[oi]);
            }
            Op::Sum(a, _) => {
                ensure(work, *a, parent_len(*a));
                let in_shape = self.nodes[a.0].shape.clone();
                let wp = &mut work[a.0];
                for_each_broadcast1(&in_shape, &node.shape, |ii, oi| wp[ii] += g[oi]);
            }
            Op::Mean(a, axes) => {
                ensure(work, *a, parent_len(*a));
                let in_shape = self.nodes[a.0].shape.clone();
                let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
                let inv = 1.0 / count as f64;
                let wp = &mut work[a.0];
                for_each_broadcast1(&in_shape, &node.shape, |ii, oi| wp[ii] += g[oi] * inv);
            }
            Op::SumAll(a) => {
                ensure(work, *a, parent_len(*a));
                let gv = g[0];
                for w in work[a.0].iter_mut() {
                    *w += gv;
                }
            }
            Op::MeanAll(a) => {
                ensure(work, *a, parent_len(*a));
                let gv = g[0] / parent_len(*a) as f64;
                for w in work[a.0].iter_mut() {
                    *w += gv;
                }
            }
            Op::Max(a, axis) => {
                ensure(work, *a, parent_len(*a));
                let in_shape = &self.nodes[a.0].shape;
                let (outer, lane, inner) = lane_dims(in_shape, *axis);
                let vals = &self.nodes[a.0].values;
                let wp = &mut work[a.0];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0usize;
                        for l in 0..lane {
                            let v = vals[(o * lane + l) * inner + i];
                            if v > best {
                                best = v;
                                arg = l;
                            }
                        }
                        wp[(o * lane + arg) * inner + i] += g[o * inner + i];
                    }
                }
            }
            Op::Neg(a) => self.unary_backward(*a, g, work, |_, _| -1.0),
            Op::Exp(a) => {
                let vo = &node.values;
                self.unary_backward_with_out(*a, g, work, vo, |_, o| o)
            }
            Op::Log(a) => self.unary_backward(*a, g, work, |x, _| 1.0 / x),
            Op::Sqrt(a) => {
                let vo = &node.values;
                self.unary_backward_with_out(*a, g, work, vo, |_, o| 0.5 / o)
            }
            Op::Square(a) => self.unary_backward(*a, g, work, |x, _| 2.0 * x),
            Op::Abs(a) => self.unary_backward(*a, g, work, |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Relu(a) => self.unary_backward(*a, g, work, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Gelu(a) => self.unary_backward(*a, g, work, |x, _| {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }),
            Op::Sigmoid(a) => {
                let vo = &node.values;
                self.unary_backward_with_out(*a, g, work, vo, |_, o| o * (1.0 - o))
            }
            Op::Softplus(a) => self.unary_backward(*a, g, work, |x, _| sigmoid_scalar(x)),
            Op::Tanh(a) => {
                let vo = &node.values;
                self.unary_backward_with_out(*a, g, work, vo, |_, o| 1.0 - o * o)
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.unary_backward(*a, g, work, move |_, _| c)
            }
            Op::AddScalar(a, _) => self.unary_backward(*a, g, work, |_, _| 1.0),
            Op::Softmax(a, axis) => {
                ensure(work, *a, parent_len(*a));
                let in_shape = &self.nodes[a.0].shape;
                let (outer, lane, inner) = lane_dims(in_shape, *axis);
                let s = &node.values;
                let wp = &mut work[a.0];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * lane + l) * inner + i;
                        let mut dot = 0.0;
                        for l in 0..lane {
                            dot += g[idx(l)] * s[idx(l)];
                        }
                        for l in 0..lane {
                            wp[idx(l)] += s[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }
            Op::MaskedSoftmax(a, mask) => {
                ensure(work, *a, parent_len(*a));
                let in_shape = &self.nodes[a.0].shape;
                let lane = *in_shape.last().unwrap();
                let rows = node.values.len() / lane;
                let ms = broadcast_strides(mask.shape(), in_shape);
                let bits = mask.bits();
                let s = &node.values;
                let wp = &mut work[a.0];
                let mut row_coords = vec![0usize; in_shape.len().saturating_sub(1)];
                let mut mask_base = 0usize;
                let last_stride = ms[in_shape.len() - 1];
                for r in 0..rows {
                    let base = r * lane;
                    let mut dot = 0.0;
                    for l in 0..lane {
                        dot += g[base + l] * s[base + l];
                    }
                    for l in 0..lane {
                        if bits[mask_base + last_stride * l] {
                            wp[base + l] += s[base + l] * (g[base + l] - dot);
                        }
                    }
                    advance_row(&mut row_coords, in_shape, &ms, &mut mask_base);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_backward(
        &self,
        a: TensorId,
        b: TensorId,
        out_shape: &[usize],
        out_vals: &[f64],
        g: &[f64],
        work: &mut [Vec<f64>],
        df: impl Fn(f64, f64, f64, f64) -> (f64, f64),
    ) {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let va = &self.nodes[a.0].values;
        let vb = &self.nodes[b.0].values;
        if work[a.0].is_empty() {
            work[a.0] = vec![0.0; va.len()];
        }
        if work[b.0].is_empty() {
            work[b.0] = vec![0.0; vb.len()];
        }
        if a.0 == b.0 {
            let wa = &mut work[a.0];
            for_each_broadcast2(out_shape, &sa, &sb, |oi, ai, bi| {
                let (da, db) = df(g[oi], va[ai], vb[bi], out_vals[oi]);
                wa[ai] += da;
                wa[bi] += db;
            });
        } else {
            let (wa, wb) = two_mut(work, a.0, b.0);
            for_each_broadcast2(out_shape, &sa, &sb, |oi, ai, bi| {
                let (da, db) = df(g[oi], va[ai], vb[bi], out_vals[oi]);
                wa[ai] += da;
                wb[bi] += db;
            });
        }
    }

    fn unary_backward(
        &self,
        a: TensorId,
        g: &[f64],
        work: &mut [Vec<f64>],
        df: impl Fn(f64, f64) -> f64,
    ) {
        if work[a.0].is_empty() {
            work[a.0] = vec![0.0; self.nodes[a.0].values.len()];
        }
        let vx = &self.nodes[a.0].values;
        let wp = &mut work[a.0];
        for i in 0..g.len() {
            wp[i] += g[i] * df(vx[i], 0.0);
        }
    }

    fn unary_backward_with_out(
        &self,
        a: TensorId,
        g: &[f64],
        work: &mut [Vec<f64>],
        out_vals: &[f64],
        df: impl Fn(f64, f64) -> f64,
    ) {
        if work[a.0].is_empty() {
            work[a.0] = vec![0.0; self.nodes[a.0].values.len()];
        }
        let vx = &self.nodes[a.0].values;
        let wp = &mut work[a.0];
        for i in 0..g.len() {
            wp[i] += g[i] * df(vx[i], out_vals[i]);
        }
    }

    fn backward_matmul(
        &self,
        a: TensorId,
        b: TensorId,
        out_shape: &[usize],
        g: &[f64],
        work: &mut [Vec<f64>],
    ) {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let lead = &out_shape[..out_shape.len() - 2];
        let stacks: usize = lead.iter().product();
        let map_a = stack_map(&sa[..sa.len() - 2], lead);
        let map_b = stack_map(&sb[..sb.len() - 2], lead);
        let stacks_a: usize = sa[..sa.len() - 2].iter().product();
        let stacks_b: usize = sb[..sb.len() - 2].iter().product();
        let va = &self.nodes[a.0].values;
        let vb = &self.nodes[b.0].values;

        if work[a.0].is_empty() {
            work[a.0] = vec![0.0; va.len()];
        }
        if work[b.0].is_empty() {
            work[b.0] = vec![0.0; vb.len()];
        }
        let macs = (stacks * m * k * n) as u64;

        // dA = dC . B^T
        {
            let wa = &mut work[a.0];
            if stacks_a == stacks {
                if stacks > 1 && macs > PAR_MACS {
                    wa.par_chunks_mut(m * k).enumerate().for_each(|(s, c)| {
                        mm_abt(
                            &g[s * m * n..(s + 1) * m * n],
                            &vb[map_b[s] * k * n..(map_b[s] + 1) * k * n],
                            c,
                            m,
                            n,
                            k,
                        );
                    });
                } else {
                    for s in 0..stacks {
                        mm_abt(
                            &g[s * m * n..(s + 1) * m * n],
                            &vb[map_b[s] * k * n..(map_b[s] + 1) * k * n],
                            &mut wa[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
            } else {
                // broadcast A: serial accumulation into shared stacks
                for s in 0..stacks {
                    mm_abt(
                        &g[s * m * n..(s + 1) * m * n],
                        &vb[map_b[s] * k * n..(map_b[s] + 1) * k * n],
                        &mut wa[map_a[s] * m * k..(map_a[s] + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
        }

        // dB = A^T . dC
        {
            let wb = &mut work[b.0];
            if stacks_b == stacks {
                if stacks > 1 && macs > PAR_MACS {
                    wb.par_chunks_mut(k * n).enumerate().for_each(|(s, c)| {
                        mm_atb(
                            &va[map_a[s] * m * k..(map_a[s] + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            c,
                            m,
                            k,
                            n,
                        );
                    });
                } else {
                    for s in 0..stacks {
                        mm_atb(
                            &va[map_a[s] * m * k..(map_a[s] + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            &mut wb[s * k * n..(s + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            } else if stacks_b == 1 && macs > PAR_MACS {
                // shared weight: dB = concat(A)^T . concat(dC), row-parallel
                par_mm_atb_flat(va, g, wb, stacks * m, k, n, &map_a, m);
            } else {
                for s in 0..stacks {
                    mm_atb(
                        &va[map_a[s] * m * k..(map_a[s] + 1) * m * k],
                        &g[s * m * n..(s + 1) * m * n],
                        &mut wb[map_b[s] * k * n..(map_b[s] + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
    }
}

const PAR_MACS: u64 = 1 << 16;

fn two_mut<T>(xs: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    debug_assert_ne!(i, j);
    if i < j {
        let (lo, hi) = xs.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = xs.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

fn invert_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inv[ax] = i;
    }
    inv
}

fn permute_values(vals: &[f64], in_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
    let out_strides = super::array::strides_for(&out_shape);
    // stride in output for each input dim
    let mut scatter = vec![0usize; rank];
    for (out_dim, &in_dim) in axes.iter().enumerate() {
        scatter[in_dim] = out_strides[out_dim];
    }
    let mut out = vec![0.0; vals.len()];
    let mut coords = vec![0usize; rank];
    let mut oi = 0usize;
    for &v in vals {
        out[oi] = v;
        for d in (0..rank).rev() {
            coords[d] += 1;
            oi += scatter[d];
            if coords[d] < in_shape[d] {
                break;
            }
            coords[d] = 0;
            oi -= scatter[d] * in_shape[d];
        }
    }
    out
}

/// Maps output stack index -> operand stack index under leading-dim broadcast.
fn stack_map(operand_lead: &[usize], out_lead: &[usize]) -> Vec<usize> {
    let stacks: usize = out_lead.iter().product();
    let mut map = vec![0usize; stacks.max(1)];
    if out_lead.is_empty() {
        return map;
    }
    let strides = broadcast_strides(operand_lead, out_lead);
    let mut coords = vec![0usize; out_lead.len()];
    let mut off = 0usize;
    for s in map.iter_mut() {
        *s = off;
        for d in (0..out_lead.len()).rev() {
            coords[d] += 1;
            off += strides[d];
            if coords[d] < out_lead[d] {
                break;
            }
            coords[d] = 0;
            off -= strides[d] * out_lead[d];
        }
    }
    map
}

/// c[m,n] += a[m,k] . b[k,n]
fn mm2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m > 1 && (m * k * n) as u64 > PAR_MACS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| {
            mm2_row(&a[i * k..(i + 1) * k], b, crow, k, n);
        });
    } else {
        for i in 0..m {
            mm2_row(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], k, n);
        }
    }
}

#[inline]
fn mm2_row(arow: &[f64], b: &[f64], crow: &mut [f64], k: usize, n: usize) {
    for p in 0..k {
        let av = arow[p];
        if av != 0.0 {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,k] += a[m,n] . b[k,n]^T
fn mm_abt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T . b[m,n]
fn mm_atb(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let crow = &mut c[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// Shared-weight gradient with row parallelism over the k output rows:
/// c[k,n] += sum_s a_s[m,k]^T . g_s[m,n], stacked as flat row lists.
fn par_mm_atb_flat(
    a: &[f64],
    g: &[f64],
    c: &mut [f64],
    total_rows: usize,
    k: usize,
    n: usize,
    map_a: &[usize],
    m: usize,
) {
    c.par_chunks_mut(n).enumerate().for_each(|(p, crow)| {
        for r in 0..total_rows {
            let s = r / m;
            let ar = map_a[s] * m + (r % m);
            let av = a[ar * k + p];
            if av != 0.0 {
                let grow = &g[r * n..(r + 1) * n];
                for (cv, gv) in crow.iter_mut().zip(grow) {
                    *cv += av * gv;
                }
            }
        }
    });
}

/// Advances a row-prefix odometer, updating the mask base offset.
fn advance_row(coords: &mut [usize], shape: &[usize], strides: &[usize], base: &mut usize) {
    for d in (0..coords.len()).rev() {
        coords[d] += 1;
        *base += strides[d];
        if coords[d] < shape[d] {
            return;
        }
        coords[d] = 0;
        *base -= strides[d] * shape[d];
    }
}
