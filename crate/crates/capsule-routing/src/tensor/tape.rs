//! Reverse-mode differentiation tape.
//!
//! Operations record themselves on a [`Tape`]; [`Tape::backward`] replays the
//! record in reverse and accumulates vector-Jacobian products. A tape and its
//! tensors belong to one worker at a time: the type is deliberately not
//! `Send`, so data-parallel callers build one tape per shard and merge
//! gradients at an explicit synchronization point.
//!
//! Elementwise binary ops broadcast in exactly three cases: identical shapes,
//! a one-element operand, or the rhs shape equal to the lhs shape minus its
//! leading axis (and symmetrically). Anything else is a shape error.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{axis_split, matmul_acc, matmul_new, transpose2, Scalar, Tensor};

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    AddConst(usize, T),
    MulConst(usize, T),
    MaxConst(usize, T),
    Clamp(usize, T, T),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    SumAxis {
        x: usize,
        axis: usize,
    },
    MeanAxis {
        x: usize,
        axis: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    ExpandAxis {
        x: usize,
        axis: usize,
        copies: usize,
    },
    GatherRows {
        x: usize,
        indices: Rc<Vec<usize>>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: (usize, usize),
    },
    VoteTransform {
        w: usize,
        p: usize,
    },
    SqDistPairs {
        v: usize,
        m: usize,
    },
    DotPairs {
        v: usize,
        m: usize,
    },
    WeightedMean {
        c: usize,
        v: usize,
    },
    LstmCell {
        x: usize,
        h: usize,
        s: usize,
        wx: usize,
        wh: usize,
        b: usize,
        hidden: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Auxiliary values kept from the forward pass (gate activations, norms,
    /// denominators) so backward does not recompute them.
    saved: Option<Vec<T>>,
}

/// Records primitive operations in topological order.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to one tensor on a tape.
pub struct Var<'g, T: Scalar> {
    tape: &'g Tape<T>,
    id: usize,
}

impl<'g, T: Scalar> std::fmt::Debug for Var<'g, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'g, T: Scalar> Clone for Var<'g, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<'g, T: Scalar> Copy for Var<'g, T> {}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// How two shapes line up in an elementwise binary op.
#[derive(Clone, Copy, PartialEq)]
enum Bc {
    Same,
    LhsScalar,
    RhsScalar,
    /// rhs shape == lhs shape minus the leading axis.
    RhsTrail,
    LhsTrail,
}

fn bc_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<(Bc, Vec<usize>)> {
    let ln: usize = lhs.iter().product();
    let rn: usize = rhs.iter().product();
    if lhs == rhs {
        return Ok((Bc::Same, lhs.to_vec()));
    }
    if rn == 1 {
        return Ok((Bc::RhsScalar, lhs.to_vec()));
    }
    if ln == 1 {
        return Ok((Bc::LhsScalar, rhs.to_vec()));
    }
    if !lhs.is_empty() && &lhs[1..] == rhs {
        return Ok((Bc::RhsTrail, lhs.to_vec()));
    }
    if !rhs.is_empty() && &rhs[1..] == lhs {
        return Ok((Bc::LhsTrail, rhs.to_vec()));
    }
    Err(shape_err(op, lhs, rhs))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, saved: Option<Vec<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Register a differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true, None)
    }

    /// Register a value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false, None)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn req(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                what: "concat of zero tensors".into(),
            });
        }
        let first = self.shape_of(parts[0].id);
        if axis >= first.len() {
            return Err(Error::InvalidArgument {
                what: format!("concat axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut total_len = 0usize;
        for p in parts {
            let s = self.shape_of(p.id);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", &first, &s));
            }
            total_len += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_len;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![T::zero(); outer * total_len * inner];
        {
            let nodes = self.nodes.borrow();
            let mut off = 0usize;
            for p in parts {
                let t = &nodes[p.id].value;
                let len = t.shape()[axis];
                let src = t.data();
                for o in 0..outer {
                    let dst_base = (o * total_len + off) * inner;
                    let src_base = o * len * inner;
                    data[dst_base..dst_base + len * inner]
                        .copy_from_slice(&src[src_base..src_base + len * inner]);
                }
                off += len;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.req(&ids);
        Ok(self.push(
            Tensor::from_vec(out_shape, data)?,
            Op::Concat { parts: ids, axis },
            rg,
            None,
        ))
    }

    /// Run the chain rule backwards from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::InvalidArgument {
                what: format!(
                    "backward requires a scalar loss, got shape {:?}",
                    nodes[loss.id].value.shape()
                ),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_step(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Tensor::from_vec(nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

/// Add `src` into `dst[id]`, allocating on first touch.
fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    src: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()]);
    src(buf);
}

#[allow(clippy::too_many_lines)]
fn backward_step<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            binary_backward(nodes, grads, *a, *b, g, |_, _, go| (go, go));
        }
        Op::Sub(a, b) => {
            binary_backward(nodes, grads, *a, *b, g, |_, _, go| (go, -go));
        }
        Op::Mul(a, b) => {
            binary_backward(nodes, grads, *a, *b, g, |av, bv, go| (go * bv, go * av));
        }
        Op::Div(a, b) => {
            binary_backward(nodes, grads, *a, *b, g, |av, bv, go| {
                (go / bv, -go * av / (bv * bv))
            });
        }
        Op::Neg(x) => accumulate(nodes, grads, *x, |buf| {
            for (d, &gi) in buf.iter_mut().zip(g) {
                *d = *d - gi;
            }
        }),
        Op::Exp(x) => {
            let y = node.value.data();
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..buf.len() {
                    buf[i] = buf[i] + g[i] * y[i];
                }
            });
        }
        Op::Log(x) => {
            let xv = nodes[*x].value.data();
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..buf.len() {
                    buf[i] = buf[i] + g[i] / xv[i];
                }
            });
        }
        Op::Sqrt(x) => {
            let y = node.value.data();
            let half = T::of(0.5);
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..buf.len() {
                    buf[i] = buf[i] + g[i] * half / y[i];
                }
            });
        }
        Op::Tanh(x) => {
            let y = node.value.data();
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..buf.len() {
                    buf[i] = buf[i] + g[i] * (T::one() - y[i] * y[i]);
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..buf.len() {
                    buf[i] = buf[i] + g[i] * y[i] * (T::one() - y[i]);
                }
            });
        }
        Op::Softplus(x) => {
            let xv = nodes[*x].value.data();
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..buf.len() {
                    buf[i] = buf[i] + g[i] * sigmoid_scalar(xv[i]);
                }
            });
        }
        Op::AddConst(x, _) => accumulate(nodes, grads, *x, |buf| {
            for i in 0..buf.len() {
                buf[i] = buf[i] + g[i];
            }
        }),
        Op::MulConst(x, c) => {
            let c = *c;
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..buf.len() {
                    buf[i] = buf[i] + g[i] * c;
                }
            });
        }
        Op::MaxConst(x, c) => {
            let xv = nodes[*x].value.data();
            let c = *c;
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..buf.len() {
                    if xv[i] > c {
                        buf[i] = buf[i] + g[i];
                    }
                }
            });
        }
        Op::Clamp(x, lo, hi) => {
            let xv = nodes[*x].value.data();
            let (lo, hi) = (*lo, *hi);
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..buf.len() {
                    if xv[i] >= lo && xv[i] <= hi {
                        buf[i] = buf[i] + g[i];
                    }
                }
            });
        }
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if nodes[*a].requires_grad {
                let bt = transpose2(bv, k, n);
                accumulate(nodes, grads, *a, |buf| {
                    matmul_acc(g, &bt, buf, m, n, k);
                });
            }
            if nodes[*b].requires_grad {
                let at = transpose2(av, m, k);
                accumulate(nodes, grads, *b, |buf| {
                    matmul_acc(&at, g, buf, k, m, n);
                });
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot = dot + g[idx] * y[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            buf[idx] = buf[idx] + y[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut gsum = T::zero();
                        for j in 0..len {
                            gsum = gsum + g[base + j * inner];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            buf[idx] = buf[idx] + g[idx] - y[idx].exp() * gsum;
                        }
                    }
                }
            });
        }
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = axis_split(nodes[*x].value.shape(), *axis);
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            let idx = (o * len + j) * inner + i;
                            buf[idx] = buf[idx] + g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::MeanAxis { x, axis } => {
            let (outer, len, inner) = axis_split(nodes[*x].value.shape(), *axis);
            let scale = T::one() / T::of(len as f64);
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            let idx = (o * len + j) * inner + i;
                            buf[idx] = buf[idx] + g[o * inner + i] * scale;
                        }
                    }
                }
            });
        }
        Op::SumAll(x) => accumulate(nodes, grads, *x, |buf| {
            for d in buf.iter_mut() {
                *d = *d + g[0];
            }
        }),
        Op::MeanAll(x) => {
            let scale = T::one() / T::of(nodes[*x].value.numel() as f64);
            accumulate(nodes, grads, *x, |buf| {
                for d in buf.iter_mut() {
                    *d = *d + g[0] * scale;
                }
            });
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let (outer, total_len, inner) = axis_split(out_shape, *axis);
            let mut off = 0usize;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                accumulate(nodes, grads, p, |buf| {
                    for o in 0..outer {
                        let src_base = (o * total_len + off) * inner;
                        let dst_base = o * len * inner;
                        for t in 0..len * inner {
                            buf[dst_base + t] = buf[dst_base + t] + g[src_base + t];
                        }
                    }
                });
                off += len;
            }
        }
        Op::Narrow {
            x,
            axis,
            start,
            len,
        } => {
            let (outer, full_len, inner) = axis_split(nodes[*x].value.shape(), *axis);
            let (start, len) = (*start, *len);
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    let dst_base = (o * full_len + start) * inner;
                    let src_base = o * len * inner;
                    for t in 0..len * inner {
                        buf[dst_base + t] = buf[dst_base + t] + g[src_base + t];
                    }
                }
            });
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |buf| {
            for i in 0..buf.len() {
                buf[i] = buf[i] + g[i];
            }
        }),
        Op::ExpandAxis { x, axis, copies } => {
            let in_shape = nodes[*x].value.shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[*axis..].iter().product();
            let copies = *copies;
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    for c in 0..copies {
                        let src_base = (o * copies + c) * inner;
                        let dst_base = o * inner;
                        for i in 0..inner {
                            buf[dst_base + i] = buf[dst_base + i] + g[src_base + i];
                        }
                    }
                }
            });
        }
        Op::GatherRows { x, indices } => {
            let row: usize = nodes[*x].value.shape()[1..].iter().product();
            accumulate(nodes, grads, *x, |buf| {
                for (r, &src_row) in indices.iter().enumerate() {
                    let dst = src_row * row;
                    let src = r * row;
                    for i in 0..row {
                        buf[dst + i] = buf[dst + i] + g[src + i];
                    }
                }
            });
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => conv2d_backward(nodes, grads, id, *x, *w, *b, *stride, *pad, g),
        Op::VoteTransform { w, p } => vote_transform_backward(nodes, grads, id, *w, *p, g),
        Op::SqDistPairs { v, m } => {
            let vs = nodes[*v].value.shape().to_vec();
            let (gs, s, d) = (vs[0], vs[1], vs[2]);
            let vv = nodes[*v].value.data();
            let mv = nodes[*m].value.data();
            let two = T::of(2.0);
            if nodes[*v].requires_grad {
                accumulate(nodes, grads, *v, |buf| {
                    for gi in 0..gs {
                        for si in 0..s {
                            let go = g[gi * s + si] * two;
                            let vb = (gi * s + si) * d;
                            let mb = gi * d;
                            for di in 0..d {
                                buf[vb + di] = buf[vb + di] + go * (vv[vb + di] - mv[mb + di]);
                            }
                        }
                    }
                });
            }
            if nodes[*m].requires_grad {
                accumulate(nodes, grads, *m, |buf| {
                    for gi in 0..gs {
                        let mb = gi * d;
                        for si in 0..s {
                            let go = g[gi * s + si] * two;
                            let vb = (gi * s + si) * d;
                            for di in 0..d {
                                buf[mb + di] = buf[mb + di] - go * (vv[vb + di] - mv[mb + di]);
                            }
                        }
                    }
                });
            }
        }
        Op::DotPairs { v, m } => {
            let vs = nodes[*v].value.shape().to_vec();
            let (gs, s, d) = (vs[0], vs[1], vs[2]);
            let vv = nodes[*v].value.data();
            let mv = nodes[*m].value.data();
            if nodes[*v].requires_grad {
                accumulate(nodes, grads, *v, |buf| {
                    for gi in 0..gs {
                        for si in 0..s {
                            let go = g[gi * s + si];
                            let vb = (gi * s + si) * d;
                            let mb = gi * d;
                            for di in 0..d {
                                buf[vb + di] = buf[vb + di] + go * mv[mb + di];
                            }
                        }
                    }
                });
            }
            if nodes[*m].requires_grad {
                accumulate(nodes, grads, *m, |buf| {
                    for gi in 0..gs {
                        let mb = gi * d;
                        for si in 0..s {
                            let go = g[gi * s + si];
                            let vb = (gi * s + si) * d;
                            for di in 0..d {
                                buf[mb + di] = buf[mb + di] + go * vv[vb + di];
                            }
                        }
                    }
                });
            }
        }
        Op::WeightedMean { c, v } => {
            let vs = nodes[*v].value.shape().to_vec();
            let (gs, s, d) = (vs[0], vs[1], vs[2]);
            let cv = nodes[*c].value.data();
            let vv = nodes[*v].value.data();
            let out = node.value.data();
            let den = node.saved.as_ref().expect("weighted_mean saved denominators");
            if nodes[*c].requires_grad {
                accumulate(nodes, grads, *c, |buf| {
                    for gi in 0..gs {
                        let ob = gi * d;
                        for si in 0..s {
                            let vb = (gi * s + si) * d;
                            let mut acc = T::zero();
                            for di in 0..d {
                                acc = acc + g[ob + di] * (vv[vb + di] - out[ob + di]);
                            }
                            buf[gi * s + si] = buf[gi * s + si] + acc / den[gi];
                        }
                    }
                });
            }
            if nodes[*v].requires_grad {
                accumulate(nodes, grads, *v, |buf| {
                    for gi in 0..gs {
                        let ob = gi * d;
                        for si in 0..s {
                            let scale = cv[gi * s + si] / den[gi];
                            let vb = (gi * s + si) * d;
                            for di in 0..d {
                                buf[vb + di] = buf[vb + di] + g[ob + di] * scale;
                            }
                        }
                    }
                });
            }
        }
        Op::LstmCell {
            x,
            h,
            s,
            wx,
            wh,
            b,
            hidden,
        } => lstm_backward(nodes, grads, id, *x, *h, *s, *wx, *wh, *b, *hidden, g),
    }
}

/// Shared driver for broadcasting binary elementwise backward passes.
/// `partials(av, bv, go)` returns (d/da, d/db) contributions at one element.
fn binary_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    a: usize,
    b: usize,
    g: &[T],
    partials: impl Fn(T, T, T) -> (T, T) + Copy,
) {
    let ashape = nodes[a].value.shape().to_vec();
    let bshape = nodes[b].value.shape().to_vec();
    let (kind, _) = bc_kind("binary", &ashape, &bshape).expect("validated at forward");
    let av = nodes[a].value.data();
    let bv = nodes[b].value.data();
    match kind {
        Bc::Same => {
            if nodes[a].requires_grad {
                accumulate(nodes, grads, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + partials(av[i], bv[i], g[i]).0;
                    }
                });
            }
            if nodes[b].requires_grad {
                accumulate(nodes, grads, b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + partials(av[i], bv[i], g[i]).1;
                    }
                });
            }
        }
        Bc::RhsScalar => {
            let bs = bv[0];
            if nodes[a].requires_grad {
                accumulate(nodes, grads, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + partials(av[i], bs, g[i]).0;
                    }
                });
            }
            if nodes[b].requires_grad {
                accumulate(nodes, grads, b, |buf| {
                    let mut acc = T::zero();
                    for i in 0..g.len() {
                        acc = acc + partials(av[i], bs, g[i]).1;
                    }
                    buf[0] = buf[0] + acc;
                });
            }
        }
        Bc::LhsScalar => {
            let asr = av[0];
            if nodes[a].requires_grad {
                accumulate(nodes, grads, a, |buf| {
                    let mut acc = T::zero();
                    for i in 0..g.len() {
                        acc = acc + partials(asr, bv[i], g[i]).0;
                    }
                    buf[0] = buf[0] + acc;
                });
            }
            if nodes[b].requires_grad {
                accumulate(nodes, grads, b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + partials(asr, bv[i], g[i]).1;
                    }
                });
            }
        }
        Bc::RhsTrail => {
            let rlen = bv.len();
            if nodes[a].requires_grad {
                accumulate(nodes, grads, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + partials(av[i], bv[i % rlen], g[i]).0;
                    }
                });
            }
            if nodes[b].requires_grad {
                accumulate(nodes, grads, b, |buf| {
                    for i in 0..g.len() {
                        let j = i % rlen;
                        buf[j] = buf[j] + partials(av[i], bv[j], g[i]).1;
                    }
                });
            }
        }
        Bc::LhsTrail => {
            let llen = av.len();
            if nodes[a].requires_grad {
                accumulate(nodes, grads, a, |buf| {
                    for i in 0..g.len() {
                        let j = i % llen;
                        buf[j] = buf[j] + partials(av[j], bv[i], g[i]).0;
                    }
                });
            }
            if nodes[b].requires_grad {
                accumulate(nodes, grads, b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + partials(av[i % llen], bv[i], g[i]).1;
                    }
                });
            }
        }
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_scalar<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|))
    let m = if x > T::zero() { x } else { T::zero() };
    m + (T::one() + (-x.abs()).exp()).ln()
}

// ── elementwise forward helpers ──────────────────────────────────────

fn binary_forward<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (kind, out_shape) = bc_kind(op, a.shape(), b.shape())?;
    let av = a.data();
    let bv = b.data();
    let data: Vec<T> = match kind {
        Bc::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
        Bc::RhsScalar => av.iter().map(|&x| f(x, bv[0])).collect(),
        Bc::LhsScalar => bv.iter().map(|&y| f(av[0], y)).collect(),
        Bc::RhsTrail => {
            let rlen = bv.len();
            av.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % rlen]))
                .collect()
        }
        Bc::LhsTrail => {
            let llen = av.len();
            bv.iter()
                .enumerate()
                .map(|(i, &y)| f(av[i % llen], y))
                .collect()
        }
    };
    Tensor::from_vec(out_shape, data)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'g Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Clone the current value off the tape.
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    /// Read the value without cloning.
    pub fn inspect<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument {
                what: "operands recorded on different tapes".into(),
            })
        }
    }

    fn binary(&self, other: Var<'g, T>, op: &'static str) -> Result<Var<'g, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let rg = self.tape.req(&[self.id, other.id]);
        let (value, node_op) = match op {
            "add" => (
                binary_forward(op, &a, &b, |x, y| x + y)?,
                Op::Add(self.id, other.id),
            ),
            "sub" => (
                binary_forward(op, &a, &b, |x, y| x - y)?,
                Op::Sub(self.id, other.id),
            ),
            "mul" => (
                binary_forward(op, &a, &b, |x, y| x * y)?,
                Op::Mul(self.id, other.id),
            ),
            "div" => {
                if b.data().iter().any(|&y| y == T::zero()) {
                    return Err(Error::Domain {
                        op: "div",
                        detail: "division by zero".into(),
                    });
                }
                (
                    binary_forward(op, &a, &b, |x, y| x / y)?,
                    Op::Div(self.id, other.id),
                )
            }
            _ => unreachable!(),
        };
        Ok(self.tape.push(value, node_op, rg, None))
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add")
    }
    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub")
    }
    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul")
    }
    pub fn div(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "div")
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.tape.req(&[self.id]);
        self.tape.push(value, op, rg, None)
    }

    pub fn neg(&self) -> Var<'g, T> {
        let v = self.value().map(|x| -x);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn exp(&self) -> Var<'g, T> {
        let v = self.value().map(|x| x.exp());
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'g, T>> {
        let val = self.value();
        if val.data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: "log of non-positive value".into(),
            });
        }
        Ok(self.unary(val.map(|x| x.ln()), Op::Log(self.id)))
    }

    pub fn sqrt(&self) -> Result<Var<'g, T>> {
        let val = self.value();
        if val.data().iter().any(|&x| x < T::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: "sqrt of negative value".into(),
            });
        }
        Ok(self.unary(val.map(|x| x.sqrt()), Op::Sqrt(self.id)))
    }

    pub fn tanh(&self) -> Var<'g, T> {
        let v = self.value().map(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let v = self.value().map(sigmoid_scalar);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn softplus(&self) -> Var<'g, T> {
        let v = self.value().map(softplus_scalar);
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn add_const(&self, c: T) -> Var<'g, T> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddConst(self.id, c))
    }

    pub fn mul_const(&self, c: T) -> Var<'g, T> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::MulConst(self.id, c))
    }

    /// Elementwise max(x, c).
    pub fn max_const(&self, c: T) -> Var<'g, T> {
        let v = self.value().map(|x| if x > c { x } else { c });
        self.unary(v, Op::MaxConst(self.id, c))
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.max_const(T::zero())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Var<'g, T> {
        let v = self.value().map(|x| {
            if x < lo {
                lo
            } else if x > hi {
                hi
            } else {
                x
            }
        });
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    pub fn matmul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (ashape, bshape) = (a.shape().to_vec(), b.shape().to_vec());
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(shape_err("matmul", &ashape, &bshape));
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let data = matmul_new(a.data(), b.data(), m, k, n);
        let rg = self.tape.req(&[self.id, other.id]);
        Ok(self.tape.push(
            Tensor::from_vec(vec![m, n], data)?,
            Op::Matmul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
            None,
        ))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument {
                what: format!("{op}: axis {axis} out of range for shape {shape:?}"),
            });
        }
        Ok(shape)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Var<'g, T>> {
        let shape = self.check_axis("softmax", axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value();
        let xv = x.data();
        let mut data = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    let v = xv[base + j * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xv[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    data[base + j * inner] = data[base + j * inner] / sum;
                }
            }
        }
        let rg = self.tape.req(&[self.id]);
        Ok(self.tape.push(
            Tensor::from_vec(shape, data)?,
            Op::Softmax { x: self.id, axis },
            rg,
            None,
        ))
    }

    /// log(softmax(x)) along `axis`, computed stably.
    pub fn log_softmax(&self, axis: usize) -> Result<Var<'g, T>> {
        let shape = self.check_axis("log_softmax", axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value();
        let xv = x.data();
        let mut data = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    let v = xv[base + j * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for j in 0..len {
                    sum = sum + (xv[base + j * inner] - mx).exp();
                }
                let lse = mx + sum.ln();
                for j in 0..len {
                    data[base + j * inner] = xv[base + j * inner] - lse;
                }
            }
        }
        let rg = self.tape.req(&[self.id]);
        Ok(self.tape.push(
            Tensor::from_vec(shape, data)?,
            Op::LogSoftmax { x: self.id, axis },
            rg,
            None,
        ))
    }

    /// Sum over one axis, collapsing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let shape = self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value();
        let xv = x.data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + xv[(o * len + j) * inner + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.tape.req(&[self.id]);
        Ok(self.tape.push(
            Tensor::from_vec(out_shape, data)?,
            Op::SumAxis { x: self.id, axis },
            rg,
            None,
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let shape = self.check_axis("mean_axis", axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value();
        let xv = x.data();
        let scale = T::one() / T::of(len as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + xv[(o * len + j) * inner + i];
                }
            }
        }
        for d in data.iter_mut() {
            *d = *d * scale;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.tape.req(&[self.id]);
        Ok(self.tape.push(
            Tensor::from_vec(out_shape, data)?,
            Op::MeanAxis { x: self.id, axis },
            rg,
            None,
        ))
    }

    pub fn sum_all(&self) -> Var<'g, T> {
        let total = self
            .value()
            .data()
            .iter()
            .fold(T::zero(), |a, &b| a + b);
        let rg = self.tape.req(&[self.id]);
        self.tape
            .push(Tensor::scalar(total), Op::SumAll(self.id), rg, None)
    }

    pub fn mean_all(&self) -> Var<'g, T> {
        let v = self.value();
        let total = v.data().iter().fold(T::zero(), |a, &b| a + b);
        let mean = total / T::of(v.numel() as f64);
        let rg = self.tape.req(&[self.id]);
        self.tape
            .push(Tensor::scalar(mean), Op::MeanAll(self.id), rg, None)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'g, T>> {
        let value = self.value().reshaped(shape)?;
        let rg = self.tape.req(&[self.id]);
        Ok(self.tape.push(value, Op::Reshape(self.id), rg, None))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let shape = self.check_axis("narrow", axis)?;
        if start + len > shape[axis] {
            return Err(Error::InvalidArgument {
                what: format!(
                    "narrow: range {start}..{} exceeds axis extent {} of shape {shape:?}",
                    start + len,
                    shape[axis]
                ),
            });
        }
        let (outer, full_len, inner) = axis_split(&shape, axis);
        let x = self.value();
        let xv = x.data();
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = (o * full_len + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&xv[src_base..src_base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let rg = self.tape.req(&[self.id]);
        Ok(self.tape.push(
            Tensor::from_vec(out_shape, data)?,
            Op::Narrow {
                x: self.id,
                axis,
                start,
                len,
            },
            rg,
            None,
        ))
    }

    /// Insert a new axis of extent `copies` at `axis`, repeating the data.
    pub fn expand_axis(&self, axis: usize, copies: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if axis > shape.len() {
            return Err(Error::InvalidArgument {
                what: format!("expand_axis: axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let x = self.value();
        let xv = x.data();
        let mut data = vec![T::zero(); outer * copies * inner];
        for o in 0..outer {
            let src = &xv[o * inner..(o + 1) * inner];
            for c in 0..copies {
                let dst_base = (o * copies + c) * inner;
                data[dst_base..dst_base + inner].copy_from_slice(src);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.insert(axis, copies);
        let rg = self.tape.req(&[self.id]);
        Ok(self.tape.push(
            Tensor::from_vec(out_shape, data)?,
            Op::ExpandAxis {
                x: self.id,
                axis,
                copies,
            },
            rg,
            None,
        ))
    }

    /// Select rows (axis 0) by index, with repetition allowed.
    pub fn gather_rows(&self, indices: Rc<Vec<usize>>) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::InvalidArgument {
                what: "gather_rows on a scalar".into(),
            });
        }
        let n = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument {
                what: format!("gather_rows: index {bad} out of range for {n} rows"),
            });
        }
        let row: usize = shape[1..].iter().product();
        let x = self.value();
        let xv = x.data();
        let mut data = vec![T::zero(); indices.len() * row];
        for (r, &src_row) in indices.iter().enumerate() {
            data[r * row..(r + 1) * row].copy_from_slice(&xv[src_row * row..(src_row + 1) * row]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let rg = self.tape.req(&[self.id]);
        Ok(self.tape.push(
            Tensor::from_vec(out_shape, data)?,
            Op::GatherRows {
                x: self.id,
                indices,
            },
            rg,
            None,
        ))
    }

    /// Squared L2 norm of all elements.
    pub fn sq_sum(&self) -> Result<Var<'g, T>> {
        self.mul(*self).map(|v| v.sum_all())
    }

    /// Frobenius norm of all elements.
    pub fn frobenius(&self) -> Result<Var<'g, T>> {
        self.sq_sum()?.sqrt()
    }
}

// ── fused network primitives ─────────────────────────────────────────

/// 2D convolution, NHWC input, [K, K, Ci, Co] weights. `pad` is the
/// (leading, trailing) zero padding applied to both spatial axes.
pub fn conv2d<'g, T: Scalar>(
    x: Var<'g, T>,
    w: Var<'g, T>,
    b: Var<'g, T>,
    stride: usize,
    pad: (usize, usize),
) -> Result<Var<'g, T>> {
    x.same_tape(&w)?;
    x.same_tape(&b)?;
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] {
        return Err(shape_err("conv2d", &xs, &ws));
    }
    let (bs, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, co) = (ws[0], ws[3]);
    if ws[0] != ws[1] {
        return Err(Error::InvalidArgument {
            what: format!("conv2d: non-square kernel {:?}", &ws[..2]),
        });
    }
    if b.shape() != vec![co] {
        return Err(shape_err("conv2d bias", &b.shape(), &[co]));
    }
    let (pb, pe) = pad;
    if h + pb + pe < k || wd + pb + pe < k {
        return Err(shape_err("conv2d window", &xs, &ws));
    }
    let oh = (h + pb + pe - k) / stride + 1;
    let ow = (wd + pb + pe - k) / stride + 1;
    let xv = x.value();
    let wv = w.value();
    let bv = b.value();
    let xd = xv.data();
    let wdat = wv.data();
    let bd = bv.data();
    let mut out = vec![T::zero(); bs * oh * ow * co];
    for bi in 0..bs {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((bi * oh + oy) * ow + ox) * co;
                out[obase..obase + co].copy_from_slice(bd);
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pb as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pb as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xbase = ((bi * h + iy as usize) * wd + ix as usize) * ci;
                        let wbase = (ky * k + kx) * ci * co;
                        for c in 0..ci {
                            let xvv = xd[xbase + c];
                            let wrow = &wdat[wbase + c * co..wbase + (c + 1) * co];
                            let orow = &mut out[obase..obase + co];
                            for oc in 0..co {
                                orow[oc] = orow[oc] + xvv * wrow[oc];
                            }
                        }
                    }
                }
            }
        }
    }
    let rg = x.tape.req(&[x.id, w.id, b.id]);
    Ok(x.tape.push(
        Tensor::from_vec(vec![bs, oh, ow, co], out)?,
        Op::Conv2d {
            x: x.id,
            w: w.id,
            b: b.id,
            stride,
            pad,
        },
        rg,
        None,
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    out_id: usize,
    x: usize,
    w: usize,
    b: usize,
    stride: usize,
    pad: (usize, usize),
    g: &[T],
) {
    let xs = nodes[x].value.shape().to_vec();
    let ws = nodes[w].value.shape().to_vec();
    let os = nodes[out_id].value.shape().to_vec();
    let (bs, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, co) = (ws[0], ws[3]);
    let (oh, ow) = (os[1], os[2]);
    let (pb, _pe) = pad;
    let xd = nodes[x].value.data();
    let wdat = nodes[w].value.data();

    if nodes[b].requires_grad {
        accumulate(nodes, grads, b, |buf| {
            for base in (0..g.len()).step_by(co) {
                for oc in 0..co {
                    buf[oc] = buf[oc] + g[base + oc];
                }
            }
        });
    }
    let want_x = nodes[x].requires_grad;
    let want_w = nodes[w].requires_grad;
    if !want_x && !want_w {
        return;
    }
    let mut dx = if want_x {
        vec![T::zero(); xd.len()]
    } else {
        Vec::new()
    };
    let mut dw = if want_w {
        vec![T::zero(); wdat.len()]
    } else {
        Vec::new()
    };
    for bi in 0..bs {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((bi * oh + oy) * ow + ox) * co;
                let grow = &g[obase..obase + co];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pb as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pb as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xbase = ((bi * h + iy as usize) * wd + ix as usize) * ci;
                        let wbase = (ky * k + kx) * ci * co;
                        for c in 0..ci {
                            let wrow = &wdat[wbase + c * co..wbase + (c + 1) * co];
                            let mut acc = T::zero();
                            for oc in 0..co {
                                acc = acc + grow[oc] * wrow[oc];
                            }
                            if want_x {
                                dx[xbase + c] = dx[xbase + c] + acc;
                            }
                            if want_w {
                                let xvv = xd[xbase + c];
                                let dwrow = &mut dw[wbase + c * co..wbase + (c + 1) * co];
                                for oc in 0..co {
                                    dwrow[oc] = dwrow[oc] + xvv * grow[oc];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if want_x {
        accumulate(nodes, grads, x, |buf| {
            for i in 0..buf.len() {
                buf[i] = buf[i] + dx[i];
            }
        });
    }
    if want_w {
        accumulate(nodes, grads, w, |buf| {
            for i in 0..buf.len() {
                buf[i] = buf[i] + dw[i];
            }
        });
    }
}

/// Votes from Frobenius-normalized pose transforms.
///
/// `w`: [Co, S, 16] transform matrices (flattened 4x4, row-major), `p`:
/// [P, S, 16] input poses. Output [P, Co, S, 16] where
/// out[p,co,s] = (W[co,s] / ||W[co,s]||_F) · P[p,s].
pub fn vote_transform<'g, T: Scalar>(w: Var<'g, T>, p: Var<'g, T>) -> Result<Var<'g, T>> {
    w.same_tape(&p)?;
    let ws = w.shape();
    let ps = p.shape();
    if ws.len() != 3 || ps.len() != 3 || ws[2] != 16 || ps[2] != 16 || ws[1] != ps[1] {
        return Err(shape_err("vote_transform", &ws, &ps));
    }
    let (co, s) = (ws[0], ws[1]);
    let pn = ps[0];
    let wv = w.value();
    let pv = p.value();
    let wd = wv.data();
    let pd = pv.data();
    let mut norms = vec![T::zero(); co * s];
    let floor = T::of(1e-8);
    for i in 0..co * s {
        let mut acc = T::zero();
        for e in 0..16 {
            let x = wd[i * 16 + e];
            acc = acc + x * x;
        }
        let nrm = acc.sqrt();
        if nrm < floor {
            return Err(Error::Domain {
                op: "vote_transform",
                detail: format!("transform matrix {i} has vanishing Frobenius norm"),
            });
        }
        norms[i] = nrm;
    }
    let mut out = vec![T::zero(); pn * co * s * 16];
    for ci in 0..co {
        for si in 0..s {
            let wbase = (ci * s + si) * 16;
            let inv = T::one() / norms[ci * s + si];
            for pi in 0..pn {
                let pbase = (pi * s + si) * 16;
                let obase = ((pi * co + ci) * s + si) * 16;
                // 4x4 matrix product (W/||W||) P
                for r in 0..4 {
                    for cc in 0..4 {
                        let mut acc = T::zero();
                        for t in 0..4 {
                            acc = acc + wd[wbase + r * 4 + t] * pd[pbase + t * 4 + cc];
                        }
                        out[obase + r * 4 + cc] = acc * inv;
                    }
                }
            }
        }
    }
    let rg = w.tape.req(&[w.id, p.id]);
    Ok(w.tape.push(
        Tensor::from_vec(vec![pn, co, s, 16], out)?,
        Op::VoteTransform { w: w.id, p: p.id },
        rg,
        Some(norms),
    ))
}

fn vote_transform_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    out_id: usize,
    w: usize,
    p: usize,
    g: &[T],
) {
    let ws = nodes[w].value.shape().to_vec();
    let ps = nodes[p].value.shape().to_vec();
    let (co, s) = (ws[0], ws[1]);
    let pn = ps[0];
    let wd = nodes[w].value.data();
    let pd = nodes[p].value.data();
    let norms = nodes[out_id].saved.as_ref().expect("vote_transform norms");
    let want_w = nodes[w].requires_grad;
    let want_p = nodes[p].requires_grad;
    let mut dw = if want_w {
        vec![T::zero(); wd.len()]
    } else {
        Vec::new()
    };
    let mut dp = if want_p {
        vec![T::zero(); pd.len()]
    } else {
        Vec::new()
    };
    let mut a = [T::zero(); 16];
    let mut da = [T::zero(); 16];
    for ci in 0..co {
        for si in 0..s {
            let wbase = (ci * s + si) * 16;
            let inv = T::one() / norms[ci * s + si];
            for e in 0..16 {
                a[e] = wd[wbase + e] * inv;
                da[e] = T::zero();
            }
            for pi in 0..pn {
                let pbase = (pi * s + si) * 16;
                let obase = ((pi * co + ci) * s + si) * 16;
                let gv = &g[obase..obase + 16];
                if want_p {
                    // dP += A^T · dV
                    for r in 0..4 {
                        for cc in 0..4 {
                            let mut acc = T::zero();
                            for t in 0..4 {
                                acc = acc + a[t * 4 + r] * gv[t * 4 + cc];
                            }
                            dp[pbase + r * 4 + cc] = dp[pbase + r * 4 + cc] + acc;
                        }
                    }
                }
                if want_w {
                    // dA += dV · P^T
                    for r in 0..4 {
                        for cc in 0..4 {
                            let mut acc = T::zero();
                            for t in 0..4 {
                                acc = acc + gv[r * 4 + t] * pd[pbase + cc * 4 + t];
                            }
                            da[r * 4 + cc] = da[r * 4 + cc] + acc;
                        }
                    }
                }
            }
            if want_w {
                // dW = (dA - (dA : A) A) / ||W||
                let mut dot = T::zero();
                for e in 0..16 {
                    dot = dot + da[e] * a[e];
                }
                for e in 0..16 {
                    dw[wbase + e] = dw[wbase + e] + (da[e] - dot * a[e]) * inv;
                }
            }
        }
    }
    if want_w {
        accumulate(nodes, grads, w, |buf| {
            for i in 0..buf.len() {
                buf[i] = buf[i] + dw[i];
            }
        });
    }
    if want_p {
        accumulate(nodes, grads, p, |buf| {
            for i in 0..buf.len() {
                buf[i] = buf[i] + dp[i];
            }
        });
    }
}

/// Pairwise squared distances: v [G,S,D], m [G,D] -> [G,S].
pub fn sq_dist_pairs<'g, T: Scalar>(v: Var<'g, T>, m: Var<'g, T>) -> Result<Var<'g, T>> {
    v.same_tape(&m)?;
    let vs = v.shape();
    let ms = m.shape();
    if vs.len() != 3 || ms.len() != 2 || vs[0] != ms[0] || vs[2] != ms[1] {
        return Err(shape_err("sq_dist_pairs", &vs, &ms));
    }
    let (gs, s, d) = (vs[0], vs[1], vs[2]);
    let vv = v.value();
    let mv = m.value();
    let vd = vv.data();
    let md = mv.data();
    let mut out = vec![T::zero(); gs * s];
    for gi in 0..gs {
        let mb = gi * d;
        for si in 0..s {
            let vb = (gi * s + si) * d;
            let mut acc = T::zero();
            for di in 0..d {
                let diff = vd[vb + di] - md[mb + di];
                acc = acc + diff * diff;
            }
            out[gi * s + si] = acc;
        }
    }
    let rg = v.tape.req(&[v.id, m.id]);
    Ok(v.tape.push(
        Tensor::from_vec(vec![gs, s], out)?,
        Op::SqDistPairs { v: v.id, m: m.id },
        rg,
        None,
    ))
}

/// Pairwise dot products: v [G,S,D], m [G,D] -> [G,S].
pub fn dot_pairs<'g, T: Scalar>(v: Var<'g, T>, m: Var<'g, T>) -> Result<Var<'g, T>> {
    v.same_tape(&m)?;
    let vs = v.shape();
    let ms = m.shape();
    if vs.len() != 3 || ms.len() != 2 || vs[0] != ms[0] || vs[2] != ms[1] {
        return Err(shape_err("dot_pairs", &vs, &ms));
    }
    let (gs, s, d) = (vs[0], vs[1], vs[2]);
    let vv = v.value();
    let mv = m.value();
    let vd = vv.data();
    let md = mv.data();
    let mut out = vec![T::zero(); gs * s];
    for gi in 0..gs {
        let mb = gi * d;
        for si in 0..s {
            let vb = (gi * s + si) * d;
            let mut acc = T::zero();
            for di in 0..d {
                acc = acc + vd[vb + di] * md[mb + di];
            }
            out[gi * s + si] = acc;
        }
    }
    let rg = v.tape.req(&[v.id, m.id]);
    Ok(v.tape.push(
        Tensor::from_vec(vec![gs, s], out)?,
        Op::DotPairs { v: v.id, m: m.id },
        rg,
        None,
    ))
}

/// Compatibility-weighted mean pose: c [G,S], v [G,S,D] -> [G,D],
/// out[g] = sum_s c[g,s] v[g,s] / sum_s c[g,s].
pub fn weighted_mean<'g, T: Scalar>(c: Var<'g, T>, v: Var<'g, T>) -> Result<Var<'g, T>> {
    c.same_tape(&v)?;
    let cs = c.shape();
    let vs = v.shape();
    if cs.len() != 2 || vs.len() != 3 || cs[0] != vs[0] || cs[1] != vs[1] {
        return Err(shape_err("weighted_mean", &cs, &vs));
    }
    let (gs, s, d) = (vs[0], vs[1], vs[2]);
    let cv = c.value();
    let vv = v.value();
    let cd = cv.data();
    let vd = vv.data();
    let mut den = vec![T::zero(); gs];
    for gi in 0..gs {
        let mut acc = T::zero();
        for si in 0..s {
            acc = acc + cd[gi * s + si];
        }
        if acc == T::zero() {
            return Err(Error::Domain {
                op: "weighted_mean",
                detail: format!("group {gi} has zero total compatibility"),
            });
        }
        den[gi] = acc;
    }
    let mut out = vec![T::zero(); gs * d];
    for gi in 0..gs {
        let ob = gi * d;
        for si in 0..s {
            let w = cd[gi * s + si];
            let vb = (gi * s + si) * d;
            for di in 0..d {
                out[ob + di] = out[ob + di] + w * vd[vb + di];
            }
        }
        for di in 0..d {
            out[ob + di] = out[ob + di] / den[gi];
        }
    }
    let rg = c.tape.req(&[c.id, v.id]);
    Ok(c.tape.push(
        Tensor::from_vec(vec![gs, d], out)?,
        Op::WeightedMean { c: c.id, v: v.id },
        rg,
        Some(den),
    ))
}

/// One LSTM cell step over a batch of rows.
///
/// `x` [N,I], `h` [N,H], `s` [N,H], `wx` [I,4H], `wh` [H,4H], `b` [4H].
/// Gate order along the 4H axis: input, forget, output, candidate.
/// Returns [N, 2H] = concat(h', s') along axis 1.
pub fn lstm_cell<'g, T: Scalar>(
    x: Var<'g, T>,
    h: Var<'g, T>,
    s: Var<'g, T>,
    wx: Var<'g, T>,
    wh: Var<'g, T>,
    b: Var<'g, T>,
) -> Result<Var<'g, T>> {
    x.same_tape(&h)?;
    x.same_tape(&s)?;
    x.same_tape(&wx)?;
    x.same_tape(&wh)?;
    x.same_tape(&b)?;
    let xs = x.shape();
    let hs = h.shape();
    let wxs = wx.shape();
    let whs = wh.shape();
    if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] {
        return Err(shape_err("lstm_cell", &xs, &hs));
    }
    let (n, i) = (xs[0], xs[1]);
    let hidden = hs[1];
    if wxs != vec![i, 4 * hidden] || whs != vec![hidden, 4 * hidden] {
        return Err(shape_err("lstm_cell weights", &wxs, &whs));
    }
    if s.shape() != vec![n, hidden] || b.shape() != vec![4 * hidden] {
        return Err(shape_err("lstm_cell state", &s.shape(), &[n, hidden]));
    }
    let xv = x.value();
    let hv = h.value();
    let sv = s.value();
    let wxv = wx.value();
    let whv = wh.value();
    let bv = b.value();
    // z = x wx + h wh + b
    let mut z = vec![T::zero(); n * 4 * hidden];
    for r in 0..n {
        z[r * 4 * hidden..(r + 1) * 4 * hidden].copy_from_slice(bv.data());
    }
    matmul_acc(xv.data(), wxv.data(), &mut z, n, i, 4 * hidden);
    matmul_acc(hv.data(), whv.data(), &mut z, n, hidden, 4 * hidden);
    // activated gates saved for backward
    let mut gates = vec![T::zero(); n * 4 * hidden];
    let mut out = vec![T::zero(); n * 2 * hidden];
    let sd = sv.data();
    for r in 0..n {
        let zb = r * 4 * hidden;
        for j in 0..hidden {
            let ig = sigmoid_scalar(z[zb + j]);
            let fg = sigmoid_scalar(z[zb + hidden + j]);
            let og = sigmoid_scalar(z[zb + 2 * hidden + j]);
            let cg = z[zb + 3 * hidden + j].tanh();
            gates[zb + j] = ig;
            gates[zb + hidden + j] = fg;
            gates[zb + 2 * hidden + j] = og;
            gates[zb + 3 * hidden + j] = cg;
            let s_new = fg * sd[r * hidden + j] + ig * cg;
            out[r * 2 * hidden + hidden + j] = s_new;
            out[r * 2 * hidden + j] = og * s_new.tanh();
        }
    }
    let rg = x
        .tape
        .req(&[x.id, h.id, s.id, wx.id, wh.id, b.id]);
    Ok(x.tape.push(
        Tensor::from_vec(vec![n, 2 * hidden], out)?,
        Op::LstmCell {
            x: x.id,
            h: h.id,
            s: s.id,
            wx: wx.id,
            wh: wh.id,
            b: b.id,
            hidden,
        },
        rg,
        Some(gates),
    ))
}

#[allow(clippy::too_many_arguments)]
fn lstm_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    out_id: usize,
    x: usize,
    h: usize,
    s: usize,
    wx: usize,
    wh: usize,
    b: usize,
    hidden: usize,
    g: &[T],
) {
    let n = nodes[x].value.shape()[0];
    let i = nodes[x].value.shape()[1];
    let gates = nodes[out_id].saved.as_ref().expect("lstm gates");
    let out = nodes[out_id].value.data();
    let sd = nodes[s].value.data();
    let one = T::one();
    // dz in gate pre-activation space
    let mut dz = vec![T::zero(); n * 4 * hidden];
    let mut ds_prev = vec![T::zero(); n * hidden];
    for r in 0..n {
        let zb = r * 4 * hidden;
        for j in 0..hidden {
            let ig = gates[zb + j];
            let fg = gates[zb + hidden + j];
            let og = gates[zb + 2 * hidden + j];
            let cg = gates[zb + 3 * hidden + j];
            let s_new = out[r * 2 * hidden + hidden + j];
            let u = s_new.tanh();
            let dh_new = g[r * 2 * hidden + j];
            let ds_ext = g[r * 2 * hidden + hidden + j];
            let d_og = dh_new * u;
            let ds_tot = ds_ext + dh_new * og * (one - u * u);
            let d_fg = ds_tot * sd[r * hidden + j];
            let d_ig = ds_tot * cg;
            let d_cg = ds_tot * ig;
            dz[zb + j] = d_ig * ig * (one - ig);
            dz[zb + hidden + j] = d_fg * fg * (one - fg);
            dz[zb + 2 * hidden + j] = d_og * og * (one - og);
            dz[zb + 3 * hidden + j] = d_cg * (one - cg * cg);
            ds_prev[r * hidden + j] = ds_tot * fg;
        }
    }
    if nodes[s].requires_grad {
        accumulate(nodes, grads, s, |buf| {
            for t in 0..buf.len() {
                buf[t] = buf[t] + ds_prev[t];
            }
        });
    }
    if nodes[b].requires_grad {
        accumulate(nodes, grads, b, |buf| {
            for r in 0..n {
                for j in 0..4 * hidden {
                    buf[j] = buf[j] + dz[r * 4 * hidden + j];
                }
            }
        });
    }
    if nodes[x].requires_grad {
        let wxt = transpose2(nodes[wx].value.data(), i, 4 * hidden);
        accumulate(nodes, grads, x, |buf| {
            matmul_acc(&dz, &wxt, buf, n, 4 * hidden, i);
        });
    }
    if nodes[h].requires_grad {
        let wht = transpose2(nodes[wh].value.data(), hidden, 4 * hidden);
        accumulate(nodes, grads, h, |buf| {
            matmul_acc(&dz, &wht, buf, n, 4 * hidden, hidden);
        });
    }
    if nodes[wx].requires_grad {
        let xt = transpose2(nodes[x].value.data(), n, i);
        accumulate(nodes, grads, wx, |buf| {
            matmul_acc(&xt, &dz, buf, i, n, 4 * hidden);
        });
    }
    if nodes[wh].requires_grad {
        let ht = transpose2(nodes[h].value.data(), n, hidden);
        accumulate(nodes, grads, wh, |buf| {
            matmul_acc(&ht, &dz, buf, hidden, n, 4 * hidden);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rt(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    /// Check a primitive's VJP against central differences; the output is
    /// reduced to a scalar through a fixed random weighting so the full
    /// Jacobian is exercised.
    fn check_vjp<F>(name: &str, points: Vec<Tensor<f64>>, f: F)
    where
        F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
    {
        let mut r = rng(0xC0FFEE ^ name.len() as u64);
        let named: Vec<(String, Tensor<f64>)> = points
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("{name}.{i}"), t))
            .collect();
        // probe output shape to build the weighting
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = named.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars).unwrap();
        let w = rt(&out.shape(), -1.0, 1.0, &mut r);
        let report = grad_check(
            |tape, vars| {
                let out = f(tape, vars)?;
                out.mul(tape.constant(w.clone())).map(|v| v.sum_all())
            },
            &named,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(
            report.passes(),
            "VJP mismatch for {name}:\n{}",
            report.table()
        );
    }

    #[test]
    fn vjp_elementwise_binary_same_shape() {
        let mut r = rng(1);
        let a = rt(&[3, 4], -2.0, 2.0, &mut r);
        let b = rt(&[3, 4], -2.0, 2.0, &mut r);
        check_vjp("add", vec![a.clone(), b.clone()], |_t, v| v[0].add(v[1]));
        check_vjp("sub", vec![a.clone(), b.clone()], |_t, v| v[0].sub(v[1]));
        check_vjp("mul", vec![a.clone(), b.clone()], |_t, v| v[0].mul(v[1]));
        let bpos = rt(&[3, 4], 0.5, 2.0, &mut r);
        check_vjp("div", vec![a, bpos], |_t, v| v[0].div(v[1]));
    }

    #[test]
    fn vjp_broadcast_leading_axis_and_scalar() {
        let mut r = rng(2);
        let a = rt(&[4, 3], -2.0, 2.0, &mut r);
        let b = rt(&[3], -2.0, 2.0, &mut r);
        check_vjp("mul_trail", vec![a.clone(), b.clone()], |_t, v| {
            v[0].mul(v[1])
        });
        check_vjp("add_trail_rev", vec![b, a.clone()], |_t, v| v[0].add(v[1]));
        let s = rt(&[1], 0.5, 2.0, &mut r);
        check_vjp("div_scalar", vec![a.clone(), s.clone()], |_t, v| {
            v[0].div(v[1])
        });
        check_vjp("mul_scalar_lhs", vec![s, a], |_t, v| v[0].mul(v[1]));
    }

    #[test]
    fn vjp_unary() {
        let mut r = rng(3);
        let x = rt(&[2, 5], -2.0, 2.0, &mut r);
        check_vjp("neg", vec![x.clone()], |_t, v| Ok(v[0].neg()));
        check_vjp("exp", vec![x.clone()], |_t, v| Ok(v[0].exp()));
        check_vjp("tanh", vec![x.clone()], |_t, v| Ok(v[0].tanh()));
        check_vjp("sigmoid", vec![x.clone()], |_t, v| Ok(v[0].sigmoid()));
        check_vjp("softplus", vec![x.clone()], |_t, v| Ok(v[0].softplus()));
        let pos = rt(&[2, 5], 0.2, 2.0, &mut r);
        check_vjp("log", vec![pos.clone()], |_t, v| v[0].log());
        check_vjp("sqrt", vec![pos], |_t, v| v[0].sqrt());
        check_vjp("add_const", vec![x.clone()], |_t, v| {
            Ok(v[0].add_const(0.7))
        });
        check_vjp("mul_const", vec![x.clone()], |_t, v| {
            Ok(v[0].mul_const(-1.3))
        });
        // keep points away from the kink so central differences are valid
        let away = x.map(|v| if v.abs() < 0.1 { v + 0.25 } else { v });
        check_vjp("max_const", vec![away.clone()], |_t, v| {
            Ok(v[0].max_const(0.0))
        });
        let inside = rt(&[2, 5], -0.8, 0.8, &mut r);
        check_vjp("clamp", vec![inside], |_t, v| Ok(v[0].clamp(-0.9, 0.9)));
    }

    #[test]
    fn vjp_matmul_softmax_reductions() {
        let mut r = rng(4);
        let a = rt(&[3, 4], -2.0, 2.0, &mut r);
        let b = rt(&[4, 2], -2.0, 2.0, &mut r);
        check_vjp("matmul", vec![a.clone(), b], |_t, v| v[0].matmul(v[1]));
        let x = rt(&[3, 5], -2.0, 2.0, &mut r);
        check_vjp("softmax", vec![x.clone()], |_t, v| v[0].softmax(1));
        check_vjp("softmax_axis0", vec![x.clone()], |_t, v| v[0].softmax(0));
        check_vjp("log_softmax", vec![x.clone()], |_t, v| v[0].log_softmax(1));
        check_vjp("sum_axis", vec![x.clone()], |_t, v| v[0].sum_axis(1));
        check_vjp("mean_axis", vec![x.clone()], |_t, v| v[0].mean_axis(0));
        check_vjp("sum_all", vec![x.clone()], |_t, v| Ok(v[0].sum_all()));
        check_vjp("mean_all", vec![x], |_t, v| Ok(v[0].mean_all()));
    }

    #[test]
    fn vjp_shape_ops() {
        let mut r = rng(5);
        let a = rt(&[2, 3], -2.0, 2.0, &mut r);
        let b = rt(&[2, 2], -2.0, 2.0, &mut r);
        check_vjp("concat", vec![a.clone(), b], |t, v| {
            t.concat(&[v[0], v[1]], 1)
        });
        let x = rt(&[4, 5], -2.0, 2.0, &mut r);
        check_vjp("narrow", vec![x.clone()], |_t, v| v[0].narrow(1, 1, 3));
        check_vjp("reshape", vec![x.clone()], |_t, v| {
            v[0].reshape(vec![2, 10])
        });
        check_vjp("expand_axis", vec![x.clone()], |_t, v| {
            v[0].expand_axis(1, 3)
        });
        let idx = Rc::new(vec![2usize, 0, 2, 3]);
        check_vjp("gather_rows", vec![x], |_t, v| {
            v[0].gather_rows(Rc::clone(&idx))
        });
    }

    #[test]
    fn vjp_conv2d() {
        let mut r = rng(6);
        let x = rt(&[2, 5, 5, 3], -2.0, 2.0, &mut r);
        let w = rt(&[3, 3, 3, 4], -1.0, 1.0, &mut r);
        let b = rt(&[4], -1.0, 1.0, &mut r);
        check_vjp("conv2d_valid", vec![x.clone(), w.clone(), b.clone()], |_t, v| {
            conv2d(v[0], v[1], v[2], 1, (0, 0))
        });
        check_vjp("conv2d_same_s2", vec![x, w, b], |_t, v| {
            conv2d(v[0], v[1], v[2], 2, (1, 1))
        });
    }

    #[test]
    fn vjp_routing_primitives() {
        let mut r = rng(7);
        let w = rt(&[2, 3, 16], -1.5, 1.5, &mut r);
        let p = rt(&[4, 3, 16], -1.5, 1.5, &mut r);
        check_vjp("vote_transform", vec![w, p], |_t, v| {
            vote_transform(v[0], v[1])
        });
        let votes = rt(&[3, 5, 4], -2.0, 2.0, &mut r);
        let mu = rt(&[3, 4], -2.0, 2.0, &mut r);
        check_vjp("sq_dist_pairs", vec![votes.clone(), mu.clone()], |_t, v| {
            sq_dist_pairs(v[0], v[1])
        });
        check_vjp("dot_pairs", vec![votes.clone(), mu], |_t, v| {
            dot_pairs(v[0], v[1])
        });
        let c = rt(&[3, 5], 0.1, 1.0, &mut r);
        check_vjp("weighted_mean", vec![c, votes], |_t, v| {
            weighted_mean(v[0], v[1])
        });
    }

    #[test]
    fn vjp_lstm_cell() {
        let mut r = rng(8);
        let n = 3;
        let i = 5;
        let hid = 4;
        let x = rt(&[n, i], -1.5, 1.5, &mut r);
        let h = rt(&[n, hid], -1.0, 1.0, &mut r);
        let s = rt(&[n, hid], -1.0, 1.0, &mut r);
        let wx = rt(&[i, 4 * hid], -0.8, 0.8, &mut r);
        let wh = rt(&[hid, 4 * hid], -0.8, 0.8, &mut r);
        let b = rt(&[4 * hid], -0.5, 0.5, &mut r);
        check_vjp("lstm_cell", vec![x, h, s, wx, wh, b], |_t, v| {
            lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5])
        });
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let tape = Tape::new();
        let mut r = rng(9);
        let p = rt(&[4, 4], -2.0, 2.0, &mut r);
        let eye = tape.constant(Tensor::eye4());
        let pv = tape.leaf(p.clone());
        let out = eye.matmul(pv).unwrap();
        assert_eq!(out.value().data(), p.data());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = x.softmax(0).unwrap().value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_a_distribution_on_random_inputs() {
        let mut r = rng(10);
        for _ in 0..32 {
            let tape = Tape::<f64>::new();
            let x = tape.constant(rt(&[4, 6], -50.0, 50.0, &mut r));
            let y = x.softmax(1).unwrap().value();
            for gi in 0..4 {
                let row = &y.data()[gi * 6..(gi + 1) * 6];
                assert!(row.iter().all(|&v| v >= 0.0));
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
            }
        }
    }

    #[test]
    fn frobenius_of_ones_4x4() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[4, 4]));
        let f = x.frobenius().unwrap();
        assert!((f.value().item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let mut r = rng(11);
        let x = tape.leaf(rt(&[2, 3, 2], -2.0, 2.0, &mut r));
        let loss = x.sum_all();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(x).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let loss = x.sigmoid().sum_all();
        let grads = tape.backward(loss).unwrap();
        assert!((grads.wrt(x).unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn differentiation_is_linear() {
        // grad of (f+g) equals grad f + grad g on shared inputs
        let mut r = rng(12);
        let x0 = rt(&[3, 3], -2.0, 2.0, &mut r);
        let grad_of = |combined: bool, part: u8| -> Vec<f64> {
            let tape = Tape::<f64>::new();
            let x = tape.leaf(x0.clone());
            let f = x.exp().sum_all();
            let g = x.mul(x).unwrap().mean_all();
            let loss = match (combined, part) {
                (true, _) => f.add(g).unwrap(),
                (false, 0) => f,
                (false, _) => g,
            };
            let grads = tape.backward(loss).unwrap();
            grads.wrt(x).unwrap().data().to_vec()
        };
        let sum_grad = grad_of(true, 0);
        let f_grad = grad_of(false, 0);
        let g_grad = grad_of(false, 1);
        for i in 0..sum_grad.len() {
            assert!((sum_grad[i] - (f_grad[i] + g_grad[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || -> Vec<u64> {
            let mut r = rng(13);
            let tape = Tape::<f64>::new();
            let x = tape.leaf(rt(&[4, 4], -2.0, 2.0, &mut r));
            let w = tape.leaf(rt(&[4, 4], -2.0, 2.0, &mut r));
            let y = x.matmul(w).unwrap().sigmoid().softmax(1).unwrap();
            let loss = y.mean_all();
            let grads = tape.backward(loss).unwrap();
            let mut bits: Vec<u64> = y.value().data().iter().map(|v| v.to_bits()).collect();
            bits.extend(grads.wrt(w).unwrap().data().iter().map(|v| v.to_bits()));
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        match a.matmul(b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        match a.add(b) {
            Err(Error::ShapeMismatch { .. }) => {}
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn domain_errors_for_log_div_sqrt() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(x.log(), Err(Error::Domain { op: "log", .. })));
        let y = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(y.div(x), Err(Error::Domain { op: "div", .. })));
        let z = tape.leaf(Tensor::from_vec(vec![1], vec![-1.0]).unwrap());
        assert!(matches!(z.sqrt(), Err(Error::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.backward(x),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn lstm_zero_weights_give_zero_outputs() {
        let tape = Tape::<f64>::new();
        let mut r = rng(14);
        let x = tape.leaf(rt(&[2, 3], -2.0, 2.0, &mut r));
        let h = tape.constant(Tensor::zeros(&[2, 4]));
        let s = tape.constant(Tensor::zeros(&[2, 4]));
        let wx = tape.leaf(Tensor::zeros(&[3, 16]));
        let wh = tape.leaf(Tensor::zeros(&[4, 16]));
        let b = tape.leaf(Tensor::zeros(&[16]));
        let out = lstm_cell(x, h, s, wx, wh, b).unwrap().value();
        // candidate tanh(0)=0 gated by sigmoid(0)=0.5 stays 0; h' = 0.5*tanh(0)
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vote_transform_rejects_vanishing_norm() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(&[1, 1, 16]));
        let p = tape.leaf(Tensor::ones(&[1, 1, 16]));
        assert!(matches!(
            vote_transform(w, p),
            Err(Error::Domain {
                op: "vote_transform",
                ..
            })
        ));
    }
}
