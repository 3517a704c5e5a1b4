//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse creation order. Nodes built only from constants carry no
//! gradient, which is how stop-gradient targets are expressed.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{for_each_index, gemm_nn, gemm_nt, gemm_tn, strides_of, Tensor};

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Sqrt,
    Relu,
    Gelu,
    SmoothL1(f64),
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        shared_rhs: bool,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Reshape(usize),
    SumAxis {
        a: usize,
        axis: usize,
    },
    SumAll(usize),
    MaxAxis {
        a: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    Unary {
        a: usize,
        kind: Unary,
    },
    Softmax(usize),
    LogSumExp {
        a: usize,
        probs: Vec<f64>,
    },
    LayerNorm {
        a: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        a: usize,
        index: Vec<Vec<usize>>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads[v.id].as_ref()
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads[v.id].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::new(
            nodes[loss.id].value.shape().to_vec(),
            vec![1.0],
        ));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let mut send = |i: usize, t: Tensor| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_scaled(&t, 1.0),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    send(*a, unbroadcast(&g, val(*a).shape()));
                    send(*b, unbroadcast(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, unbroadcast(&g, val(*a).shape()));
                    send(*b, unbroadcast(&g.map(|x| -x), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = binary(&g, bv, |x, y| x * y);
                        send(*a, unbroadcast(&ga, av.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let gb = binary(&g, av, |x, y| x * y);
                        send(*b, unbroadcast(&gb, bv.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = binary(&g, bv, |x, y| x / y);
                        send(*a, unbroadcast(&ga, av.shape()));
                    }
                    if nodes[*b].requires_grad {
                        // d(a/b)/db = -a/b² = -out/b
                        let t = binary(&g, &node.value, |x, y| -x * y);
                        let gb = binary(&t, bv, |x, y| x / y);
                        send(*b, unbroadcast(&gb, bv.shape()));
                    }
                }
                Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
                Op::MatMul { a, b, shared_rhs } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (n, k) = last2(av.shape());
                    let m = *bv.shape().last().unwrap();
                    let batch = av.numel() / (n * k);
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; av.numel()];
                        if *shared_rhs {
                            gemm_nt(g.data(), bv.data(), &mut ga, batch * n, m, k);
                        } else {
                            for t in 0..batch {
                                gemm_nt(
                                    &g.data()[t * n * m..(t + 1) * n * m],
                                    &bv.data()[t * k * m..(t + 1) * k * m],
                                    &mut ga[t * n * k..(t + 1) * n * k],
                                    n,
                                    m,
                                    k,
                                );
                            }
                        }
                        send(*a, Tensor::new(av.shape().to_vec(), ga));
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; bv.numel()];
                        if *shared_rhs {
                            gemm_tn(av.data(), g.data(), &mut gb, batch * n, k, m);
                        } else {
                            for t in 0..batch {
                                gemm_tn(
                                    &av.data()[t * n * k..(t + 1) * n * k],
                                    &g.data()[t * n * m..(t + 1) * n * m],
                                    &mut gb[t * k * m..(t + 1) * k * m],
                                    n,
                                    k,
                                    m,
                                );
                            }
                        }
                        send(*b, Tensor::new(bv.shape().to_vec(), gb));
                    }
                }
                Op::Permute { a, axes } => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    send(*a, g.permute(&inv));
                }
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())),
                Op::SumAxis { a, axis } => {
                    let shape = val(*a).shape().to_vec();
                    let (outer, n, inner) = split_axis(&shape, *axis);
                    let mut ga = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for j in 0..n {
                            let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                            dst.copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    send(*a, Tensor::new(shape, ga));
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    send(*a, Tensor::full(val(*a).shape(), gv));
                }
                Op::MaxAxis { a, axis, argmax } => {
                    let shape = val(*a).shape().to_vec();
                    let (_, n, inner) = split_axis(&shape, *axis);
                    let mut ga = vec![0.0; shape.iter().product()];
                    for (r, &j) in argmax.iter().enumerate() {
                        let (o, i) = (r / inner, r % inner);
                        ga[(o * n + j) * inner + i] += g.data()[r];
                    }
                    send(*a, Tensor::new(shape, ga));
                }
                Op::Unary { a, kind } => {
                    let x = val(*a);
                    let y = &node.value;
                    let ga: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(y.data())
                        .map(|((&gi, &xi), &yi)| gi * unary_grad(*kind, xi, yi))
                        .collect();
                    send(*a, Tensor::new(x.shape().to_vec(), ga));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let mut ga = vec![0.0; y.numel()];
                    for ((gr, yr), out) in g
                        .data()
                        .chunks(n)
                        .zip(y.data().chunks(n))
                        .zip(ga.chunks_mut(n))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    send(*a, Tensor::new(y.shape().to_vec(), ga));
                }
                Op::LogSumExp { a, probs } => {
                    let shape = val(*a).shape().to_vec();
                    let n = *shape.last().unwrap();
                    let ga: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(i, p)| p * g.data()[i / n])
                        .collect();
                    send(*a, Tensor::new(shape, ga));
                }
                Op::LayerNorm { a, xhat, inv_std } => {
                    let shape = val(*a).shape().to_vec();
                    let n = *shape.last().unwrap();
                    let mut ga = vec![0.0; xhat.len()];
                    for (r, ((gr, xr), out)) in g
                        .data()
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(ga.chunks_mut(n))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, &gi), &xi) in out.iter_mut().zip(gr).zip(xr) {
                            *o = inv_std[r] * (gi - mg - xi * mgx);
                        }
                    }
                    send(*a, Tensor::new(shape, ga));
                }
                Op::Gather { a, index } => {
                    let shape = val(*a).shape().to_vec();
                    let n = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let m = index[0].len();
                    let mut ga = vec![0.0; shape.iter().product()];
                    for (b, idx) in index.iter().enumerate() {
                        for (j, &src) in idx.iter().enumerate() {
                            let from = &g.data()[(b * m + j) * inner..(b * m + j + 1) * inner];
                            let to = &mut ga[(b * n + src) * inner..(b * n + src + 1) * inner];
                            for (t, f) in to.iter_mut().zip(from) {
                                *t += f;
                            }
                        }
                    }
                    send(*a, Tensor::new(shape, ga));
                }
                Op::Concat { parts, axis } => {
                    let out_shape = g.shape().to_vec();
                    let (outer, total, inner) = split_axis(&out_shape, *axis);
                    let mut start = 0;
                    for &p in parts {
                        let pshape = val(p).shape().to_vec();
                        let len = pshape[*axis];
                        if nodes[p].requires_grad {
                            let mut gp = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + start) * inner;
                                gp.extend_from_slice(&g.data()[base..base + len * inner]);
                            }
                            send(p, Tensor::new(pshape, gp));
                        }
                        start += len;
                    }
                }
                Op::Embedding { table, ids } => {
                    let tshape = val(*table).shape().to_vec();
                    let d = tshape[1];
                    let mut gt = vec![0.0; tshape[0] * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for (t, f) in gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g.data()[r * d..(r + 1) * d])
                        {
                            *t += f;
                        }
                    }
                    send(*table, Tensor::new(tshape, gt));
                }
            }
        }
        Gradients { grads }
    }
}

fn last2(shape: &[usize]) -> (usize, usize) {
    let n = shape.len();
    assert!(
        n >= 2,
        "matmul operand needs at least 2 dims, got {shape:?}"
    );
    (shape[n - 2], shape[n - 1])
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n {
                a[i + a.len() - n]
            } else {
                1
            };
            let db = if i + b.len() >= n {
                b[i + b.len() - n]
            } else {
                1
            };
            if da == db || db == 1 {
                da
            } else if da == 1 {
                db
            } else {
                panic!("cannot broadcast {a:?} with {b:?}")
            }
        })
        .collect()
}

/// Offset into `input` for every element of `out_shape` under broadcasting.
fn broadcast_offsets(out_shape: &[usize], input: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    let numel: usize = input.iter().product();
    if numel == total {
        return (0..total).collect();
    }
    // suffix fast path: bias-style broadcast over leading axes
    let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
    if out_shape.ends_with(&trimmed) {
        return (0..total).map(|i| i % numel.max(1)).collect();
    }
    let pad = out_shape.len() - input.len();
    let in_strides = strides_of(input);
    let strides: Vec<usize> = (0..out_shape.len())
        .map(|i| {
            if i < pad || input[i - pad] == 1 {
                0
            } else {
                in_strides[i - pad]
            }
        })
        .collect();
    let mut offs = Vec::with_capacity(total);
    for_each_index(out_shape, |idx| {
        offs.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
    });
    offs
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let oa = broadcast_offsets(&shape, a.shape());
    let ob = broadcast_offsets(&shape, b.shape());
    let data = oa
        .iter()
        .zip(&ob)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(shape, data)
}

/// Sums a gradient of broadcast shape back down to `shape`.
fn unbroadcast(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let offs = broadcast_offsets(g.shape(), shape);
    let mut out = vec![0.0; shape.iter().product()];
    for (&o, &v) in offs.iter().zip(g.data()) {
        out[o] += v;
    }
    Tensor::new(shape.to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn unary_value(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Relu => x.max(0.0),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        Unary::SmoothL1(beta) => {
            if x.abs() < beta {
                0.5 * x * x / beta
            } else {
                x.abs() - 0.5 * beta
            }
        }
    }
}

fn unary_grad(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sqrt => 0.5 / y,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Gelu => {
            let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        Unary::SmoothL1(beta) => {
            if x.abs() < beta {
                x / beta
            } else {
                x.signum()
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn derive(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'t> {
        let rg = parents.iter().any(|&p| self.tape.requires(p));
        self.tape.push(value, op, rg)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn add(&self, o: Var<'t>) -> Var<'t> {
        let v = binary(&self.value(), &o.value(), |a, b| a + b);
        self.derive(v, Op::Add(self.id, o.id), &[self.id, o.id])
    }

    pub fn sub(&self, o: Var<'t>) -> Var<'t> {
        let v = binary(&self.value(), &o.value(), |a, b| a - b);
        self.derive(v, Op::Sub(self.id, o.id), &[self.id, o.id])
    }

    pub fn mul(&self, o: Var<'t>) -> Var<'t> {
        let v = binary(&self.value(), &o.value(), |a, b| a * b);
        self.derive(v, Op::Mul(self.id, o.id), &[self.id, o.id])
    }

    pub fn div(&self, o: Var<'t>) -> Var<'t> {
        let v = binary(&self.value(), &o.value(), |a, b| a / b);
        self.derive(v, Op::Div(self.id, o.id), &[self.id, o.id])
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.derive(v, Op::Scale(self.id, c), &[self.id])
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Matrix product over the last two axes. `rhs` is either a 2-D matrix
    /// shared across all leading axes of `self`, or has the same leading axes.
    pub fn matmul(&self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let (n, k) = last2(a.shape());
        let (k2, m) = last2(b.shape());
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let batch = a.numel() / (n * k);
        let shared_rhs = b.ndim() == 2;
        let mut out = vec![0.0; batch * n * m];
        if shared_rhs {
            gemm_nn(a.data(), b.data(), &mut out, batch * n, k, m);
        } else {
            assert_eq!(
                a.shape()[..a.ndim() - 2],
                b.shape()[..b.ndim() - 2],
                "batched matmul leading dims"
            );
            for t in 0..batch {
                gemm_nn(
                    &a.data()[t * n * k..(t + 1) * n * k],
                    &b.data()[t * k * m..(t + 1) * k * m],
                    &mut out[t * n * m..(t + 1) * n * m],
                    n,
                    k,
                    m,
                );
            }
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        self.derive(
            Tensor::new(shape, out),
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                shared_rhs,
            },
            &[self.id, rhs.id],
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'t> {
        let v = self.value().permute(axes);
        self.derive(
            v,
            Op::Permute {
                a: self.id,
                axes: axes.to_vec(),
            },
            &[self.id],
        )
    }

    pub fn transpose_last(&self) -> Var<'t> {
        let n = self.shape().len();
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let v = (*self.value()).clone().reshape(shape);
        self.derive(v, Op::Reshape(self.id), &[self.id])
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Var<'t> {
        let x = self.value();
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &x.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        self.derive(
            Tensor::new(shape, out),
            Op::SumAxis { a: self.id, axis },
            &[self.id],
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis];
        self.sum_axis(axis).scale(1.0 / n as f64)
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.derive(v, Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Max over `axis`, keeping it with size 1. Ties go to the lowest index.
    pub fn max_axis(&self, axis: usize) -> Var<'t> {
        let x = self.value();
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let v = x.data()[(o * n + j) * inner + i];
                    let r = o * inner + i;
                    if v > out[r] {
                        out[r] = v;
                        argmax[r] = j;
                    }
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        self.derive(
            Tensor::new(shape, out),
            Op::MaxAxis {
                a: self.id,
                axis,
                argmax,
            },
            &[self.id],
        )
    }

    fn unary(&self, kind: Unary) -> Var<'t> {
        let v = self.value().map(|x| unary_value(kind, x));
        self.derive(v, Op::Unary { a: self.id, kind }, &[self.id])
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Unary::Log)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }

    /// Elementwise Huber-style smooth L1 of `self` treated as a difference.
    pub fn smooth_l1(&self, beta: f64) -> Var<'t> {
        self.unary(Unary::SmoothL1(beta))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let mut out = vec![0.0; x.numel()];
        for (xr, yr) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            let mx = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (y, &v) in yr.iter_mut().zip(xr) {
                *y = (v - mx).exp();
                z += *y;
            }
            yr.iter_mut().for_each(|y| *y /= z);
        }
        self.derive(
            Tensor::new(x.shape().to_vec(), out),
            Op::Softmax(self.id),
            &[self.id],
        )
    }

    /// `log Σ exp` over the last axis (kept with size 1), optionally skipping
    /// entries where `include` is false.
    pub fn logsumexp(&self, include: Option<&[bool]>) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        if let Some(m) = include {
            assert_eq!(m.len(), x.numel());
        }
        let keep = |i: usize| include.is_none_or(|m| m[i]);
        let mut out = Vec::with_capacity(x.numel() / n);
        let mut probs = vec![0.0; x.numel()];
        for (r, xr) in x.data().chunks(n).enumerate() {
            let mx = xr
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(r * n + j))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(mx.is_finite(), "logsumexp over an empty or non-finite row");
            let mut z = 0.0;
            for (j, &v) in xr.iter().enumerate() {
                if keep(r * n + j) {
                    let e = (v - mx).exp();
                    probs[r * n + j] = e;
                    z += e;
                }
            }
            probs[r * n..(r + 1) * n].iter_mut().for_each(|p| *p /= z);
            out.push(mx + z.ln());
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        self.derive(
            Tensor::new(shape, out),
            Op::LogSumExp { a: self.id, probs },
            &[self.id],
        )
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = Vec::with_capacity(x.numel() / n);
        for (xr, hr) in x.data().chunks(n).zip(xhat.chunks_mut(n)) {
            let mu = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mu) * is;
            }
            inv_std.push(is);
        }
        self.derive(
            Tensor::new(x.shape().to_vec(), xhat.clone()),
            Op::LayerNorm {
                a: self.id,
                xhat,
                inv_std,
            },
            &[self.id],
        )
    }

    /// Per-sample selection along axis 1: `out[b, j] = self[b, index[b][j]]`.
    pub fn gather(&self, index: &[Vec<usize>]) -> Var<'t> {
        let x = self.value();
        let shape = x.shape();
        assert!(shape.len() >= 2);
        assert_eq!(
            index.len(),
            shape[0],
            "gather needs one index list per sample"
        );
        let m = index.first().map_or(0, Vec::len);
        assert!(index.iter().all(|r| r.len() == m), "ragged gather index");
        let inner: usize = shape[2..].iter().product();
        let mut out = Vec::with_capacity(shape[0] * m * inner);
        for (b, idx) in index.iter().enumerate() {
            for &src in idx {
                assert!(
                    src < shape[1],
                    "gather index {src} out of range {}",
                    shape[1]
                );
                let base = (b * shape[1] + src) * inner;
                out.extend_from_slice(&x.data()[base..base + inner]);
            }
        }
        let mut oshape = shape.to_vec();
        oshape[1] = m;
        self.derive(
            Tensor::new(oshape, out),
            Op::Gather {
                a: self.id,
                index: index.to_vec(),
            },
            &[self.id],
        )
    }

    /// Selects position `i` along axis 1 for every sample, keeping the axis.
    pub fn select(&self, i: usize) -> Var<'t> {
        let b = self.shape()[0];
        self.gather(&vec![vec![i]; b])
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut shape = vals[0].shape().to_vec();
        shape[axis] = vals.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &vals {
                assert_eq!(v.ndim(), shape.len());
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = ids.iter().any(|&p| tape.requires(p));
        tape.push(Tensor::new(shape, out), Op::Concat { parts: ids, axis }, rg)
    }

    /// Row lookup into a `[V, D]` table; output shape is `ids_shape ++ [D]`.
    pub fn embedding(&self, ids: &[usize], ids_shape: &[usize]) -> Var<'t> {
        let t = self.value();
        assert_eq!(t.ndim(), 2);
        let d = t.shape()[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < t.shape()[0], "token id {id} out of vocabulary");
            out.extend_from_slice(t.row(id));
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        self.derive(
            Tensor::new(shape, out),
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        )
    }

    /// Rows scaled to unit L2 norm over the last axis.
    pub fn l2_normalize(&self, eps: f64) -> Var<'t> {
        let sq = self.mul(*self).sum_axis(self.shape().len() - 1);
        let norm = sq.add(self.tape.scalar(eps)).sqrt();
        self.div(norm)
    }
}

/// Named differentiable parameters bound onto a tape.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s crate::nn::ParamStore,
    bound: RefCell<HashMap<String, Var<'t>>>,
    trainable: bool,
}

impl<'t, 's> Binder<'t, 's> {
    /// Parameters become differentiable leaves.
    pub fn trainable(tape: &'t Tape, store: &'s crate::nn::ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::default(),
            trainable: true,
        }
    }

    /// Parameters become constants; nothing downstream of them gets a gradient.
    pub fn frozen(tape: &'t Tape, store: &'s crate::nn::ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::trainable(tape, store)
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s crate::nn::ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let v = if self.trainable {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.get(name).is_some()
    }

    /// Gradients of every parameter bound so far, keyed by name.
    pub fn collect(&self, grads: &Gradients) -> std::collections::BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` w.r.t. every element of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(x: Tensor, build: impl for<'t> Fn(Var<'t>) -> Var<'t>) {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = build(v);
        let grads = tape.backward(out);
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = numeric_grad(&x, |xx| {
            let t = Tape::new();
            build(t.constant(xx.clone())).item()
        });
        let err = analytic.max_abs_diff(&numeric);
        assert!(
            err < 1e-6,
            "grad mismatch {err}: {analytic:?} vs {numeric:?}"
        );
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        let w = rand(&[4], 1);
        check(rand(&[2, 3, 4], 2), |x| {
            let t = x.tape();
            let b = t.constant(w.clone());
            x.mul(b)
                .add(b)
                .exp()
                .sub(x.scale(0.5))
                .div(x.mul(x).add(t.scalar(1.0)))
                .sum()
        });
    }

    #[test]
    fn broadcast_rhs_grad() {
        let x = rand(&[2, 3, 4], 3);
        check(rand(&[3, 1], 4), |b| {
            let xv = b.tape().constant(x.clone());
            xv.mul(b).gelu().sum()
        });
    }

    #[test]
    fn matmul_grads() {
        let w = rand(&[4, 5], 5);
        check(rand(&[2, 3, 4], 6), |x| {
            x.matmul(x.tape().constant(w.clone())).sum()
        });
        let a = rand(&[2, 3, 4], 7);
        check(rand(&[2, 4, 2], 8), |b| {
            b.tape()
                .constant(a.clone())
                .matmul(b)
                .mul(b.tape().constant(Tensor::full(&[1], 2.0)))
                .exp()
                .mean()
        });
        check(rand(&[4, 5], 9), |w| {
            w.tape().constant(a.clone()).matmul(w).relu().sum()
        });
    }

    #[test]
    fn reductions_and_softmax_grads() {
        let c = rand(&[2, 3, 4], 10);
        check(rand(&[2, 3, 4], 11), |x| {
            let cv = x.tape().constant(c.clone());
            x.softmax().mul(cv).sum_axis(1).max_axis(2).sum()
        });
        check(rand(&[3, 4], 12), |x| x.logsumexp(None).sum());
        let mask = vec![
            true, false, true, true, false, true, true, true, true, true, true, false,
        ];
        check(rand(&[3, 4], 13), |x| x.logsumexp(Some(&mask)).mean());
        let w = rand(&[2, 5], 20);
        check(rand(&[2, 5], 14), |x| {
            x.layer_norm(1e-5).mul(x.tape().constant(w.clone())).sum()
        });
    }

    #[test]
    fn shape_op_grads() {
        let c = rand(&[3, 2, 4], 15);
        check(rand(&[2, 3, 4], 16), |x| {
            let cv = x.tape().constant(c.clone());
            x.permute(&[1, 0, 2])
                .mul(cv)
                .reshape(&[6, 4])
                .transpose_last()
                .sum_axis(0)
                .exp()
                .sum()
        });
        check(rand(&[2, 4, 3], 17), |x| {
            let g = x.gather(&[vec![3, 0, 0], vec![1, 2, 3]]);
            let cat = Var::concat(&[g, x.select(1)], 1);
            cat.mul(cat).sum()
        });
        check(rand(&[5, 3], 18), |t| {
            t.embedding(&[4, 0, 4, 2], &[2, 2]).exp().sum()
        });
        check(rand(&[2, 3, 4], 19), |x| {
            x.l2_normalize(1e-12).smooth_l1(0.3).sum()
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[3]));
        let c = tape.constant(Tensor::ones(&[3]));
        let y = a.mul(c.exp()).sum();
        let grads = tape.backward(y);
        assert!(grads.get(c).is_none());
        assert!(grads.get(a).is_some());
        assert!(!c.exp().requires_grad());
    }
}
