//! Reverse-mode autodiff on a flat tape.
//!
//! Operations are recorded in execution order during the forward pass,
//! so the tape order is already topological; the backward pass walks it
//! once in reverse. Values are [`Tensor`]s; scalars are one-element
//! tensors, which lets the same node type carry both the scalar algebra
//! of the spectrum-to-step mapping and the tensor algebra of the
//! backbone. Recurrences are differentiated by unrolling.
//!
//! A tape is single-owner for one forward/backward pair; independent
//! tapes can run concurrently.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tensor::{matmul, Tensor};
use crate::error::{Error, Result};

enum Op {
    /// Trainable leaf; gradient is retained for extraction.
    Leaf,
    /// Non-trainable input; backward stops here.
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Expm1(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Tanh(usize),
    Sigmoid(usize),
    PowC(usize, f64),
    MaxC(usize, f64),
    MinC(usize, f64),
    /// matrix (r x c) + row vector (c,)
    AddRow(usize, usize),
    /// matrix (r x c) * row vector (c,), broadcast over rows
    MulRow(usize, usize),
    /// matrix (r x c) * column vector (r,), broadcast over columns
    MulCol(usize, usize),
    /// tensor * scalar node
    MulScalar(usize, usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Dot(usize, usize),
    Outer(usize, usize),
    Row { src: usize, row: usize },
    Index { src: usize, idx: usize },
    StackRows(Vec<usize>),
    Concat(Vec<usize>),
    Reshape(usize),
    /// Row-wise on rank 2, whole vector on rank 1.
    Softmax(usize),
    LogSumExp(usize),
    Sum(usize),
    Mean(usize),
    SumAxis0(usize),
    MeanAxis0(usize),
    MeanAxis1(usize),
}

struct TapeInner {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Tensor>>,
}

/// Records a computation graph for one forward/backward pair.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`]. Copyable; all arithmetic records new
/// nodes on the owning tape.
#[derive(Clone, Copy)]
pub struct Tv<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner { values: Vec::new(), ops: Vec::new(), grads: Vec::new() }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Tv<'_> {
        let mut t = self.inner.borrow_mut();
        let id = t.values.len();
        t.values.push(value);
        t.ops.push(op);
        t.grads.push(None);
        Tv { tape: self, id }
    }

    /// Trainable parameter node.
    pub fn leaf(&self, value: Tensor) -> Tv<'_> {
        self.push(value, Op::Leaf)
    }

    /// Fixed input node (data, precomputed features).
    pub fn constant(&self, value: Tensor) -> Tv<'_> {
        self.push(value, Op::Const)
    }

    pub fn scalar(&self, v: f64) -> Tv<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Stack k vectors of equal length c into a (k, c) matrix.
    pub fn stack_rows<'t>(&'t self, rows: &[Tv<'t>]) -> Tv<'t> {
        assert!(!rows.is_empty());
        let (c, mut data) = {
            let t = self.inner.borrow();
            let c = t.values[rows[0].id].len();
            let mut data = Vec::with_capacity(rows.len() * c);
            for r in rows {
                debug_assert!(std::ptr::eq(r.tape, self));
                debug_assert_eq!(t.values[r.id].len(), c);
                data.extend_from_slice(&t.values[r.id].data);
            }
            (c, data)
        };
        data.shrink_to_fit();
        self.push(
            Tensor::matrix(rows.len(), c, data),
            Op::StackRows(rows.iter().map(|r| r.id).collect()),
        )
    }

    /// Concatenate vectors into one vector.
    pub fn concat<'t>(&'t self, parts: &[Tv<'t>]) -> Tv<'t> {
        assert!(!parts.is_empty());
        let data = {
            let t = self.inner.borrow();
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(&t.values[p.id].data);
            }
            data
        };
        self.push(Tensor::vector(data), Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    /// Reverse pass from a scalar loss node. Gradients of leaves are
    /// retrievable through [`Tv::grad`] afterwards.
    pub fn backward(&self, loss: Tv<'_>) -> Result<()> {
        debug_assert!(std::ptr::eq(loss.tape, self));
        let mut t = self.inner.borrow_mut();
        if t.values[loss.id].len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                t.values[loss.id].shape
            )));
        }
        for g in t.grads.iter_mut() {
            *g = None;
        }
        t.grads[loss.id] = Some(Tensor::new(t.values[loss.id].shape.clone(), vec![1.0]));
        for id in (0..=loss.id).rev() {
            let g = match t.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            t.propagate(id, &g);
            t.grads[id] = Some(g);
        }
        Ok(())
    }
}

impl TapeInner {
    fn accumulate(&mut self, id: usize, delta_shape: &[usize], f: impl FnOnce(&mut [f64])) {
        if matches!(self.ops[id], Op::Const) {
            return;
        }
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(delta_shape));
        }
        f(&mut slot.as_mut().unwrap().data);
    }

    fn propagate(&mut self, id: usize, g: &Tensor) {
        // Temporarily move the op out to appease the borrow checker.
        let op = std::mem::replace(&mut self.ops[id], Op::Const);
        match &op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| axpy(d, 1.0, &g.data));
                let sb = self.values[b].shape.clone();
                self.accumulate(b, &sb, |d| axpy(d, 1.0, &g.data));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| axpy(d, 1.0, &g.data));
                let sb = self.values[b].shape.clone();
                self.accumulate(b, &sb, |d| axpy(d, -1.0, &g.data));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bv: Vec<f64> = self.values[b].data.clone();
                let av: Vec<f64> = self.values[a].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * bv[i];
                    }
                });
                let sb = self.values[b].shape.clone();
                self.accumulate(b, &sb, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let av: Vec<f64> = self.values[a].data.clone();
                let bv: Vec<f64> = self.values[b].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] / bv[i];
                    }
                });
                let sb = self.values[b].shape.clone();
                self.accumulate(b, &sb, |d| {
                    for i in 0..d.len() {
                        d[i] -= g.data[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Neg(a) => {
                let a = *a;
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| axpy(d, -1.0, &g.data));
            }
            Op::Exp(a) => {
                let a = *a;
                let out: Vec<f64> = self.values[id].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * out[i];
                    }
                });
            }
            Op::Expm1(a) => {
                let a = *a;
                let out: Vec<f64> = self.values[id].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * (out[i] + 1.0);
                    }
                });
            }
            Op::Ln(a) => {
                let a = *a;
                let av: Vec<f64> = self.values[a].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] / av[i];
                    }
                });
            }
            Op::Sqrt(a) => {
                let a = *a;
                let out: Vec<f64> = self.values[id].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] / (2.0 * out[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let a = *a;
                let av: Vec<f64> = self.values[a].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * sign(av[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let a = *a;
                let out: Vec<f64> = self.values[id].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let out: Vec<f64> = self.values[id].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::PowC(a, p) => {
                let (a, p) = (*a, *p);
                let av: Vec<f64> = self.values[a].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * p * av[i].powf(p - 1.0);
                    }
                });
            }
            Op::MaxC(a, c) => {
                let (a, c) = (*a, *c);
                let av: Vec<f64> = self.values[a].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        if av[i] > c {
                            d[i] += g.data[i];
                        }
                    }
                });
            }
            Op::MinC(a, c) => {
                let (a, c) = (*a, *c);
                let av: Vec<f64> = self.values[a].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        if av[i] < c {
                            d[i] += g.data[i];
                        }
                    }
                });
            }
            Op::AddRow(m, v) => {
                let (m, v) = (*m, *v);
                let (r, c) = (self.values[m].rows(), self.values[m].cols());
                let sm = self.values[m].shape.clone();
                self.accumulate(m, &sm, |d| axpy(d, 1.0, &g.data));
                self.accumulate(v, &[c], |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g.data[i * c + j];
                        }
                    }
                });
            }
            Op::MulRow(m, v) => {
                let (m, v) = (*m, *v);
                let (r, c) = (self.values[m].rows(), self.values[m].cols());
                let vv: Vec<f64> = self.values[v].data.clone();
                let mv: Vec<f64> = self.values[m].data.clone();
                let sm = self.values[m].shape.clone();
                self.accumulate(m, &sm, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g.data[i * c + j] * vv[j];
                        }
                    }
                });
                self.accumulate(v, &[c], |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g.data[i * c + j] * mv[i * c + j];
                        }
                    }
                });
            }
            Op::MulCol(m, v) => {
                let (m, v) = (*m, *v);
                let (r, c) = (self.values[m].rows(), self.values[m].cols());
                let vv: Vec<f64> = self.values[v].data.clone();
                let mv: Vec<f64> = self.values[m].data.clone();
                let sm = self.values[m].shape.clone();
                self.accumulate(m, &sm, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g.data[i * c + j] * vv[i];
                        }
                    }
                });
                self.accumulate(v, &[r], |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i] += g.data[i * c + j] * mv[i * c + j];
                        }
                    }
                });
            }
            Op::MulScalar(t_id, s_id) => {
                let (t_id, s_id) = (*t_id, *s_id);
                let s = self.values[s_id].item();
                let tv: Vec<f64> = self.values[t_id].data.clone();
                let st = self.values[t_id].shape.clone();
                self.accumulate(t_id, &st, |d| axpy(d, s, &g.data));
                let ss = self.values[s_id].shape.clone();
                self.accumulate(s_id, &ss, |d| {
                    let mut acc = 0.0;
                    for i in 0..tv.len() {
                        acc += g.data[i] * tv[i];
                    }
                    d[0] += acc;
                });
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let av = self.values[a].clone();
                let bv = self.values[b].clone();
                let gm = Tensor::matrix(self.values[id].rows(), self.values[id].cols(), g.data.clone());
                let da = match (ta, tb) {
                    (false, false) => matmul(&gm, false, &bv, true),
                    (true, false) => matmul(&bv, false, &gm, true),
                    (false, true) => matmul(&gm, false, &bv, false),
                    (true, true) => matmul(&bv, true, &gm, true),
                };
                let db = match (ta, tb) {
                    (false, false) => matmul(&av, true, &gm, false),
                    (true, false) => matmul(&av, false, &gm, false),
                    (false, true) => matmul(&gm, true, &av, false),
                    (true, true) => matmul(&gm, true, &av, true),
                };
                let sa = av.shape.clone();
                self.accumulate(a, &sa, |d| axpy(d, 1.0, &da.data));
                let sb = bv.shape.clone();
                self.accumulate(b, &sb, |d| axpy(d, 1.0, &db.data));
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                let gs = g.data[0];
                let av: Vec<f64> = self.values[a].data.clone();
                let bv: Vec<f64> = self.values[b].data.clone();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| axpy(d, gs, &bv));
                let sb = self.values[b].shape.clone();
                self.accumulate(b, &sb, |d| axpy(d, gs, &av));
            }
            Op::Outer(a, b) => {
                let (a, b) = (*a, *b);
                let av: Vec<f64> = self.values[a].data.clone();
                let bv: Vec<f64> = self.values[b].data.clone();
                let (n, m) = (av.len(), bv.len());
                self.accumulate(a, &[n], |d| {
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g.data[i * m + j] * bv[j];
                        }
                        d[i] += acc;
                    }
                });
                self.accumulate(b, &[m], |d| {
                    for i in 0..n {
                        for j in 0..m {
                            d[j] += g.data[i * m + j] * av[i];
                        }
                    }
                });
            }
            Op::Row { src, row } => {
                let (src, row) = (*src, *row);
                let c = self.values[src].cols();
                let ss = self.values[src].shape.clone();
                self.accumulate(src, &ss, |d| {
                    for j in 0..c {
                        d[row * c + j] += g.data[j];
                    }
                });
            }
            Op::Index { src, idx } => {
                let (src, idx) = (*src, *idx);
                let gs = g.data[0];
                let ss = self.values[src].shape.clone();
                self.accumulate(src, &ss, |d| d[idx] += gs);
            }
            Op::StackRows(parents) => {
                let c = self.values[id].cols();
                for (k, &p) in parents.iter().enumerate() {
                    let sp = self.values[p].shape.clone();
                    self.accumulate(p, &sp, |d| {
                        for j in 0..c {
                            d[j] += g.data[k * c + j];
                        }
                    });
                }
            }
            Op::Concat(parents) => {
                let mut off = 0usize;
                for &p in parents.iter() {
                    let n = self.values[p].len();
                    let sp = self.values[p].shape.clone();
                    self.accumulate(p, &sp, |d| {
                        for j in 0..n {
                            d[j] += g.data[off + j];
                        }
                    });
                    off += n;
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| axpy(d, 1.0, &g.data));
            }
            Op::Softmax(a) => {
                let a = *a;
                let out = self.values[id].clone();
                let (r, c) = row_view(&out);
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..r {
                        let o = &out.data[i * c..(i + 1) * c];
                        let gr = &g.data[i * c..(i + 1) * c];
                        let dot: f64 = o.iter().zip(gr.iter()).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            d[i * c + j] += o[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let a = *a;
                let gs = g.data[0];
                let av: Vec<f64> = self.values[a].data.clone();
                let lse = self.values[id].item();
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..d.len() {
                        d[i] += gs * (av[i] - lse).exp();
                    }
                });
            }
            Op::Sum(a) => {
                let a = *a;
                let gs = g.data[0];
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for x in d.iter_mut() {
                        *x += gs;
                    }
                });
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.values[a].len() as f64;
                let gs = g.data[0] / n;
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for x in d.iter_mut() {
                        *x += gs;
                    }
                });
            }
            Op::SumAxis0(a) => {
                let a = *a;
                let (r, c) = (self.values[a].rows(), self.values[a].cols());
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g.data[j];
                        }
                    }
                });
            }
            Op::MeanAxis0(a) => {
                let a = *a;
                let (r, c) = (self.values[a].rows(), self.values[a].cols());
                let inv = 1.0 / r as f64;
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g.data[j] * inv;
                        }
                    }
                });
            }
            Op::MeanAxis1(a) => {
                let a = *a;
                let (r, c) = (self.values[a].rows(), self.values[a].cols());
                let inv = 1.0 / c as f64;
                let sa = self.values[a].shape.clone();
                self.accumulate(a, &sa, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g.data[i] * inv;
                        }
                    }
                });
            }
        }
        self.ops[id] = op;
    }
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(dst.len(), x.len());
    for (d, &v) in dst.iter_mut().zip(x.iter()) {
        *d += a * v;
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_view(t: &Tensor) -> (usize, usize) {
    if t.shape.len() == 2 {
        (t.shape[0], t.shape[1])
    } else {
        (1, t.len())
    }
}

impl<'t> Tv<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().values[self.id].shape.clone()
    }

    /// Value of a scalar node.
    pub fn value(&self) -> f64 {
        self.tape.inner.borrow().values[self.id].item()
    }

    pub fn clone_tensor(&self) -> Tensor {
        self.tape.inner.borrow().values[self.id].clone()
    }

    /// Gradient accumulated by the latest [`Tape::backward`]; zeros if
    /// the node was never reached.
    pub fn grad(&self) -> Tensor {
        let t = self.tape.inner.borrow();
        match &t.grads[self.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&t.values[self.id].shape),
        }
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            let v = &t.values[self.id];
            Tensor::new(v.shape.clone(), v.data.iter().map(|&x| f(x)).collect())
        };
        self.tape.push(out, op(self.id))
    }

    fn binary(self, rhs: Tv<'t>, f: impl Fn(f64, f64) -> f64, op: impl FnOnce(usize, usize) -> Op) -> Tv<'t> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "nodes from different tapes");
        let out = {
            let t = self.tape.inner.borrow();
            let a = &t.values[self.id];
            let b = &t.values[rhs.id];
            assert_eq!(a.len(), b.len(), "elementwise op on mismatched shapes {:?} vs {:?}", a.shape, b.shape);
            Tensor::new(
                a.shape.clone(),
                a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        self.tape.push(out, op(self.id, rhs.id))
    }

    pub fn exp(self) -> Tv<'t> {
        self.unary(f64::exp, Op::Exp)
    }

    pub fn expm1(self) -> Tv<'t> {
        self.unary(f64::exp_m1, Op::Expm1)
    }

    pub fn ln(self) -> Tv<'t> {
        self.unary(f64::ln, Op::Ln)
    }

    pub fn sqrt(self) -> Tv<'t> {
        self.unary(f64::sqrt, Op::Sqrt)
    }

    pub fn abs(self) -> Tv<'t> {
        self.unary(f64::abs, Op::Abs)
    }

    pub fn tanh(self) -> Tv<'t> {
        self.unary(f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(self) -> Tv<'t> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn powc(self, p: f64) -> Tv<'t> {
        self.unary(|x| x.powf(p), |a| Op::PowC(a, p))
    }

    pub fn maxc(self, c: f64) -> Tv<'t> {
        self.unary(|x| x.max(c), |a| Op::MaxC(a, c))
    }

    pub fn minc(self, c: f64) -> Tv<'t> {
        self.unary(|x| x.min(c), |a| Op::MinC(a, c))
    }

    pub fn clampc(self, lo: f64, hi: f64) -> Tv<'t> {
        self.maxc(lo).minc(hi)
    }

    /// `x * sigmoid(x)`, the smooth gate used in the gated MLP.
    pub fn silu(self) -> Tv<'t> {
        self * self.sigmoid()
    }

    pub fn matmul(self, rhs: Tv<'t>) -> Tv<'t> {
        self.matmul_opt(rhs, false, false)
    }

    /// `self^T * rhs`
    pub fn matmul_tn(self, rhs: Tv<'t>) -> Tv<'t> {
        self.matmul_opt(rhs, true, false)
    }

    /// `self * rhs^T`
    pub fn matmul_nt(self, rhs: Tv<'t>) -> Tv<'t> {
        self.matmul_opt(rhs, false, true)
    }

    fn matmul_opt(self, rhs: Tv<'t>, ta: bool, tb: bool) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            matmul(&t.values[self.id], ta, &t.values[rhs.id], tb)
        };
        self.tape.push(out, Op::MatMul { a: self.id, b: rhs.id, ta, tb })
    }

    pub fn dot(self, rhs: Tv<'t>) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            let a = &t.values[self.id];
            let b = &t.values[rhs.id];
            assert_eq!(a.len(), b.len());
            Tensor::scalar(a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x * y).sum())
        };
        self.tape.push(out, Op::Dot(self.id, rhs.id))
    }

    pub fn outer(self, rhs: Tv<'t>) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            let a = &t.values[self.id];
            let b = &t.values[rhs.id];
            let mut data = Vec::with_capacity(a.len() * b.len());
            for &x in a.data.iter() {
                for &y in b.data.iter() {
                    data.push(x * y);
                }
            }
            Tensor::matrix(a.len(), b.len(), data)
        };
        self.tape.push(out, Op::Outer(self.id, rhs.id))
    }

    /// Row `i` of a (r, c) matrix as a (c,) vector.
    pub fn row(self, i: usize) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            Tensor::vector(t.values[self.id].row_slice(i).to_vec())
        };
        self.tape.push(out, Op::Row { src: self.id, row: i })
    }

    /// Flat element `i` as a scalar node.
    pub fn index(self, i: usize) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            Tensor::scalar(t.values[self.id].data[i])
        };
        self.tape.push(out, Op::Index { src: self.id, idx: i })
    }

    pub fn reshape(self, shape: Vec<usize>) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            debug_assert_eq!(shape.iter().product::<usize>().max(1), t.values[self.id].len());
            Tensor::new(shape, t.values[self.id].data.clone())
        };
        self.tape.push(out, Op::Reshape(self.id))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(self) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            let v = &t.values[self.id];
            let (r, c) = row_view(v);
            let mut data = vec![0.0; v.len()];
            for i in 0..r {
                let row = &v.data[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    data[i * c + j] = e;
                    z += e;
                }
                for j in 0..c {
                    data[i * c + j] /= z;
                }
            }
            Tensor::new(v.shape.clone(), data)
        };
        self.tape.push(out, Op::Softmax(self.id))
    }

    /// Stable log(sum(exp(x))) of a vector, as a scalar node.
    pub fn logsumexp(self) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            let v = &t.values[self.id];
            let m = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = v.data.iter().map(|&x| (x - m).exp()).sum();
            Tensor::scalar(m + s.ln())
        };
        self.tape.push(out, Op::LogSumExp(self.id))
    }

    pub fn sum(self) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            Tensor::scalar(t.values[self.id].data.iter().sum())
        };
        self.tape.push(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            let v = &t.values[self.id];
            Tensor::scalar(v.data.iter().sum::<f64>() / v.len() as f64)
        };
        self.tape.push(out, Op::Mean(self.id))
    }

    pub fn sum_axis0(self) -> Tv<'t> {
        self.reduce_axis0(false)
    }

    pub fn mean_axis0(self) -> Tv<'t> {
        self.reduce_axis0(true)
    }

    fn reduce_axis0(self, mean: bool) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            let v = &t.values[self.id];
            let (r, c) = (v.rows(), v.cols());
            let mut data = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    data[j] += v.data[i * c + j];
                }
            }
            if mean {
                for x in data.iter_mut() {
                    *x /= r as f64;
                }
            }
            Tensor::vector(data)
        };
        let op = if mean { Op::MeanAxis0(self.id) } else { Op::SumAxis0(self.id) };
        self.tape.push(out, op)
    }

    pub fn mean_axis1(self) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            let v = &t.values[self.id];
            let (r, c) = (v.rows(), v.cols());
            let mut data = vec![0.0; r];
            for i in 0..r {
                data[i] = v.data[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
            }
            Tensor::vector(data)
        };
        self.tape.push(out, Op::MeanAxis1(self.id))
    }

    /// matrix + row vector, broadcast over rows (bias add).
    pub fn add_row(self, v: Tv<'t>) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            let m = &t.values[self.id];
            let b = &t.values[v.id];
            let (r, c) = (m.rows(), m.cols());
            assert_eq!(b.len(), c);
            let mut data = m.data.clone();
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] += b.data[j];
                }
            }
            Tensor::matrix(r, c, data)
        };
        self.tape.push(out, Op::AddRow(self.id, v.id))
    }

    /// matrix * row vector, broadcast over rows.
    pub fn mul_row(self, v: Tv<'t>) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            let m = &t.values[self.id];
            let b = &t.values[v.id];
            let (r, c) = (m.rows(), m.cols());
            assert_eq!(b.len(), c);
            let mut data = m.data.clone();
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] *= b.data[j];
                }
            }
            Tensor::matrix(r, c, data)
        };
        self.tape.push(out, Op::MulRow(self.id, v.id))
    }

    /// matrix * column vector, broadcast over columns (per-row scaling).
    pub fn mul_col(self, v: Tv<'t>) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            let m = &t.values[self.id];
            let b = &t.values[v.id];
            let (r, c) = (m.rows(), m.cols());
            assert_eq!(b.len(), r);
            let mut data = m.data.clone();
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] *= b.data[i];
                }
            }
            Tensor::matrix(r, c, data)
        };
        self.tape.push(out, Op::MulCol(self.id, v.id))
    }

    /// tensor scaled by a scalar node.
    pub fn mul_scalar(self, s: Tv<'t>) -> Tv<'t> {
        let out = {
            let t = self.tape.inner.borrow();
            let sv = t.values[s.id].item();
            let m = &t.values[self.id];
            Tensor::new(m.shape.clone(), m.data.iter().map(|&x| x * sv).collect())
        };
        self.tape.push(out, Op::MulScalar(self.id, s.id))
    }
}

impl<'t> Add for Tv<'t> {
    type Output = Tv<'t>;
    fn add(self, rhs: Self) -> Tv<'t> {
        self.binary(rhs, |a, b| a + b, Op::Add)
    }
}

impl<'t> Sub for Tv<'t> {
    type Output = Tv<'t>;
    fn sub(self, rhs: Self) -> Tv<'t> {
        self.binary(rhs, |a, b| a - b, Op::Sub)
    }
}

impl<'t> Mul for Tv<'t> {
    type Output = Tv<'t>;
    fn mul(self, rhs: Self) -> Tv<'t> {
        self.binary(rhs, |a, b| a * b, Op::Mul)
    }
}

impl<'t> Div for Tv<'t> {
    type Output = Tv<'t>;
    fn div(self, rhs: Self) -> Tv<'t> {
        self.binary(rhs, |a, b| a / b, Op::Div)
    }
}

impl<'t> Neg for Tv<'t> {
    type Output = Tv<'t>;
    fn neg(self) -> Tv<'t> {
        self.unary(|x| -x, Op::Neg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x * x;
        tape.backward(y).unwrap();
        assert_eq!(y.value(), 9.0);
        assert_eq!(x.grad().item(), 6.0);
    }

    #[test]
    fn sum_of_constants_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![5.0, 7.0]));
        let y = (c + c).sum();
        tape.backward(y).unwrap();
        assert_eq!(y.value(), 24.0);
        assert_eq!(x.grad().data, vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn matmul_chain_gradient() {
        // f(W) = sum(x W), df/dW = x^T 1
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]));
        let w = tape.leaf(Tensor::matrix(3, 2, vec![0.1; 6]));
        let y = x.matmul(w).sum();
        tape.backward(y).unwrap();
        let g = w.grad();
        assert_eq!(g.shape, vec![3, 2]);
        assert_eq!(g.at2(0, 0), 5.0);
        assert_eq!(g.at2(2, 1), 9.0);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_is_orthogonal_to_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.0, 0.0, 0.0]));
        let s = x.softmax();
        let t = s.clone_tensor();
        for i in 0..2 {
            let rs: f64 = t.row_slice(i).iter().sum();
            assert!((rs - 1.0).abs() < 1e-12);
        }
        // d(sum softmax)/dx = 0 since each row sums to 1 identically
        let y = s.sum();
        tape.backward(y).unwrap();
        for &g in x.grad().data.iter() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x * x * x; // x^3, dy/dx = 3x^2 = 12
        tape.backward(y).unwrap();
        assert_eq!(y.value(), 8.0);
        assert!((x.grad().item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_matches_naive_and_backward_is_softmax() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = x.logsumexp();
        let naive = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((l.value() - naive).abs() < 1e-12);
        tape.backward(l).unwrap();
        let g = x.grad();
        let z: f64 = [1.0, 2.0, 3.0].iter().map(|v| (v - naive).exp()).sum();
        assert!((z - 1.0).abs() < 1e-12);
        assert!((g.data[2] - (3.0 - naive).exp()).abs() < 1e-12);
    }
}
