//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value and the ids of its
//! inputs. Node ids are handed out in insertion order, so the node list is
//! topologically sorted by construction and backward is a single reverse sweep.

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Tanh,
    Logistic,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Act(Var, Nonlinearity),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Trace(Var),
    Softmax(Var, usize),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    BroadcastRows(Var),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | ConcatCols(a, b) => {
                [Some(a), Some(b)]
            }
            Transpose(a)
            | Neg(a)
            | Scale(a, _)
            | Shift(a)
            | Exp(a)
            | Log(a)
            | Abs(a)
            | Act(a, _)
            | Sum(a)
            | Mean(a)
            | SumAxis(a, _)
            | Trace(a)
            | Softmax(a, _)
            | SliceCols(a, _)
            | BroadcastRows(a) => [Some(a), None],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Operation log for one forward pass.
///
/// Gradients accumulate across repeated [`Tape::backward`] calls until
/// [`Tape::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `C = beta * C + op(A) * op(B)` with `op(A)` of shape `m x k` and `op(B)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn is_scalar(shape: &[usize]) -> bool {
    numel(shape) == 1
}

/// Output shape for an elementwise binary op, allowing a one-element operand to broadcast.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || is_scalar(b) {
        Ok(a.to_vec())
    } else if is_scalar(a) {
        Ok(b.to_vec())
    } else {
        Err(Error::dim(op, a, b))
    }
}

fn binary_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (x, y) if x == y => a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect(),
        (_, 1) => a.iter().map(|&p| f(p, b[0])).collect(),
        (1, _) => b.iter().map(|&q| f(a[0], q)).collect(),
        _ => unreachable!("shapes checked by broadcast_shape"),
    }
}

fn activate(kind: Nonlinearity, x: f64) -> f64 {
    match kind {
        Nonlinearity::Relu => x.max(0.0),
        Nonlinearity::Tanh => x.tanh(),
        Nonlinearity::Logistic => logistic(x),
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_slices(value: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; value.len()];
    for_each_slice(shape, axis, |idx| {
        let max = idx.iter().map(|&i| value[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &i in idx {
            let e = (value[i] - max).exp();
            out[i] = e;
            total += e;
        }
        for &i in idx {
            out[i] /= total;
        }
    });
    out
}

/// Calls `f` with the flat indices of every 1-D slice of `shape` along `axis`.
fn for_each_slice(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut idx = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in idx.iter_mut().enumerate() {
                *slot = (o * len + j) * inner + i;
            }
            f(&idx);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().flatten().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(shape, value, op, requires_grad)
    }

    fn push_node(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push_node(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push_node(Vec::new(), vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "item() on non-scalar node");
        n.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor, zero-filled if the node was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v);
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a)))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let out = binary_map(self.value(a), self.value(b), f);
        Ok(self.push(shape, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a row vector (`[c]` or `[1, c]`) to every row of an `r x c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_row", x)?;
        if numel(self.shape(row)) != c {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let xv = self.value(x);
        let rv = self.value(row);
        let mut out = xv.to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(rv) {
                *o += b;
            }
        }
        Ok(self.push(vec![r, c], out, Op::AddRow(x, row)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(shape, out, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        self.unary(a, |x| x + offset, Op::Shift(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn activation(&mut self, a: Var, kind: Nonlinearity) -> Var {
        self.unary(a, |x| activate(kind, x), Op::Act(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Nonlinearity::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Nonlinearity::Tanh)
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        self.activation(a, Nonlinearity::Logistic)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Vec::new(), vec![s], Op::Mean(a))
    }

    /// Sums out one axis; the result drops that axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", &shape, &[axis]));
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let v = self.value(a);
        let mut out = vec![0.0; numel(&out_shape)];
        for (i, &x) in v.iter().enumerate() {
            let o = i / (len * inner);
            let r = i % inner;
            out[o * inner + r] += x;
        }
        Ok(self.push(out_shape, out, Op::SumAxis(a, axis)))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("trace", a)?;
        if r != c {
            return Err(Error::dim("trace", self.shape(a), &[c, r]));
        }
        let v = self.value(a);
        let t = (0..r).map(|i| v[i * c + i]).sum();
        Ok(self.push(Vec::new(), vec![t], Op::Trace(a)))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        if self.value(a).iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain {
                op: "softmax",
                msg: "non-finite logits".into(),
            });
        }
        let out = softmax_slices(self.value(a), &shape, axis);
        Ok(self.push(shape, out, Op::Softmax(a, axis)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2("concat_cols", a)?;
        let (rb, cb) = self.dims2("concat_cols", b)?;
        if ra != rb {
            return Err(Error::dim("concat_cols", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(vec![ra, ca + cb], out, Op::ConcatCols(a, b)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", a)?;
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, end]));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        Ok(self.push(vec![r, end - start], out, Op::SliceCols(a, start)))
    }

    /// Repeats a row vector (`[c]` or `[1, c]`) into an `rows x c` matrix.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let c = match self.shape(a) {
            [c] | [1, c] => *c,
            other => return Err(Error::dim("broadcast_rows", other, &[1, 0])),
        };
        let v = self.value(a);
        let out = v.iter().copied().cycle().take(rows * c).collect();
        Ok(self.push(vec![rows, c], out, Op::BroadcastRows(a)))
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(upstream) = pending[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &upstream, &mut pending);
            accumulate(&mut self.grads[id], &upstream);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, up: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut send = |v: Var, g: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut pending[v.0], &g);
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.requires_grad(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, up, false, self.value(b), true, &mut ga, 0.0);
                    send(a, ga);
                }
                if self.requires_grad(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a), true, up, false, &mut gb, 0.0);
                    send(b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = up[j * r + i];
                    }
                }
                send(a, g);
            }
            Op::Add(a, b) => {
                send(a, reduce_to(up, self.value(a).len()));
                send(b, reduce_to(up, self.value(b).len()));
            }
            Op::Sub(a, b) => {
                send(a, reduce_to(up, self.value(a).len()));
                let neg: Vec<f64> = up.iter().map(|g| -g).collect();
                send(b, reduce_to(&neg, self.value(b).len()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    let ga = binary_map(up, bv, |g, y| g * y);
                    send(a, reduce_to(&ga, av.len()));
                }
                if self.requires_grad(b) {
                    let gb = binary_map(up, av, |g, x| g * x);
                    send(b, reduce_to(&gb, bv.len()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    let ga = binary_map(up, bv, |g, y| g / y);
                    send(a, reduce_to(&ga, av.len()));
                }
                if self.requires_grad(b) {
                    // d(a/b)/db = -out / b
                    let q = binary_map(out, bv, |o, y| o / y);
                    let gb: Vec<f64> = up.iter().zip(&q).map(|(g, q)| -g * q).collect();
                    send(b, reduce_to(&gb, bv.len()));
                }
            }
            Op::AddRow(x, row) => {
                send(x, up.to_vec());
                if self.requires_grad(row) {
                    let c = self.value(row).len();
                    let mut g = vec![0.0; c];
                    for chunk in up.chunks_exact(c) {
                        for (acc, v) in g.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    send(row, g);
                }
            }
            Op::Neg(a) => send(a, up.iter().map(|g| -g).collect()),
            Op::Scale(a, f) => send(a, up.iter().map(|g| g * f).collect()),
            Op::Shift(a) => send(a, up.to_vec()),
            Op::Exp(a) => send(a, up.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Log(a) => send(a, up.iter().zip(self.value(a)).map(|(g, x)| g / x).collect()),
            Op::Abs(a) => send(
                a,
                up.iter()
                    .zip(self.value(a))
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::Act(a, kind) => {
                let x = self.value(a);
                let g = match kind {
                    Nonlinearity::Relu => up.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    Nonlinearity::Tanh => up.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Nonlinearity::Logistic => up.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
                };
                send(a, g);
            }
            Op::Sum(a) => send(a, vec![up[0]; self.value(a).len()]),
            Op::Mean(a) => {
                let n = self.value(a).len();
                send(a, vec![up[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) => {
                let shape = self.shape(a);
                let inner: usize = shape[axis + 1..].iter().product();
                let len = shape[axis];
                let g = (0..numel(shape))
                    .map(|i| up[(i / (len * inner)) * inner + i % inner])
                    .collect();
                send(a, g);
            }
            Op::Trace(a) => {
                let n = self.shape(a)[0];
                let mut g = vec![0.0; n * n];
                for i in 0..n {
                    g[i * n + i] = up[0];
                }
                send(a, g);
            }
            Op::Softmax(a, axis) => {
                let mut g = vec![0.0; out.len()];
                for_each_slice(&node.shape, axis, |idx| {
                    let dot: f64 = idx.iter().map(|&i| up[i] * out[i]).sum();
                    for &i in idx {
                        g[i] = out[i] * (up[i] - dot);
                    }
                });
                send(a, g);
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = (self.shape(a)[0], self.shape(a)[1]);
                let cb = self.shape(b)[1];
                let mut ga = Vec::with_capacity(r * ca);
                let mut gb = Vec::with_capacity(r * cb);
                for row in up.chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                send(a, ga);
                send(b, gb);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let w = node.shape[1];
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    g[i * c + start..i * c + start + w].copy_from_slice(&up[i * w..(i + 1) * w]);
                }
                send(a, g);
            }
            Op::BroadcastRows(a) => {
                let c = self.value(a).len();
                let mut g = vec![0.0; c];
                for chunk in up.chunks_exact(c) {
                    for (acc, v) in g.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                send(a, g);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Sums a broadcast gradient back down to a one-element operand.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        g.to_vec()
    } else {
        debug_assert_eq!(len, 1);
        vec![g.iter().sum()]
    }
}
