//! Recording graph with reverse-mode differentiation.
//!
//! Every backward rule is itself written in terms of recorded ops, so the
//! gradients returned by [`Graph::grad`] are ordinary [`Var`]s that can be
//! differentiated again (double backward). A `Graph` is single-threaded; the
//! [`Tensor`] values it produces are plain data.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Abs(usize),
    Sqrt(usize),
    Recip(usize),
    Sum(usize),
    Mean(usize),
    L2NormSq(usize),
    /// Scalar broadcast to the shape of this node.
    Expand(usize, Vec<usize>),
    /// `[n, m] -> [m]`, summing over rows.
    SumRows(usize),
    /// `[m] -> [n, m]`.
    BroadcastRows(usize, usize),
    /// `[n, m] -> [n]`, summing within each row.
    RowSum(usize),
    /// `[n] -> [n, m]`.
    BroadcastCols(usize, usize),
    Softmax(usize),
    /// Mean softmax cross-entropy over rows.
    SoftmaxCrossEntropy(usize, Rc<[usize]>),
    Gather(usize, Rc<[usize]>),
    /// Scatter-add into a zero vector of the given length.
    Scatter(usize, Rc<[usize]>, usize),
    Reshape(usize, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf | Const => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => [Some(a), Some(b)],
            Transpose(a)
            | Scale(a, _)
            | Relu(a)
            | Tanh(a)
            | Abs(a)
            | Sqrt(a)
            | Recip(a)
            | Sum(a)
            | Mean(a)
            | L2NormSq(a)
            | Expand(a, _)
            | SumRows(a)
            | BroadcastRows(a, _)
            | RowSum(a)
            | BroadcastCols(a, _)
            | Softmax(a)
            | SoftmaxCrossEntropy(a, _)
            | Gather(a, _)
            | Scatter(a, _, _)
            | Reshape(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The public primitive set accepted by [`Graph::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Tanh,
    Sum,
    Mean,
    L2NormSq,
    SoftmaxCrossEntropy(Vec<usize>),
}

impl Primitive {
    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul => 2,
            _ => 1,
        }
    }
}

/// A differentiation record. Create leaves with [`Graph::var`], combine them
/// with the methods on [`Var`], then call [`Graph::grad`].
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Const, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, op: Op) -> Var<'_> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let value = evaluate(&op, &nodes);
            let requires_grad = op
                .inputs()
                .iter()
                .flatten()
                .any(|&i| nodes[i].requires_grad);
            (value, requires_grad)
        };
        self.push(Rc::new(value), op, requires_grad)
    }

    /// Applies one of the public primitives to `inputs`.
    pub fn apply<'g>(&'g self, prim: Primitive, inputs: &[Var<'g>]) -> Result<Var<'g>> {
        if inputs.len() != prim.arity() {
            return Err(Error::invalid(format!(
                "{prim:?} takes {} inputs, got {}",
                prim.arity(),
                inputs.len()
            )));
        }
        let a = inputs[0];
        Ok(match prim {
            Primitive::MatMul => a.matmul(inputs[1])?,
            Primitive::Add => a.add(inputs[1])?,
            Primitive::Sub => a.sub(inputs[1])?,
            Primitive::Mul => a.mul(inputs[1])?,
            Primitive::Scale(c) => a.scale(c),
            Primitive::Relu => a.relu(),
            Primitive::Tanh => a.tanh(),
            Primitive::Sum => a.sum(),
            Primitive::Mean => a.mean(),
            Primitive::L2NormSq => a.l2_norm_sq(),
            Primitive::SoftmaxCrossEntropy(labels) => a.softmax_cross_entropy(&labels)?,
        })
    }

    /// Recomputes every non-leaf node from its inputs, in recording order.
    pub fn replay(&self) -> Vec<Tensor> {
        let nodes = self.nodes.borrow();
        let mut replayed: Vec<Node> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let value = match node.op {
                Op::Leaf | Op::Const => node.value.clone(),
                ref op => Rc::new(evaluate(op, &replayed)),
            };
            replayed.push(Node {
                value,
                op: node.op.clone(),
                requires_grad: node.requires_grad,
            });
        }
        replayed.into_iter().map(|n| (*n.value).clone()).collect()
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned vars are recorded on this graph, so they can be fed into
    /// further computation and differentiated again. Leaves that do not
    /// influence `output` get an all-zero constant.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        if !output.shape().is_empty() {
            return Err(Error::shape(
                "grad (output must be scalar)",
                &[&output.shape()],
            ));
        }
        let end = output.id + 1;

        // Nodes on some path from a requested leaf.
        let mut reaches = vec![false; end];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id < end {
                    reaches[w.id] = true;
                }
            }
            for i in 0..end {
                if !reaches[i] && nodes[i].requires_grad {
                    reaches[i] = nodes[i].op.inputs().iter().flatten().any(|&j| reaches[j]);
                }
            }
        }

        let mut adjoint: Vec<Option<Var<'g>>> = vec![None; end];
        adjoint[output.id] = Some(self.scalar(1.0));

        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !reaches[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            let out = Var { graph: self, id: i };
            let wants = |j: usize| reaches[j] && self.requires(j);
            let mut acc = |j: usize, v: Var<'g>| -> Result<()> {
                adjoint[j] = Some(match adjoint[j] {
                    None => v,
                    Some(prev) => prev.add(v)?,
                });
                Ok(())
            };
            let var = |j: usize| Var { graph: self, id: j };
            match op {
                Op::Leaf | Op::Const => {}
                Op::MatMul(a, b) => {
                    if wants(a) {
                        acc(a, g.matmul(var(b).transpose()?)?)?;
                    }
                    if wants(b) {
                        acc(b, var(a).transpose()?.matmul(g)?)?;
                    }
                }
                Op::Transpose(a) => acc(a, g.transpose()?)?,
                Op::Add(a, b) => {
                    if wants(a) {
                        acc(a, g)?;
                    }
                    if wants(b) {
                        acc(b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if wants(a) {
                        acc(a, g)?;
                    }
                    if wants(b) {
                        acc(b, g.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        acc(a, g.mul(var(b))?)?;
                    }
                    if wants(b) {
                        acc(b, g.mul(var(a))?)?;
                    }
                }
                Op::Scale(a, c) => acc(a, g.scale(c))?,
                Op::Relu(a) => {
                    let mask = self.value_of(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    acc(a, g.mul(self.constant(mask))?)?;
                }
                Op::Tanh(a) => {
                    // d tanh = 1 - y^2
                    let y2 = out.mul(out)?;
                    acc(a, g.sub(g.mul(y2)?)?)?;
                }
                Op::Abs(a) => {
                    let sign = self.value_of(a).map(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(a, g.mul(self.constant(sign))?)?;
                }
                Op::Sqrt(a) => acc(a, g.mul(out.recip())?.scale(0.5))?,
                Op::Recip(a) => acc(a, g.mul(out.mul(out)?)?.scale(-1.0))?,
                Op::Sum(a) => acc(a, g.expand(&var(a).shape())?)?,
                Op::Mean(a) => {
                    let shape = var(a).shape();
                    let n = shape.iter().product::<usize>().max(1) as f64;
                    acc(a, g.expand(&shape)?.scale(1.0 / n))?;
                }
                Op::L2NormSq(a) => {
                    let x = var(a);
                    acc(a, g.expand(&x.shape())?.mul(x)?.scale(2.0))?;
                }
                Op::Expand(a, _) => acc(a, g.sum())?,
                Op::SumRows(a) => {
                    let n = var(a).shape()[0];
                    acc(a, g.broadcast_rows(n)?)?;
                }
                Op::BroadcastRows(a, _) => acc(a, g.sum_rows()?)?,
                Op::RowSum(a) => {
                    let m = var(a).shape()[1];
                    acc(a, g.broadcast_cols(m)?)?;
                }
                Op::BroadcastCols(a, _) => acc(a, g.row_sum()?)?,
                Op::Softmax(a) => {
                    // s * (g - rowsum(g * s))
                    let m = out.shape()[1];
                    let inner = g.mul(out)?.row_sum()?.broadcast_cols(m)?;
                    acc(a, out.mul(g.sub(inner)?)?)?;
                }
                Op::SoftmaxCrossEntropy(a, labels) => {
                    let logits = var(a);
                    let shape = logits.shape();
                    let (rows, cols) = (shape[0], shape[1]);
                    let mut onehot = vec![0.0; rows * cols];
                    for (r, &y) in labels.iter().enumerate() {
                        onehot[r * cols + y] = 1.0;
                    }
                    let onehot = self.constant(Tensor::from_parts(shape.clone(), onehot));
                    let residual = logits.softmax()?.sub(onehot)?;
                    acc(a, g.expand(&shape)?.mul(residual)?.scale(1.0 / rows as f64))?;
                }
                Op::Gather(a, idx) => {
                    let input = var(a);
                    let flat = g.scatter(&idx, input.value_len())?;
                    acc(a, flat.reshape(&input.shape())?)?;
                }
                Op::Scatter(a, idx, _) => {
                    let shape = var(a).shape();
                    acc(a, g.gather(&idx)?.reshape(&shape)?)?;
                }
                Op::Reshape(a, _) => {
                    let shape = var(a).shape();
                    acc(a, g.reshape(&shape)?)?;
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| {
                adjoint
                    .get(w.id)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| self.constant(Tensor::zeros(w.shape())))
            })
            .collect())
    }
}

fn evaluate(op: &Op, nodes: &[Node]) -> Tensor {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match op {
        Op::Leaf | Op::Const => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => matmul(val(*a), val(*b)),
        Op::Transpose(a) => {
            let x = val(*a);
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let d = x.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], out)
        }
        Op::Add(a, b) => zip(val(*a), val(*b), |x, y| x + y),
        Op::Sub(a, b) => zip(val(*a), val(*b), |x, y| x - y),
        Op::Mul(a, b) => zip(val(*a), val(*b), |x, y| x * y),
        Op::Scale(a, c) => val(*a).map(|x| x * c),
        Op::Relu(a) => val(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Tanh(a) => val(*a).map(f64::tanh),
        Op::Abs(a) => val(*a).map(f64::abs),
        Op::Sqrt(a) => val(*a).map(f64::sqrt),
        Op::Recip(a) => val(*a).map(|x| 1.0 / x),
        Op::Sum(a) => Tensor::scalar(val(*a).data().iter().sum()),
        Op::Mean(a) => {
            let x = val(*a);
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len().max(1) as f64)
        }
        Op::L2NormSq(a) => Tensor::scalar(val(*a).data().iter().map(|v| v * v).sum()),
        Op::Expand(a, shape) => Tensor::full(shape.clone(), val(*a).item()),
        Op::SumRows(a) => {
            let x = val(*a);
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            Tensor::from_parts(vec![c], out)
        }
        Op::BroadcastRows(a, n) => {
            let x = val(*a);
            let mut out = Vec::with_capacity(n * x.len());
            for _ in 0..*n {
                out.extend_from_slice(x.data());
            }
            Tensor::from_parts(vec![*n, x.len()], out)
        }
        Op::RowSum(a) => {
            let x = val(*a);
            let r = x.shape()[0];
            Tensor::from_parts(vec![r], (0..r).map(|i| x.row(i).iter().sum()).collect())
        }
        Op::BroadcastCols(a, m) => {
            let x = val(*a);
            let mut out = Vec::with_capacity(x.len() * m);
            for &v in x.data() {
                out.extend(std::iter::repeat_n(v, *m));
            }
            Tensor::from_parts(vec![x.len(), *m], out)
        }
        Op::Softmax(a) => {
            let x = val(*a);
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                softmax_row(x.row(i), &mut out[i * c..(i + 1) * c]);
            }
            Tensor::from_parts(vec![r, c], out)
        }
        Op::SoftmaxCrossEntropy(a, labels) => {
            let x = val(*a);
            let r = x.shape()[0];
            let total: f64 = (0..r)
                .map(|i| {
                    let row = x.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    lse - row[labels[i]]
                })
                .sum();
            Tensor::scalar(total / r as f64)
        }
        Op::Gather(a, idx) => {
            let d = val(*a).data();
            Tensor::from_parts(vec![idx.len()], idx.iter().map(|&i| d[i]).collect())
        }
        Op::Scatter(a, idx, len) => {
            let d = val(*a).data();
            let mut out = vec![0.0; *len];
            for (&i, &v) in idx.iter().zip(d) {
                out[i] += v;
            }
            Tensor::from_parts(vec![*len], out)
        }
        Op::Reshape(a, shape) => Tensor::from_parts(shape.clone(), val(*a).data().to_vec()),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

// Binary ops return `Result` (shape checks), so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        (*self.graph.value_of(self.id)).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn value_len(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    /// Value of a one-element var.
    pub fn item(&self) -> f64 {
        self.graph.value_of(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    fn same_graph(&self, other: Var<'g>, op: &'static str) -> Result<()> {
        if !std::ptr::eq(self.graph, other.graph) {
            return Err(Error::invalid(format!(
                "{op}: operands live on different graphs"
            )));
        }
        Ok(())
    }

    fn same_shape(&self, other: Var<'g>, op: &'static str) -> Result<()> {
        self.same_graph(other, op)?;
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(op, &[&a, &b]));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(op, &[&s]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(rhs, "matmul")?;
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape("matmul", &[&a, &b]));
        }
        Ok(self.graph.record(Op::MatMul(self.id, rhs.id)))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        self.rank2("transpose")?;
        Ok(self.graph.record(Op::Transpose(self.id)))
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_shape(rhs, "add")?;
        Ok(self.graph.record(Op::Add(self.id, rhs.id)))
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_shape(rhs, "sub")?;
        Ok(self.graph.record(Op::Sub(self.id, rhs.id)))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_shape(rhs, "mul")?;
        Ok(self.graph.record(Op::Mul(self.id, rhs.id)))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.graph.record(Op::Scale(self.id, c))
    }

    pub fn relu(self) -> Var<'g> {
        self.graph.record(Op::Relu(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        self.graph.record(Op::Tanh(self.id))
    }

    pub fn abs(self) -> Var<'g> {
        self.graph.record(Op::Abs(self.id))
    }

    pub fn sqrt(self) -> Var<'g> {
        self.graph.record(Op::Sqrt(self.id))
    }

    pub fn recip(self) -> Var<'g> {
        self.graph.record(Op::Recip(self.id))
    }

    pub fn sum(self) -> Var<'g> {
        self.graph.record(Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        self.graph.record(Op::Mean(self.id))
    }

    pub fn l2_norm_sq(self) -> Var<'g> {
        self.graph.record(Op::L2NormSq(self.id))
    }

    /// Inner product of two same-shaped vars.
    pub fn dot(self, rhs: Var<'g>) -> Result<Var<'g>> {
        Ok(self.mul(rhs)?.sum())
    }

    /// Broadcasts a scalar to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'g>> {
        if !self.shape().is_empty() {
            return Err(Error::shape(
                "expand (input must be scalar)",
                &[&self.shape()],
            ));
        }
        Ok(self.graph.record(Op::Expand(self.id, shape.to_vec())))
    }

    pub fn sum_rows(self) -> Result<Var<'g>> {
        self.rank2("sum_rows")?;
        Ok(self.graph.record(Op::SumRows(self.id)))
    }

    pub fn broadcast_rows(self, n: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::shape("broadcast_rows", &[&s]));
        }
        Ok(self.graph.record(Op::BroadcastRows(self.id, n)))
    }

    pub fn row_sum(self) -> Result<Var<'g>> {
        self.rank2("row_sum")?;
        Ok(self.graph.record(Op::RowSum(self.id)))
    }

    pub fn broadcast_cols(self, m: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::shape("broadcast_cols", &[&s]));
        }
        Ok(self.graph.record(Op::BroadcastCols(self.id, m)))
    }

    /// `[n, m] + [m]`, adding `bias` to every row.
    pub fn add_row(self, bias: Var<'g>) -> Result<Var<'g>> {
        let (n, m) = self.rank2("add_row")?;
        let b = bias.shape();
        if b != [m] {
            return Err(Error::shape("add_row", &[&self.shape(), &b]));
        }
        self.add(bias.broadcast_rows(n)?)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(self) -> Result<Var<'g>> {
        self.rank2("softmax")?;
        Ok(self.graph.record(Op::Softmax(self.id)))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against `labels`.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'g>> {
        let (rows, cols) = self.rank2("softmax_cross_entropy")?;
        if labels.len() != rows || rows == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                &[&self.shape(), &[labels.len()]],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        Ok(self
            .graph
            .record(Op::SoftmaxCrossEntropy(self.id, labels.to_vec().into())))
    }

    /// Selects flat positions `idx` into a vector.
    pub fn gather(self, idx: &[usize]) -> Result<Var<'g>> {
        let n = self.value_len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range {n}"
            )));
        }
        Ok(self.graph.record(Op::Gather(self.id, idx.to_vec().into())))
    }

    /// Adds this vector into positions `idx` of a zero vector of length `len`.
    pub fn scatter(self, idx: &[usize], len: usize) -> Result<Var<'g>> {
        if idx.len() != self.value_len() {
            return Err(Error::shape("scatter", &[&self.shape(), &[idx.len()]]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::invalid(format!(
                "scatter index {bad} out of range {len}"
            )));
        }
        Ok(self
            .graph
            .record(Op::Scatter(self.id, idx.to_vec().into(), len)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        if shape.iter().product::<usize>() != self.value_len() {
            return Err(Error::shape("reshape", &[&self.shape(), shape]));
        }
        Ok(self.graph.record(Op::Reshape(self.id, shape.to_vec())))
    }

    /// Contiguous slice `[start, start+len)` of the flattened value.
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'g>> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(&idx)
    }
}
