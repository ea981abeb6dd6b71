//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is built symbolically: named inputs, constants and primitive
//! ops are appended in topological order, with shapes inferred at build
//! time. [`Graph::forward`] binds the named inputs and evaluates every node;
//! [`Graph::backward`] then walks the nodes in reverse and returns gradients
//! for every input declared with `requires_grad`.
//!
//! Reductions, softmax and the normalizations act on the last axis. Binary
//! elementwise ops broadcast numpy-style. `max_last` routes its subgradient
//! to the first maximal index of each row.

mod gradcheck;
mod kernels;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{
    check_graph, check_graph_with, finite_difference_check, finite_difference_check_with, relative_error,
    GradCheckReport, Stencil,
};

use kernels::{aligned_strides, broadcast_dims, broadcast_for_each, gelu, gelu_grad, gemm_acc, transpose_batched};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {node} ({op}): expected dims {expected:?}, got {actual:?}")]
    ShapeMismatch { node: usize, op: &'static str, expected: Vec<usize>, actual: Vec<usize> },
    #[error("input `{0}` is not bound")]
    Unbound(String),
    #[error("no input named `{0}`")]
    UnknownInput(String),
    #[error("duplicate input name `{0}`")]
    DuplicateInput(String),
    #[error("backward requested before forward evaluation")]
    NotEvaluated,
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}

type Result<T> = std::result::Result<T, GraphError>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input { name: String, requires_grad: bool },
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Exp(Var),
    Log(Var),
    SumLast(Var),
    MeanLast(Var),
    MaxLast(Var),
    SumAll(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    L2Normalize { x: Var, eps: f64 },
    Gelu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::SumLast(_) => "sum",
            Op::MeanLast(_) => "mean",
            Op::MaxLast(_) => "max",
            Op::SumAll(_) => "sum_all",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Gelu(_) => "gelu",
            Op::Clamp { .. } => "clamp",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input { .. } | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Slice { x, .. }
            | Op::Exp(x)
            | Op::Log(x)
            | Op::SumLast(x)
            | Op::MeanLast(x)
            | Op::MaxLast(x)
            | Op::SumAll(x)
            | Op::Softmax(x)
            | Op::L2Normalize { x, .. }
            | Op::Gelu(x)
            | Op::Clamp { x, .. } => vec![*x],
        }
    }
}

/// Per-node state produced by the forward pass and consumed by backward.
#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    Argmax(Vec<usize>),
    RowStats { mean: Vec<T>, rstd: Vec<T> },
    RowNorms(Vec<T>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    dims: Vec<usize>,
    value: Option<Tensor<T>>,
    aux: Aux<T>,
    needs_grad: bool,
}

/// Gradients keyed by input name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

/// A computation graph in topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    inputs: BTreeMap<String, usize>,
    evaluated: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), inputs: BTreeMap::new(), evaluated: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    /// Input ids of a node; every id is strictly smaller than the node's own.
    pub fn node_inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, op: Op, dims: Vec<usize>) -> Var {
        let needs_grad = match &op {
            Op::Input { requires_grad, .. } => *requires_grad,
            Op::Constant => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.evaluated = false;
        self.nodes.push(Node { op, dims, value: None, aux: Aux::None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, expected: &[usize], actual: &[usize]) -> GraphError {
        GraphError::ShapeMismatch { node: self.nodes.len(), op, expected: expected.to_vec(), actual: actual.to_vec() }
    }

    // ---------------------------------------------------------------- leaves

    /// Declares a named input to be bound at forward time.
    pub fn input(&mut self, name: &str, dims: &[usize], requires_grad: bool) -> Result<Var> {
        if self.inputs.contains_key(name) {
            return Err(GraphError::DuplicateInput(name.to_string()));
        }
        if dims.is_empty() || dims.contains(&0) {
            return Err(self.mismatch("input", &[], dims));
        }
        let v = self.push(Op::Input { name: name.to_string(), requires_grad }, dims.to_vec());
        self.inputs.insert(name.to_string(), v.0);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(Op::Constant, t.dims().to_vec());
        self.nodes[v.0].value = Some(t);
        v
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(T::c(x)))
    }

    // ------------------------------------------------------------ elementwise

    fn binary(&mut self, a: Var, b: Var, op: Op) -> Result<Var> {
        let name = op.name();
        let (da, db) = (&self.nodes[a.0].dims, &self.nodes[b.0].dims);
        let out = broadcast_dims(da, db).ok_or_else(|| self.mismatch(name, da, db))?;
        Ok(self.push(op, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let dims = self.nodes[x.0].dims.clone();
        self.push(Op::Scale(x, s), dims)
    }

    fn unary(&mut self, x: Var, op: Op) -> Var {
        let dims = self.nodes[x.0].dims.clone();
        self.push(op, dims)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x))
    }

    /// Clamps into `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi })
    }

    // ----------------------------------------------------------------- shape

    /// `(m×k)·(k×n)` or batched `(b×m×k)·(b×k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.nodes[a.0].dims.clone(), self.nodes[b.0].dims.clone());
        let ok = match (da.len(), db.len()) {
            (2, 2) => da[1] == db[0],
            (3, 3) => da[0] == db[0] && da[2] == db[1],
            _ => false,
        };
        if !ok {
            return Err(self.mismatch("matmul", &da, &db));
        }
        let mut out = da.clone();
        *out.last_mut().unwrap() = *db.last().unwrap();
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let mut dims = self.nodes[x.0].dims.clone();
        let r = dims.len();
        if r < 2 {
            return Err(self.mismatch("transpose", &[0, 0], &dims));
        }
        dims.swap(r - 1, r - 2);
        Ok(self.push(Op::Transpose(x), dims))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let src = &self.nodes[x.0].dims;
        let n: usize = src.iter().product();
        if dims.iter().product::<usize>() != n || dims.is_empty() || dims.contains(&0) {
            return Err(self.mismatch("reshape", src, dims));
        }
        Ok(self.push(Op::Reshape(x), dims.to_vec()))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.nodes[parts[0].0].dims.clone();
        if axis >= first.len() {
            return Err(self.mismatch("concat", &first, &[axis]));
        }
        let mut out = first.clone();
        out[axis] = 0;
        for p in parts {
            let d = &self.nodes[p.0].dims;
            let same =
                d.len() == first.len() && d.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(self.mismatch("concat", &first, d));
            }
            out[axis] += d[axis];
        }
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, out))
    }

    /// Keeps `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let mut dims = self.nodes[x.0].dims.clone();
        if axis >= dims.len() || start >= end || end > dims[axis] {
            return Err(self.mismatch("slice", &dims, &[axis, start, end]));
        }
        dims[axis] = end - start;
        Ok(self.push(Op::Slice { x, axis, start }, dims))
    }

    // ------------------------------------------------------------- reduction

    fn reduce_last(&mut self, x: Var, op: Op) -> Var {
        let mut dims = self.nodes[x.0].dims.clone();
        *dims.last_mut().unwrap() = 1;
        self.push(op, dims)
    }

    pub fn sum_last(&mut self, x: Var) -> Var {
        self.reduce_last(x, Op::SumLast(x))
    }

    pub fn mean_last(&mut self, x: Var) -> Var {
        self.reduce_last(x, Op::MeanLast(x))
    }

    /// Row maximum; records the first maximal index for backward.
    pub fn max_last(&mut self, x: Var) -> Var {
        self.reduce_last(x, Op::MaxLast(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.push(Op::SumAll(x), vec![1])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n: usize = self.nodes[x.0].dims.iter().product();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softmax(x))
    }

    /// Per-row layer normalization with gain and bias of length `last_dim`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let dims = self.nodes[x.0].dims.clone();
        let d = *dims.last().unwrap();
        for p in [gain, bias] {
            let pd = &self.nodes[p.0].dims;
            if pd.iter().product::<usize>() != d || *pd.last().unwrap() != d {
                return Err(self.mismatch("layer_norm", &[d], pd));
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, dims))
    }

    /// Per-row `x / max(‖x‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, Op::L2Normalize { x, eps })
    }

    // --------------------------------------------------------------- forward

    /// Binds one named input, checking its dims against the declaration.
    pub fn bind(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let &i = self.inputs.get(name).ok_or_else(|| GraphError::UnknownInput(name.to_string()))?;
        if value.dims() != self.nodes[i].dims.as_slice() {
            return Err(GraphError::ShapeMismatch {
                node: i,
                op: "input",
                expected: self.nodes[i].dims.clone(),
                actual: value.dims().to_vec(),
            });
        }
        self.nodes[i].value = Some(value);
        self.evaluated = false;
        Ok(())
    }

    /// Mutable access to a bound input, for in-place perturbation.
    pub fn input_value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let &i = self.inputs.get(name)?;
        self.evaluated = false;
        self.nodes[i].value.as_mut()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn input_var(&self, name: &str) -> Option<Var> {
        self.inputs.get(name).map(|&i| Var(i))
    }

    /// Names of inputs declared with `requires_grad`.
    pub fn trainable_inputs(&self) -> Vec<String> {
        self.inputs
            .iter()
            .filter(|(_, &i)| matches!(self.nodes[i].op, Op::Input { requires_grad: true, .. }))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Binds the named inputs that this graph declares, then evaluates.
    /// Extra entries in `inputs` are ignored.
    pub fn forward(&mut self, inputs: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let names: Vec<String> = self.inputs.keys().cloned().collect();
        for name in names {
            if let Some(t) = inputs.get(&name) {
                self.bind(&name, t.clone())?;
            }
        }
        self.run()
    }

    /// Evaluates every node from the currently bound inputs.
    pub fn run(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if let Op::Input { name, .. } = &self.nodes[i].op {
                if self.nodes[i].value.is_none() {
                    return Err(GraphError::Unbound(name.clone()));
                }
                continue;
            }
            if matches!(self.nodes[i].op, Op::Constant) {
                continue;
            }
            let (value, aux) = self.eval_node(i);
            debug_assert_eq!(value.dims(), self.nodes[i].dims.as_slice());
            self.nodes[i].value = Some(value);
            self.nodes[i].aux = aux;
        }
        self.evaluated = true;
        Ok(())
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        if !self.evaluated && !matches!(self.nodes[v.0].op, Op::Input { .. } | Op::Constant) {
            return Err(GraphError::NotEvaluated);
        }
        self.nodes[v.0].value.as_ref().ok_or(GraphError::NotEvaluated)
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> Result<T> {
        Ok(self.value(v)?.data()[0])
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_ref().expect("evaluated in topological order")
    }

    /// Discrete decisions taken by the last forward pass: argmax indices of
    /// every max node and the active region of every clamp. Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match (&node.op, &node.aux) {
                (Op::MaxLast(_), Aux::Argmax(idx)) => sig.extend(idx.iter().map(|&i| i as u32)),
                (Op::Clamp { x, lo, hi }, _) => {
                    if let Some(v) = self.nodes[x.0].value.as_ref() {
                        sig.extend(v.data().iter().map(|&e| {
                            let e = e.as_f64();
                            if e < *lo {
                                0
                            } else if e > *hi {
                                2
                            } else {
                                1
                            }
                        }));
                    }
                }
                _ => {}
            }
        }
        sig
    }

    fn eval_node(&self, i: usize) -> (Tensor<T>, Aux<T>) {
        let dims = self.nodes[i].dims.clone();
        let mk = |data: Vec<T>| Tensor::new(dims.clone(), data).expect("inferred dims");
        match &self.nodes[i].op {
            Op::Input { .. } | Op::Constant => unreachable!(),
            Op::Add(a, b) => (mk(self.broadcast_op(*a, *b, &dims, |x, y| x + y)), Aux::None),
            Op::Sub(a, b) => (mk(self.broadcast_op(*a, *b, &dims, |x, y| x - y)), Aux::None),
            Op::Mul(a, b) => (mk(self.broadcast_op(*a, *b, &dims, |x, y| x * y)), Aux::None),
            Op::Scale(x, s) => {
                let s = T::c(*s);
                (mk(self.val(*x).data().iter().map(|&e| e * s).collect()), Aux::None)
            }
            Op::MatMul(a, b) => (mk(matmul_fwd(self.val(*a), self.val(*b))), Aux::None),
            Op::Transpose(x) => {
                let t = self.val(*x);
                let r = t.rank();
                let (rows, cols) = (t.dims()[r - 2], t.dims()[r - 1]);
                let batch = t.len() / (rows * cols);
                (mk(transpose_batched(t.data(), batch, rows, cols)), Aux::None)
            }
            Op::Reshape(x) => (mk(self.val(*x).data().to_vec()), Aux::None),
            Op::Concat { parts, axis } => {
                let outer: usize = dims[..*axis].iter().product();
                let inner: usize = dims[axis + 1..].iter().product();
                let mut out = Vec::with_capacity(dims.iter().product());
                for o in 0..outer {
                    for p in parts {
                        let t = self.val(*p);
                        let chunk = t.dims()[*axis] * inner;
                        out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                (mk(out), Aux::None)
            }
            Op::Slice { x, axis, start } => {
                let t = self.val(*x);
                let outer: usize = dims[..*axis].iter().product();
                let inner: usize = dims[axis + 1..].iter().product();
                let src_chunk = t.dims()[*axis] * inner;
                let len = dims[*axis] * inner;
                let mut out = Vec::with_capacity(outer * len);
                for o in 0..outer {
                    let base = o * src_chunk + start * inner;
                    out.extend_from_slice(&t.data()[base..base + len]);
                }
                (mk(out), Aux::None)
            }
            Op::Exp(x) => (mk(self.val(*x).data().iter().map(|e| e.exp()).collect()), Aux::None),
            Op::Log(x) => (mk(self.val(*x).data().iter().map(|e| e.ln()).collect()), Aux::None),
            Op::Gelu(x) => (mk(self.val(*x).data().iter().map(|&e| gelu(e)).collect()), Aux::None),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (T::c(*lo), T::c(*hi));
                let out = self.val(*x).data().iter().map(|&e| e.max(lo).min(hi)).collect();
                (mk(out), Aux::None)
            }
            Op::SumLast(x) => {
                let out = self.val(*x).rows().map(|r| r.iter().copied().sum()).collect();
                (mk(out), Aux::None)
            }
            Op::MeanLast(x) => {
                let t = self.val(*x);
                let n = T::c(t.last_dim() as f64);
                let out = t.rows().map(|r| r.iter().copied().sum::<T>() / n).collect();
                (mk(out), Aux::None)
            }
            Op::MaxLast(x) => {
                let t = self.val(*x);
                let mut arg = Vec::with_capacity(t.len() / t.last_dim());
                let mut out = Vec::with_capacity(arg.capacity());
                for r in t.rows() {
                    let mut best = 0;
                    for (j, &v) in r.iter().enumerate().skip(1) {
                        if v > r[best] {
                            best = j;
                        }
                    }
                    arg.push(best);
                    out.push(r[best]);
                }
                (mk(out), Aux::Argmax(arg))
            }
            Op::SumAll(x) => (mk(vec![self.val(*x).data().iter().copied().sum()]), Aux::None),
            Op::Softmax(x) => {
                let t = self.val(*x);
                let mut out = Vec::with_capacity(t.len());
                for r in t.rows() {
                    let m = r.iter().copied().fold(T::neg_infinity(), T::max);
                    let start = out.len();
                    out.extend(r.iter().map(|&v| (v - m).exp()));
                    let z: T = out[start..].iter().copied().sum();
                    for v in &mut out[start..] {
                        *v /= z;
                    }
                }
                (mk(out), Aux::None)
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let t = self.val(*x);
                let (g, b) = (self.val(*gain).data(), self.val(*bias).data());
                let d = t.last_dim();
                let n = T::c(d as f64);
                let eps = T::c(*eps);
                let rows = t.len() / d;
                let (mut means, mut rstds) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
                let mut out = Vec::with_capacity(t.len());
                for r in t.rows() {
                    let mean = r.iter().copied().sum::<T>() / n;
                    let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let rstd = T::one() / (var + eps).sqrt();
                    out.extend(r.iter().enumerate().map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]));
                    means.push(mean);
                    rstds.push(rstd);
                }
                (mk(out), Aux::RowStats { mean: means, rstd: rstds })
            }
            Op::L2Normalize { x, eps } => {
                let t = self.val(*x);
                let eps = T::c(*eps);
                let mut norms = Vec::with_capacity(t.len() / t.last_dim());
                let mut out = Vec::with_capacity(t.len());
                for r in t.rows() {
                    let norm = r.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let denom = norm.max(eps);
                    out.extend(r.iter().map(|&v| v / denom));
                    norms.push(norm);
                }
                (mk(out), Aux::RowNorms(norms))
            }
        }
    }

    fn broadcast_op(&self, a: Var, b: Var, out: &[usize], f: impl Fn(T, T) -> T) -> Vec<T> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.dims() == tb.dims() {
            return ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        }
        let (sa, sb) = (aligned_strides(ta.dims(), out), aligned_strides(tb.dims(), out));
        let (da, db) = (ta.data(), tb.data());
        let mut res = vec![T::zero(); out.iter().product()];
        broadcast_for_each(out, &sa, &sb, |o, ia, ib| res[o] = f(da[ia], db[ib]));
        res
    }

    // -------------------------------------------------------------- backward

    /// Backward pass from a scalar output seeded with 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<T>> {
        let dims = self.nodes[output.0].dims.clone();
        self.backward(output, &Tensor::full(&dims, T::one()))
    }

    /// Reverse sweep from `output` with the given seed; returns gradients of
    /// every `requires_grad` input (zero when unreachable).
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if !self.evaluated {
            return Err(GraphError::NotEvaluated);
        }
        if seed.dims() != self.nodes[output.0].dims.as_slice() {
            return Err(GraphError::ShapeMismatch {
                node: output.0,
                op: "seed",
                expected: self.nodes[output.0].dims.clone(),
                actual: seed.dims().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Input { .. } = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (name, &i) in &self.inputs {
            if let Op::Input { requires_grad: true, .. } = self.nodes[i].op {
                let dims = self.nodes[i].dims.clone();
                let data =
                    grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| vec![T::zero(); dims.iter().product()]);
                out.insert(name.clone(), Tensor::new(dims, data)?);
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let dims = &node.dims;
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, delta: Vec<T>| accumulate(grads, v.0, delta);
        match &node.op {
            Op::Input { .. } | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if wants(a) {
                    acc(*a, self.unbroadcast(g, dims, *a, |gv, _| gv));
                }
                if wants(b) {
                    acc(*b, self.unbroadcast(g, dims, *b, |gv, _| gv * sign));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    acc(*a, self.unbroadcast_with(g, dims, *a, *b));
                }
                if wants(b) {
                    acc(*b, self.unbroadcast_with(g, dims, *b, *a));
                }
            }
            Op::Scale(x, s) => {
                let s = T::c(*s);
                acc(*x, g.iter().map(|&v| v * s).collect());
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (batch, m, k, n) = matmul_sizes(ta.dims(), tb.dims());
                if wants(a) {
                    // dA = dC · Bᵀ
                    let bt = transpose_batched(tb.data(), batch, k, n);
                    let mut da = vec![T::zero(); ta.len()];
                    for p in 0..batch {
                        gemm_acc(
                            &g[p * m * n..(p + 1) * m * n],
                            &bt[p * n * k..(p + 1) * n * k],
                            &mut da[p * m * k..(p + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    acc(*a, da);
                }
                if wants(b) {
                    // dB = Aᵀ · dC
                    let at = transpose_batched(ta.data(), batch, m, k);
                    let mut db = vec![T::zero(); tb.len()];
                    for p in 0..batch {
                        gemm_acc(
                            &at[p * k * m..(p + 1) * k * m],
                            &g[p * m * n..(p + 1) * m * n],
                            &mut db[p * k * n..(p + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    acc(*b, db);
                }
            }
            Op::Transpose(x) => {
                let r = dims.len();
                let (rows, cols) = (dims[r - 2], dims[r - 1]);
                let batch = g.len() / (rows * cols);
                acc(*x, transpose_batched(g, batch, rows, cols));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Concat { parts, axis } => {
                let outer: usize = dims[..*axis].iter().product();
                let inner: usize = dims[axis + 1..].iter().product();
                let mut offset = 0;
                let total = dims[*axis] * inner;
                for p in parts {
                    let chunk = self.nodes[p.0].dims[*axis] * inner;
                    if wants(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&g[base..base + chunk]);
                        }
                        acc(*p, d);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = &self.nodes[x.0].dims;
                let outer: usize = dims[..*axis].iter().product();
                let inner: usize = dims[axis + 1..].iter().product();
                let src_chunk = src[*axis] * inner;
                let len = dims[*axis] * inner;
                let mut d = vec![T::zero(); src.iter().product()];
                for o in 0..outer {
                    let base = o * src_chunk + start * inner;
                    d[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                acc(*x, d);
            }
            Op::Exp(x) => {
                let y = self.val(Var(i)).data();
                acc(*x, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
            }
            Op::Log(x) => {
                let xv = self.val(*x).data();
                acc(*x, g.iter().zip(xv).map(|(&gv, &v)| gv / v).collect());
            }
            Op::Gelu(x) => {
                let xv = self.val(*x).data();
                acc(*x, g.iter().zip(xv).map(|(&gv, &v)| gv * gelu_grad(v)).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.val(*x).data();
                let (lo, hi) = (T::c(*lo), T::c(*hi));
                let d = g.iter().zip(xv).map(|(&gv, &v)| if v >= lo && v <= hi { gv } else { T::zero() }).collect();
                acc(*x, d);
            }
            Op::SumLast(x) | Op::MeanLast(x) => {
                let d = *self.nodes[x.0].dims.last().unwrap();
                let f = if matches!(node.op, Op::MeanLast(_)) { T::one() / T::c(d as f64) } else { T::one() };
                let out = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * f, d)).collect();
                acc(*x, out);
            }
            Op::MaxLast(x) => {
                let d = *self.nodes[x.0].dims.last().unwrap();
                let Aux::Argmax(arg) = &node.aux else { unreachable!() };
                let mut out = vec![T::zero(); g.len() * d];
                for (r, (&gv, &j)) in g.iter().zip(arg).enumerate() {
                    out[r * d + j] = gv;
                }
                acc(*x, out);
            }
            Op::SumAll(x) => {
                let n: usize = self.nodes[x.0].dims.iter().product();
                acc(*x, vec![g[0]; n]);
            }
            Op::Softmax(x) => {
                let y = self.val(Var(i));
                let d = y.last_dim();
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.rows().zip(g.chunks_exact(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                acc(*x, out);
            }
            Op::LayerNorm { x, gain, bias, .. } => {
                let Aux::RowStats { mean, rstd } = &node.aux else { unreachable!() };
                let xv = self.val(*x);
                let gv = self.val(*gain).data();
                let d = xv.last_dim();
                let n = T::c(d as f64);
                let mut dx = Vec::with_capacity(xv.len());
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (r, (xr, gr)) in xv.rows().zip(g.chunks_exact(d)).enumerate() {
                    let xhat: Vec<T> = xr.iter().map(|&v| (v - mean[r]) * rstd[r]).collect();
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        dx.push(rstd[r] * (dxh - sum_dxhat / n - xhat[j] * sum_dxhat_xhat / n));
                    }
                }
                if wants(x) {
                    acc(*x, dx);
                }
                if wants(gain) {
                    acc(*gain, dgain);
                }
                if wants(bias) {
                    acc(*bias, dbias);
                }
            }
            Op::L2Normalize { x, eps } => {
                let Aux::RowNorms(norms) = &node.aux else { unreachable!() };
                let y = self.val(Var(i));
                let d = y.last_dim();
                let eps = T::c(*eps);
                let mut out = Vec::with_capacity(y.len());
                for (r, (yr, gr)) in y.rows().zip(g.chunks_exact(d)).enumerate() {
                    if norms[r] > eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norms[r]));
                    } else {
                        out.extend(gr.iter().map(|&gv| gv / eps));
                    }
                }
                acc(*x, out);
            }
        }
    }

    /// Sums `g` (shaped `out`) down to the dims of `target`, mapping each
    /// element through `f(g, index into target)`.
    fn unbroadcast(&self, g: &[T], out: &[usize], target: Var, f: impl Fn(T, usize) -> T) -> Vec<T> {
        let td = &self.nodes[target.0].dims;
        if td.as_slice() == out {
            return g.iter().enumerate().map(|(i, &v)| f(v, i)).collect();
        }
        let st = aligned_strides(td, out);
        let mut res = vec![T::zero(); td.iter().product()];
        broadcast_for_each(out, &st, &st, |o, it, _| res[it] += f(g[o], it));
        res
    }

    /// Gradient of a broadcast product w.r.t. `target`, the other factor being `other`.
    fn unbroadcast_with(&self, g: &[T], out: &[usize], target: Var, other: Var) -> Vec<T> {
        let td = &self.nodes[target.0].dims;
        let ov = self.val(other);
        if td.as_slice() == out && ov.dims() == out {
            return g.iter().zip(ov.data()).map(|(&a, &b)| a * b).collect();
        }
        let st = aligned_strides(td, out);
        let so = aligned_strides(ov.dims(), out);
        let od = ov.data();
        let mut res = vec![T::zero(); td.iter().product()];
        broadcast_for_each(out, &st, &so, |o, it, io| res[it] += g[o] * od[io]);
        res
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, delta: Vec<T>) {
    match &mut grads[i] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn matmul_sizes(da: &[usize], db: &[usize]) -> (usize, usize, usize, usize) {
    match da.len() {
        2 => (1, da[0], da[1], db[1]),
        _ => (da[0], da[1], da[2], db[2]),
    }
}

fn matmul_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (batch, m, k, n) = matmul_sizes(a.dims(), b.dims());
    let mut out = vec![T::zero(); batch * m * n];
    for p in 0..batch {
        gemm_acc(
            &a.data()[p * m * k..(p + 1) * m * k],
            &b.data()[p * k * n..(p + 1) * k * n],
            &mut out[p * m * n..(p + 1) * m * n],
            m,
            k,
            n,
        );
    }
    out
}

#[cfg(test)]
mod tests;
