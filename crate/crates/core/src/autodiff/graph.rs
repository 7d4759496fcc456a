//! Define-by-run tape.
//!
//! Every op evaluates eagerly and records itself; [`Graph::backward`]
//! replays the tape in reverse. Parameters are borrowed from a
//! [`ParamStore`] for the lifetime of the graph, so the store can only be
//! mutated (by an optimizer) once the graph is dropped.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, gemm_f32, GemmFn, Tensor, NORM_FLOOR};
use crate::error::{Error, Result};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

static EMPTY_STORE: ParamStore = ParamStore::empty();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Linear(NodeId, NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Clamp {
        x: NodeId,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    ConcatCols(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    GatherRows {
        x: NodeId,
        index: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    SumCols(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    grad: bool,
}

/// Arithmetic used for matrix products. Every other op is always `f64`.
///
/// `Reduced` forms products in `f32`, which roughly halves training cost.
/// Finite-difference checks need `Full`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Full,
    Reduced,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Full => "f64",
            Precision::Reduced => "f32",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::Full),
            "f32" => Ok(Precision::Reduced),
            other => Err(Error::invalid(format!("unknown matmul precision {other:?} (expected f32 or f64)"))),
        }
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    trainable: Vec<bool>,
    param_nodes: HashMap<ParamId, NodeId>,
    nodes: Vec<Node<'a>>,
    precision: Precision,
}

/// Result of a reverse sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    variables: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn variable(&self, id: NodeId) -> Option<&Tensor> {
        self.variables.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Add `t` to the gradient of `id`.
    pub fn insert_param(&mut self, id: ParamId, t: Tensor) {
        accumulate(&mut self.params, id, t);
    }

    /// Merge another sweep's gradients into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (k, v) in other.params {
            accumulate(&mut self.params, k, v);
        }
    }
}

fn same_dims(op: &'static str, node: usize, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (da, db) = (a.dims2(), b.dims2());
    if da != db {
        return Err(Error::Shape {
            op,
            node,
            detail: format!("operands {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(da)
}

impl<'a> Graph<'a> {
    /// A graph over `store` with every parameter treated as a constant.
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            trainable: vec![false; store.len()],
            param_nodes: HashMap::new(),
            nodes: Vec::new(),
            precision: Precision::Full,
        }
    }

    /// Set the precision of matrix products.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    fn gemm_fn(&self) -> GemmFn {
        match self.precision {
            Precision::Full => gemm,
            Precision::Reduced => gemm_f32,
        }
    }

    /// A graph over `store` in which `trainable` parameters receive gradients.
    pub fn with_trainable(store: &'a ParamStore, trainable: &[ParamId]) -> Self {
        let mut g = Graph::new(store);
        for id in trainable {
            g.trainable[id.0] = true;
        }
        g
    }

    /// A graph with no parameter store, for free-standing computations.
    pub fn standalone() -> Graph<'static> {
        Graph::new(&EMPTY_STORE)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let grad = inputs.iter().any(|i| self.nodes[i.0].grad);
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFiniteValue {
                op: op_name(&op),
                node: id,
            });
        }
        Ok(self.push(Cow::Owned(value), op, grad))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Constant, false)
    }

    /// A free leaf that receives a gradient (reported under its node id).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Variable, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let store = self.store;
        let grad = self.trainable[id.0];
        let n = self.push(Cow::Borrowed(store.get(id)), Op::Param(id), grad);
        self.param_nodes.insert(id, n);
        n
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.value(a).dims2();
        let (k2, m) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                node: self.nodes.len(),
                detail: format!(
                    "{:?} x {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let mut out = vec![0.0; n * m];
        (self.gemm_fn())(
            n,
            k,
            m,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (m, 1),
            0.0,
            &mut out,
        );
        self.push_owned(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b])
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.value(x).dims2();
        let (k2, m) = self.value(w).dims2();
        let bv = self.value(b);
        if k != k2 || bv.len() != m || bv.dims2().0 != 1 {
            return Err(Error::Shape {
                op: "linear",
                node: self.nodes.len(),
                detail: format!(
                    "{:?} x {:?} + {:?}",
                    self.value(x).shape(),
                    self.value(w).shape(),
                    bv.shape()
                ),
            });
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        (self.gemm_fn())(
            n,
            k,
            m,
            self.value(x).data(),
            (k, 1),
            self.value(w).data(),
            (m, 1),
            1.0,
            &mut out,
        );
        self.push_owned(Tensor::from_parts(vec![n, m], out), Op::Linear(x, w, b), &[x, w, b])
    }

    fn row_broadcast(
        &mut self,
        x: NodeId,
        row: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (n, c) = self.value(x).dims2();
        let (rr, rc) = self.value(row).dims2();
        if rr != 1 || rc != c {
            return Err(Error::Shape {
                op: name,
                node: self.nodes.len(),
                detail: format!(
                    "cannot broadcast {:?} over rows of {:?}",
                    self.value(row).shape(),
                    self.value(x).shape()
                ),
            });
        }
        let xv = self.value(x).data();
        let rv = self.value(row).data();
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            out.extend(xv[i * c..(i + 1) * c].iter().zip(rv).map(|(&a, &b)| f(a, b)));
        }
        Ok(Tensor::from_parts(vec![n, c], out))
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let t = self.row_broadcast(x, bias, "add_row", |a, b| a + b)?;
        self.push_owned(t, Op::AddRow(x, bias), &[x, bias])
    }

    /// `x * gain` with `gain` broadcast over rows.
    pub fn mul_row(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let t = self.row_broadcast(x, gain, "mul_row", |a, b| a * b)?;
        self.push_owned(t, Op::MulRow(x, gain), &[x, gain])
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (n, c) = same_dims(name, self.nodes.len(), self.value(a), self.value(b))?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(vec![n, c], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push_owned(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push_owned(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push_owned(t, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary(a, b, "minimum", f64::min)?;
        self.push_owned(t, Op::Minimum(a, b), &[a, b])
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let (n, c) = self.value(x).dims2();
        Tensor::from_parts(vec![n, c], self.value(x).data().iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let t = self.unary(x, |v| v * factor);
        self.push_owned(t, Op::Scale(x, factor), &[x])
    }

    pub fn offset(&mut self, x: NodeId, shift: f64) -> Result<NodeId> {
        let t = self.unary(x, |v| v + shift);
        self.push_owned(t, Op::Offset(x), &[x])
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.unary(x, |v| v.max(0.0));
        self.push_owned(t, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.unary(x, f64::tanh);
        self.push_owned(t, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.unary(x, f64::exp);
        self.push_owned(t, Op::Exp(x), &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.unary(x, |v| v * v);
        self.push_owned(t, Op::Square(x), &[x])
    }

    /// Clamp every element into `[lo, hi]`.
    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.clamp_cols(x, &[lo], &[hi])
    }

    /// Per-column clamp; bounds of length 1 apply to every column.
    pub fn clamp_cols(&mut self, x: NodeId, lo: &[f64], hi: &[f64]) -> Result<NodeId> {
        let (n, c) = self.value(x).dims2();
        let ok = |b: &[f64]| b.len() == 1 || b.len() == c;
        if !ok(lo) || !ok(hi) {
            return Err(Error::Shape {
                op: "clamp_cols",
                node: self.nodes.len(),
                detail: format!("bounds of length {}/{} for {c} columns", lo.len(), hi.len()),
            });
        }
        let bound = |b: &[f64], j: usize| if b.len() == 1 { b[0] } else { b[j] };
        let xv = self.value(x).data();
        let out = (0..n * c)
            .map(|i| xv[i].clamp(bound(lo, i % c), bound(hi, i % c)))
            .collect();
        let t = Tensor::from_parts(vec![n, c], out);
        self.push_owned(
            t,
            Op::Clamp {
                x,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ca) = self.value(a).dims2();
        let (nb, cb) = self.value(b).dims2();
        if n != nb {
            return Err(Error::Shape {
                op: "concat_cols",
                node: self.nodes.len(),
                detail: format!("{} rows vs {nb} rows", n),
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        self.push_owned(
            Tensor::from_parts(vec![n, ca + cb], out),
            Op::ConcatCols(a, b),
            &[a, b],
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (n, c) = self.value(x).dims2();
        if start >= end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                node: self.nodes.len(),
                detail: format!("range {start}..{end} of {c} columns"),
            });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        self.push_owned(
            Tensor::from_parts(vec![n, end - start], out),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    /// Row lookup `x[index[i], :]`; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let (n, c) = self.value(x).dims2();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Shape {
                op: "gather_rows",
                node: self.nodes.len(),
                detail: format!("row {bad} out of range for {n} rows"),
            });
        }
        if index.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                node: self.nodes.len(),
                detail: "empty index".into(),
            });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &r in index {
            out.extend_from_slice(&xv[r * c..(r + 1) * c]);
        }
        self.push_owned(
            Tensor::from_parts(vec![index.len(), c], out),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c) = self.value(x).dims2();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|v| (v - mean) * s));
            inv_std.push(s);
        }
        self.push_owned(
            Tensor::from_parts(vec![n, c], out),
            Op::LayerNorm { x, inv_std },
            &[x],
        )
    }

    /// Divide each row by its norm; rows below the norm floor pass through.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c) = self.value(x).dims2();
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            norms.push(super::tensor::l2_normalize_row(&mut out[i * c..(i + 1) * c]));
        }
        self.push_owned(
            Tensor::from_parts(vec![n, c], out),
            Op::L2NormalizeRows { x, norms },
            &[x],
        )
    }

    /// Row sums, `[n, c] -> [n, 1]`.
    pub fn sum_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c) = self.value(x).dims2();
        let xv = self.value(x).data();
        let out = (0..n).map(|i| xv[i * c..(i + 1) * c].iter().sum()).collect();
        self.push_owned(Tensor::from_parts(vec![n, 1], out), Op::SumCols(x), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push_owned(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Row-wise inner product, `[n, c] x [n, c] -> [n, 1]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum_cols(p)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every trainable parameter that appears in the graph gets an entry,
    /// zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, node, dy, &mut grads, &mut out);
        }

        for (&pid, &nid) in &self.param_nodes {
            if self.nodes[nid.0].grad && !out.params.contains_key(&pid) {
                out.params
                    .insert(pid, Tensor::zeros(self.store.get(pid).shape()));
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Variable) && !out.variables.contains_key(&NodeId(i)) {
                out.variables
                    .insert(NodeId(i), Tensor::zeros(n.value.shape()));
            }
        }
        Ok(out)
    }

    fn propagate(
        &self,
        idx: usize,
        node: &Node<'_>,
        dy: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let nodes = &self.nodes;
        let val = |id: NodeId| -> &Tensor { &nodes[id.0].value };
        let wants = |id: NodeId| nodes[id.0].grad;
        let gemm = self.gemm_fn();
        // Accumulate `f(i)` into the gradient buffer of `id`.
        fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node<'_>], id: NodeId, f: impl Fn(usize) -> f64) {
            if !nodes[id.0].grad {
                return;
            }
            match &mut grads[id.0] {
                Some(g) => g.iter_mut().enumerate().for_each(|(i, gi)| *gi += f(i)),
                empty => *empty = Some((0..nodes[id.0].value.len()).map(f).collect()),
            }
        }
        // Accumulate `op(a) op(b)` into the gradient buffer of `id`.
        #[allow(clippy::too_many_arguments)]
        fn product_into(
            gemm: GemmFn,
            grads: &mut [Option<Vec<f64>>],
            id: NodeId,
            (m, k, n): (usize, usize, usize),
            a: &[f64],
            sa: (usize, usize),
            b: &[f64],
            sb: (usize, usize),
        ) {
            match &mut grads[id.0] {
                Some(g) => gemm(m, k, n, a, sa, b, sb, 1.0, g),
                empty => {
                    let mut g = vec![0.0; m * n];
                    gemm(m, k, n, a, sa, b, sb, 0.0, &mut g);
                    *empty = Some(g);
                }
            }
        }

        match &node.op {
            Op::Constant => {}
            Op::Variable => {
                let t = Tensor::from_parts(node.value.shape().to_vec(), dy);
                accumulate(&mut out.variables, NodeId(idx), t);
            }
            Op::Param(pid) => {
                let t = Tensor::from_parts(node.value.shape().to_vec(), dy);
                accumulate(&mut out.params, *pid, t);
            }
            Op::MatMul(a, b) => {
                let (n, k) = val(*a).dims2();
                let m = val(*b).cols();
                if wants(*a) {
                    product_into(gemm, grads, *a, (n, m, k), &dy, (m, 1), val(*b).data(), (1, m));
                }
                if wants(*b) {
                    product_into(gemm, grads, *b, (k, n, m), val(*a).data(), (1, k), &dy, (m, 1));
                }
            }
            Op::Linear(x, w, b) => {
                let (n, k) = val(*x).dims2();
                let m = val(*w).cols();
                if wants(*x) {
                    product_into(gemm, grads, *x, (n, m, k), &dy, (m, 1), val(*w).data(), (1, m));
                }
                if wants(*w) {
                    product_into(gemm, grads, *w, (k, n, m), val(*x).data(), (1, k), &dy, (m, 1));
                }
                if wants(*b) {
                    let g = slot(grads, nodes, *b);
                    for row in dy.chunks_exact(m) {
                        for (gi, d) in g.iter_mut().zip(row) {
                            *gi += d;
                        }
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let c = val(*x).cols();
                add_into(grads, nodes, *x, |i| dy[i]);
                if wants(*bias) {
                    let g = slot(grads, nodes, *bias);
                    for (i, d) in dy.iter().enumerate() {
                        g[i % c] += d;
                    }
                }
            }
            Op::MulRow(x, gain) => {
                let c = val(*x).cols();
                let (xv, gv) = (val(*x).data(), val(*gain).data());
                add_into(grads, nodes, *x, |i| dy[i] * gv[i % c]);
                if wants(*gain) {
                    let g = slot(grads, nodes, *gain);
                    for (i, d) in dy.iter().enumerate() {
                        g[i % c] += d * xv[i];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(grads, nodes, *a, |i| dy[i]);
                add_into(grads, nodes, *b, |i| dy[i]);
            }
            Op::Sub(a, b) => {
                add_into(grads, nodes, *a, |i| dy[i]);
                add_into(grads, nodes, *b, |i| -dy[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                add_into(grads, nodes, *a, |i| dy[i] * bv[i]);
                add_into(grads, nodes, *b, |i| dy[i] * av[i]);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                add_into(grads, nodes, *a, |i| if av[i] <= bv[i] { dy[i] } else { 0.0 });
                add_into(grads, nodes, *b, |i| if av[i] <= bv[i] { 0.0 } else { dy[i] });
            }
            Op::Scale(x, f) => add_into(grads, nodes, *x, |i| dy[i] * f),
            Op::Offset(x) => add_into(grads, nodes, *x, |i| dy[i]),
            Op::Relu(x) => {
                let xv = val(*x).data();
                add_into(grads, nodes, *x, |i| if xv[i] > 0.0 { dy[i] } else { 0.0 });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                add_into(grads, nodes, *x, |i| dy[i] * (1.0 - y[i] * y[i]));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                add_into(grads, nodes, *x, |i| dy[i] * y[i]);
            }
            Op::Square(x) => {
                let xv = val(*x).data();
                add_into(grads, nodes, *x, |i| 2.0 * xv[i] * dy[i]);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x).data();
                let c = val(*x).cols();
                let bound = |b: &[f64], j: usize| if b.len() == 1 { b[0] } else { b[j] };
                add_into(grads, nodes, *x, |i| {
                    let v = xv[i];
                    if v >= bound(lo, i % c) && v <= bound(hi, i % c) {
                        dy[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).cols(), val(*b).cols());
                let w = ca + cb;
                add_into(grads, nodes, *a, |i| dy[(i / ca) * w + i % ca]);
                add_into(grads, nodes, *b, |i| dy[(i / cb) * w + ca + i % cb]);
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let w = node.value.cols();
                let s = *start;
                add_into(grads, nodes, *x, |i| {
                    let (r, j) = (i / c, i % c);
                    if j >= s && j < s + w {
                        dy[r * w + j - s]
                    } else {
                        0.0
                    }
                });
            }
            Op::GatherRows { x, index } => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let g = slot(grads, nodes, *x);
                    for (i, &r) in index.iter().enumerate() {
                        for j in 0..c {
                            g[r * c + j] += dy[i * c + j];
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if wants(*x) {
                    let c = node.value.cols();
                    let y = node.value.data();
                    let g = slot(grads, nodes, *x);
                    for (r, s) in inv_std.iter().enumerate() {
                        let d = &dy[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let mean_d = d.iter().sum::<f64>() / c as f64;
                        let mean_dy = d.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            g[r * c + j] += s * (d[j] - mean_d - yr[j] * mean_dy);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if wants(*x) {
                    let c = node.value.cols();
                    let y = node.value.data();
                    let g = slot(grads, nodes, *x);
                    for (r, &nrm) in norms.iter().enumerate() {
                        let d = &dy[r * c..(r + 1) * c];
                        if nrm < NORM_FLOOR {
                            for j in 0..c {
                                g[r * c + j] += d[j];
                            }
                            continue;
                        }
                        let yr = &y[r * c..(r + 1) * c];
                        let proj = d.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                        for j in 0..c {
                            g[r * c + j] += (d[j] - yr[j] * proj) / nrm;
                        }
                    }
                }
            }
            Op::SumCols(x) => {
                let c = val(*x).cols();
                add_into(grads, nodes, *x, |i| dy[i / c]);
            }
            Op::Sum(x) => add_into(grads, nodes, *x, |_| dy[0]),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                add_into(grads, nodes, *x, |_| dy[0] / n);
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node<'_>], id: NodeId) -> &'g mut Vec<f64> {
    let len = nodes[id.0].value.len();
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate<K: Ord>(map: &mut BTreeMap<K, Tensor>, key: K, t: Tensor) {
    match map.get_mut(&key) {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(t.data())
            .for_each(|(a, b)| *a += b),
        None => {
            map.insert(key, t);
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Variable => "variable",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Linear(..) => "linear",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Minimum(..) => "minimum",
        Op::Scale(..) => "scale",
        Op::Offset(..) => "offset",
        Op::Relu(_) => "relu",
        Op::Tanh(_) => "tanh",
        Op::Exp(_) => "exp",
        Op::Square(_) => "square",
        Op::Clamp { .. } => "clamp_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        Op::SumCols(_) => "sum_cols",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_tanh_reference_values() {
        let mut g = Graph::standalone();
        let x = g.constant(Tensor::row(&[-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let t = g.tanh(z).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::standalone();
        let x = g.constant(Tensor::row(&[5.0; 4]));
        let y = g.layer_norm(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::standalone();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.variable(x).unwrap().item(), 6.0);
    }

    #[test]
    fn disconnected_parameter_gets_exact_zeros() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::row(&[1.0, 2.0])).unwrap();
        let b = store.insert("b", Tensor::row(&[3.0, 4.0])).unwrap();
        let mut g = Graph::with_trainable(&store, &[a, b]);
        let an = g.param(a);
        let _bn = g.param(b);
        let loss = g.sum(an).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.param(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_parameter_has_no_gradient_entry() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::row(&[1.0])).unwrap();
        let mut g = Graph::new(&store);
        let an = g.param(a);
        let loss = g.sum(an).unwrap();
        assert!(g.backward(loss).unwrap().param(a).is_none());
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let mut g = Graph::standalone();
        let x = g.variable(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::standalone();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        match g.matmul(a, b) {
            Err(Error::Shape { op, node, .. }) => {
                assert_eq!(op, "matmul");
                assert_eq!(node, 2);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(g.add_row(a, b).is_err());
        assert!(g.slice_cols(a, 2, 4).is_err());
        assert!(g.gather_rows(a, &[2]).is_err());
    }

    #[test]
    fn minimum_ties_route_to_first_operand() {
        let mut g = Graph::standalone();
        let a = g.variable(Tensor::row(&[1.0, 0.0]));
        let b = g.variable(Tensor::row(&[1.0, -1.0]));
        let m = g.minimum(a, b).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.variable(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.variable(b).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn clip_blocks_gradient_outside_range() {
        let mut g = Graph::standalone();
        let x = g.variable(Tensor::row(&[100.0, 0.5, -20.0]));
        let c = g.clip(x, -10.0, 10.0).unwrap();
        assert_eq!(g.value(c).data(), &[10.0, 0.5, -10.0]);
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.variable(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut store = ParamStore::new();
            let w = store
                .insert("w", Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.7, -0.5, 0.25]).unwrap())
                .unwrap();
            let mut g = Graph::with_trainable(&store, &[w]);
            let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
            let wn = g.param(w);
            let y = g.matmul(x, wn).unwrap();
            let t = g.tanh(y).unwrap();
            let l = g.layer_norm(t).unwrap();
            let loss = g.mean(l).unwrap();
            let sq = g.square(loss).unwrap();
            let grads = g.backward(sq).unwrap();
            (g.value(sq).item().to_bits(), grads.param(w).unwrap().data().to_vec())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a, b);
        assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
