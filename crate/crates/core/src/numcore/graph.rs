//! Define-then-run compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order: every constructor takes the ids
//! of nodes that already exist, so the node list is always a valid
//! evaluation order. Shapes are checked at [`Graph::forward`] time, once the
//! named inputs are bound.

use std::collections::{BTreeMap, HashMap};

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Source of named input tensors for [`Graph::forward`].
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Bindings for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl<B: Bindings + ?Sized> Bindings for &B {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        (**self).lookup(name)
    }
}

/// Looks names up in each source in turn.
pub struct Chain<'a>(pub Vec<&'a dyn Bindings>);

impl Bindings for Chain<'_> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.iter().find_map(|b| b.lookup(name))
    }
}

/// Named gradients returned by [`Graph::backward`].
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Input { name: String, grad: bool },
    Const(Tensor),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    LayerNorm { x: NodeId, eps: f64 },
    SoftmaxRow(NodeId),
    LogSoftmaxRow(NodeId),
    L2NormalizeRow(NodeId),
    Mean { x: NodeId, axis: Option<usize> },
    Sum { x: NodeId, axis: Option<usize> },
    SliceCols { x: NodeId, start: usize, len: usize },
    GatherRows { x: NodeId, rows: Vec<usize> },
    Reshape { x: NodeId, dims: Vec<usize> },
    BceWithLogits { x: NodeId, target: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRow(_) => "softmax_row",
            Op::LogSoftmaxRow(_) => "log_softmax_row",
            Op::L2NormalizeRow(_) => "l2_normalize_row",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape { .. } => "reshape",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::SoftmaxRow(x)
            | Op::LogSoftmaxRow(x)
            | Op::L2NormalizeRow(x) => vec![*x],
            Op::LayerNorm { x, .. }
            | Op::Mean { x, .. }
            | Op::Sum { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Reshape { x, .. }
            | Op::BceWithLogits { x, .. } => vec![*x],
        }
    }
}

/// A scalar-output computation over named tensor inputs.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    inputs: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
    forwarded: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for p in op.parents() {
            assert!(p.0 < self.ops.len(), "parent id from a different graph");
        }
        self.ops.push(op);
        self.values.push(None);
        self.forwarded = false;
        NodeId(self.ops.len() - 1)
    }

    /// Differentiable named input. Declaring the same name twice returns the
    /// existing node.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.named_input(name, true)
    }

    /// Named input that never receives a gradient (data, frozen weights).
    pub fn input_frozen(&mut self, name: &str) -> NodeId {
        self.named_input(name, false)
    }

    fn named_input(&mut self, name: &str, grad: bool) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input {
            name: name.to_string(),
            grad,
        });
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    /// Elementwise product; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(x, c))
    }

    /// Matrix product of rank-2 operands, or batched over the first axis of
    /// rank-3 operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, ta: false, tb: false })
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, ta: false, tb: true })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { x, eps })
    }

    pub fn softmax_row(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SoftmaxRow(x))
    }

    pub fn log_softmax_row(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSoftmaxRow(x))
    }

    pub fn l2_normalize_row(&mut self, x: NodeId) -> NodeId {
        self.push(Op::L2NormalizeRow(x))
    }

    /// Mean over one axis, or over everything when `axis` is `None`.
    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> NodeId {
        self.push(Op::Mean { x, axis })
    }

    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> NodeId {
        self.push(Op::Sum { x, axis })
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { x, start, len })
    }

    /// Selects (possibly repeated) rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::GatherRows { x, rows })
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> NodeId {
        self.push(Op::Reshape {
            x,
            dims: dims.to_vec(),
        })
    }

    /// Elementwise `−[t·log σ(x) + (1−t)·log(1−σ(x))]` in the stable form
    /// `softplus(x) − t·x`.
    pub fn bce_with_logits(&mut self, x: NodeId, target: Tensor) -> NodeId {
        self.push(Op::BceWithLogits { x, target })
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Names of the differentiable inputs.
    pub fn grad_inputs(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().filter_map(|(name, id)| match &self.ops[id.0] {
            Op::Input { grad: true, .. } => Some(name.as_str()),
            _ => None,
        })
    }

    /// Value cached by the last forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    fn node_label(&self, id: usize) -> String {
        match &self.ops[id] {
            Op::Input { name, .. } => format!("node #{id} (input `{name}`)"),
            op => format!("node #{id} ({})", op.name()),
        }
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("parent evaluated")
    }

    /// Evaluates every node and returns the scalar output.
    pub fn forward(&mut self, inputs: &dyn Bindings) -> Result<f64> {
        let out = self
            .output
            .ok_or_else(|| Error::Usage("graph has no output node".into()))?;
        self.evaluate(inputs)?;
        let v = self.val(out).clone();
        if v.len() != 1 {
            return Err(Error::shape(
                self.node_label(out.0),
                format!("output must be scalar, has dims {:?}", v.dims()),
            ));
        }
        self.forwarded = true;
        Ok(v.item())
    }

    /// Evaluates every node without requiring a scalar output; values are
    /// then available through [`Graph::value`]. Backward stays unavailable.
    pub fn evaluate(&mut self, inputs: &dyn Bindings) -> Result<()> {
        self.forwarded = false;
        for i in 0..self.ops.len() {
            let v = self
                .eval(i, inputs)
                .map_err(|e| match e {
                    Error::Shape { detail, .. } => Error::Shape {
                        node: self.node_label(i),
                        detail,
                    },
                    other => other,
                })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    node: self.node_label(i),
                });
            }
            self.values[i] = Some(v);
        }
        Ok(())
    }

    fn eval(&self, i: usize, inputs: &dyn Bindings) -> Result<Tensor> {
        let op = &self.ops[i];
        Ok(match op {
            Op::Input { name, .. } => inputs
                .lookup(name)
                .cloned()
                .ok_or_else(|| Error::UnboundInput(name.clone()))?,
            Op::Const(t) => t.clone(),
            Op::Add(a, b) => broadcast_binary(self.val(*a), self.val(*b), |x, y| x + y)?,
            Op::Mul(a, b) => broadcast_binary(self.val(*a), self.val(*b), |x, y| x * y)?,
            Op::Scale(x, c) => map(self.val(*x), |v| v * c),
            Op::MatMul { a, b, ta, tb } => matmul_forward(self.val(*a), self.val(*b), *ta, *tb)?,
            Op::Transpose(x) => transpose_last2(self.val(*x))?,
            Op::Exp(x) => map(self.val(*x), f64::exp),
            Op::Log(x) => map(self.val(*x), f64::ln),
            Op::Sigmoid(x) => map(self.val(*x), sigmoid),
            Op::Relu(x) => map(self.val(*x), |v| v.max(0.0)),
            Op::LayerNorm { x, eps } => {
                let t = self.val(*x);
                let d = last_dim(t);
                let mut out = t.clone();
                for row in out.data_mut().chunks_mut(d) {
                    let (mean, rstd) = moments(row, *eps);
                    row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
                }
                out
            }
            Op::SoftmaxRow(x) => {
                let mut out = self.val(*x).clone();
                let d = last_dim(&out);
                out.data_mut().chunks_mut(d).for_each(softmax_in_place);
                out
            }
            Op::LogSoftmaxRow(x) => {
                let mut out = self.val(*x).clone();
                let d = last_dim(&out);
                for row in out.data_mut().chunks_mut(d) {
                    let lse = log_sum_exp(row);
                    row.iter_mut().for_each(|v| *v -= lse);
                }
                out
            }
            Op::L2NormalizeRow(x) => self.val(*x).row_normalized()?,
            Op::Mean { x, axis } => {
                let t = self.val(*x);
                let n = match axis {
                    Some(ax) => *t.dims().get(*ax).ok_or_else(|| bad_axis(t, *ax))?,
                    None => t.len(),
                };
                map(&reduce_sum(t, *axis)?, |v| v / n as f64)
            }
            Op::Sum { x, axis } => reduce_sum(self.val(*x), *axis)?,
            Op::SliceCols { x, start, len } => {
                let t = self.val(*x);
                let d = last_dim(t);
                if *len == 0 || start + len > d {
                    return Err(Error::shape("", format!("slice {start}+{len} of {d} columns")));
                }
                let data = t
                    .data()
                    .chunks(d)
                    .flat_map(|row| &row[*start..start + len])
                    .copied()
                    .collect();
                let mut dims = t.dims().to_vec();
                *dims.last_mut().unwrap() = *len;
                Tensor::from_parts(dims, data)
            }
            Op::GatherRows { x, rows } => {
                let t = self.val(*x);
                let (r, c) = t.shape2()?;
                if rows.is_empty() {
                    return Err(Error::shape("", "gather of zero rows"));
                }
                let mut data = Vec::with_capacity(rows.len() * c);
                for &idx in rows {
                    if idx >= r {
                        return Err(Error::shape("", format!("row {idx} out of {r}")));
                    }
                    data.extend_from_slice(t.row(idx));
                }
                Tensor::from_parts(vec![rows.len(), c], data)
            }
            Op::Reshape { x, dims } => self.val(*x).clone().reshaped(dims)?,
            Op::BceWithLogits { x, target } => {
                let t = self.val(*x);
                if t.dims() != target.dims() {
                    return Err(Error::shape(
                        "",
                        format!("logits {:?} vs targets {:?}", t.dims(), target.dims()),
                    ));
                }
                let data = t
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &y)| softplus(x) - y * x)
                    .collect();
                Tensor::from_parts(t.dims().to_vec(), data)
            }
        })
    }

    /// Gradient of the output with respect to every differentiable input.
    pub fn backward(&mut self) -> Result<Gradients> {
        if !self.forwarded {
            return Err(Error::Usage("backward called before forward".into()));
        }
        let out = self.output.expect("forwarded graph has an output");
        let n = self.ops.len();
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.ops[i] {
                Op::Input { grad, .. } => *grad,
                Op::Const(_) => false,
                op => op.parents().iter().any(|p| needs[p.0]),
            };
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[out.0] = Some(Tensor::filled(self.val(out).dims(), 1.0));
        for i in (0..=out.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(i, &dy, &needs, &mut grads)?;
            grads[i] = Some(dy);
        }
        let mut result = Gradients::new();
        for (name, id) in &self.inputs {
            if let Op::Input { grad: true, .. } = self.ops[id.0] {
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.val(*id).dims()));
                result.insert(name.clone(), g);
            }
        }
        Ok(result)
    }

    fn backprop(
        &self,
        i: usize,
        dy: &Tensor,
        needs: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let y = self.values[i].as_ref().expect("forwarded");
        let mut acc = |id: NodeId, g: Tensor| {
            if !needs[id.0] {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(e, v)| *e += v),
                slot @ None => *slot = Some(g),
            }
        };
        match &self.ops[i] {
            Op::Input { .. } | Op::Const(_) => {}
            Op::Add(a, b) => {
                if needs[a.0] {
                    acc(*a, dy.clone());
                }
                if needs[b.0] {
                    acc(*b, fold_broadcast(dy, self.val(*b).dims()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if needs[a.0] {
                    acc(*a, broadcast_binary(dy, bv, |g, y| g * y)?);
                }
                if needs[b.0] {
                    let prod = Tensor::from_parts(
                        dy.dims().to_vec(),
                        dy.data().iter().zip(av.data()).map(|(g, x)| g * x).collect(),
                    );
                    acc(*b, fold_broadcast(&prod, bv.dims()));
                }
            }
            Op::Scale(x, c) => acc(*x, map(dy, |g| g * c)),
            Op::MatMul { a, b, ta, tb } => {
                let (ga, gb) = matmul_backward(
                    self.val(*a),
                    self.val(*b),
                    *ta,
                    *tb,
                    dy,
                    needs[a.0],
                    needs[b.0],
                );
                if let Some(g) = ga {
                    acc(*a, g);
                }
                if let Some(g) = gb {
                    acc(*b, g);
                }
            }
            Op::Transpose(x) => acc(*x, transpose_last2(dy)?),
            Op::Exp(x) => acc(*x, zip_map(dy, y, |g, e| g * e)),
            Op::Log(x) => acc(*x, zip_map(dy, self.val(*x), |g, v| g / v)),
            Op::Sigmoid(x) => acc(*x, zip_map(dy, y, |g, s| g * s * (1.0 - s))),
            Op::Relu(x) => acc(
                *x,
                zip_map(dy, self.val(*x), |g, v| if v > 0.0 { g } else { 0.0 }),
            ),
            Op::LayerNorm { x, eps } => {
                let xv = self.val(*x);
                let d = last_dim(xv);
                let mut gx = vec![0.0; xv.len()];
                for ((xr, yr), (gr, out)) in xv
                    .data()
                    .chunks(d)
                    .zip(y.data().chunks(d))
                    .zip(dy.data().chunks(d).zip(gx.chunks_mut(d)))
                {
                    let (_, rstd) = moments(xr, *eps);
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                    for k in 0..d {
                        out[k] = rstd * (gr[k] - mean_g - yr[k] * mean_gy);
                    }
                }
                acc(*x, Tensor::from_parts(xv.dims().to_vec(), gx))
            }
            Op::SoftmaxRow(x) => {
                let d = last_dim(y);
                let mut gx = vec![0.0; y.len()];
                for ((sr, gr), out) in y.data().chunks(d).zip(dy.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = sr.iter().zip(gr).map(|(s, g)| s * g).sum();
                    for k in 0..d {
                        out[k] = sr[k] * (gr[k] - dot);
                    }
                }
                acc(*x, Tensor::from_parts(y.dims().to_vec(), gx))
            }
            Op::LogSoftmaxRow(x) => {
                let d = last_dim(y);
                let mut gx = vec![0.0; y.len()];
                for ((lr, gr), out) in y.data().chunks(d).zip(dy.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let total: f64 = gr.iter().sum();
                    for k in 0..d {
                        out[k] = gr[k] - lr[k].exp() * total;
                    }
                }
                acc(*x, Tensor::from_parts(y.dims().to_vec(), gx))
            }
            Op::L2NormalizeRow(x) => {
                let xv = self.val(*x);
                let d = last_dim(y);
                let mut gx = vec![0.0; y.len()];
                for (((xr, yr), gr), out) in xv
                    .data()
                    .chunks(d)
                    .zip(y.data().chunks(d))
                    .zip(dy.data().chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for k in 0..d {
                        out[k] = (gr[k] - yr[k] * dot) / norm;
                    }
                }
                acc(*x, Tensor::from_parts(y.dims().to_vec(), gx))
            }
            Op::Mean { x, axis } => {
                let xv = self.val(*x);
                let n = match axis {
                    Some(ax) => xv.dims()[*ax],
                    None => xv.len(),
                };
                let g = expand_reduced(dy, xv.dims(), *axis);
                acc(*x, map(&g, |v| v / n as f64))
            }
            Op::Sum { x, axis } => acc(*x, expand_reduced(dy, self.val(*x).dims(), *axis)),
            Op::SliceCols { x, start, len } => {
                let xv = self.val(*x);
                let d = last_dim(xv);
                let mut gx = vec![0.0; xv.len()];
                for (row, gr) in gx.chunks_mut(d).zip(dy.data().chunks(*len)) {
                    row[*start..start + len].copy_from_slice(gr);
                }
                acc(*x, Tensor::from_parts(xv.dims().to_vec(), gx))
            }
            Op::GatherRows { x, rows } => {
                let xv = self.val(*x);
                let c = last_dim(xv);
                let mut gx = vec![0.0; xv.len()];
                for (&idx, gr) in rows.iter().zip(dy.data().chunks(c)) {
                    gx[idx * c..(idx + 1) * c]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(o, g)| *o += g);
                }
                acc(*x, Tensor::from_parts(xv.dims().to_vec(), gx))
            }
            Op::Reshape { x, .. } => {
                let dims = self.val(*x).dims().to_vec();
                acc(*x, dy.clone().reshaped(&dims)?)
            }
            Op::BceWithLogits { x, target } => acc(
                *x,
                Tensor::from_parts(
                    dy.dims().to_vec(),
                    dy.data()
                        .iter()
                        .zip(self.val(*x).data())
                        .zip(target.data())
                        .map(|((g, &x), &t)| g * (sigmoid(x) - t))
                        .collect(),
                ),
            ),
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eˣ)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn last_dim(t: &Tensor) -> usize {
    *t.dims().last().unwrap_or(&1)
}

fn bad_axis(t: &Tensor, ax: usize) -> Error {
    Error::shape("", format!("axis {ax} out of range for {:?}", t.dims()))
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.dims().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.dims().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// `b` must equal `a` in shape or match a trailing suffix of `a`'s dims.
fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (ad, bd) = (a.dims(), b.dims());
    let compatible = bd.len() <= ad.len() && ad[ad.len() - bd.len()..] == *bd;
    if !compatible {
        return Err(Error::shape("", format!("cannot broadcast {bd:?} onto {ad:?}")));
    }
    let bl = b.len();
    let data = a
        .data()
        .chunks(bl)
        .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
        .collect();
    Ok(Tensor::from_parts(ad.to_vec(), data))
}

/// Sums a broadcast gradient back down to `dims`.
fn fold_broadcast(g: &Tensor, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let mut out = vec![0.0; n];
    for chunk in g.data().chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    Tensor::from_parts(dims.to_vec(), out)
}

fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

fn reduce_sum(t: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => Ok(Tensor::scalar(t.data().iter().sum())),
        Some(ax) => {
            if ax >= t.rank() {
                return Err(bad_axis(t, ax));
            }
            let (outer, n, inner) = split_axis(t.dims(), ax);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &t.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                    out[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, v)| *a += v);
                }
            }
            let mut dims: Vec<usize> = t.dims().to_vec();
            dims.remove(ax);
            if dims.is_empty() {
                dims.push(1);
            }
            Ok(Tensor::from_parts(dims, out))
        }
    }
}

fn expand_reduced(g: &Tensor, dims: &[usize], axis: Option<usize>) -> Tensor {
    match axis {
        None => Tensor::filled(dims, g.item()),
        Some(ax) => {
            let (outer, n, inner) = split_axis(dims, ax);
            let mut out = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for k in 0..n {
                    out[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(src);
                }
            }
            Tensor::from_parts(dims.to_vec(), out)
        }
    }
}

fn transpose_last2(t: &Tensor) -> Result<Tensor> {
    let dims = t.dims();
    if dims.len() < 2 {
        return Err(Error::shape("", format!("transpose needs rank ≥ 2, got {dims:?}")));
    }
    let (r, c) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let batch = t.len() / (r * c);
    let mut out = vec![0.0; t.len()];
    for b in 0..batch {
        let src = &t.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut nd = dims.to_vec();
    let l = nd.len();
    nd.swap(l - 2, l - 1);
    Ok(Tensor::from_parts(nd, out))
}

/// Logical (rows, cols, row stride, col stride) of a possibly-transposed
/// matrix stored row-major as `r × c`.
fn logical(r: usize, c: usize, t: bool) -> (usize, usize, isize, isize) {
    if t {
        (c, r, 1, c as isize)
    } else {
        (r, c, c as isize, 1)
    }
}

struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_stride: usize,
    b_stride: usize,
    a_s: (isize, isize),
    b_s: (isize, isize),
    out_dims: Vec<usize>,
}

fn matmul_plan(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<MatMulPlan> {
    let (ad, bd) = (a.dims(), b.dims());
    let batch = match (ad.len(), bd.len()) {
        (2, 2) => 1,
        (3, 3) if ad[0] == bd[0] => ad[0],
        _ => return Err(Error::shape("", format!("matmul of {ad:?} and {bd:?}"))),
    };
    let (ar, ac) = (ad[ad.len() - 2], ad[ad.len() - 1]);
    let (br, bc) = (bd[bd.len() - 2], bd[bd.len() - 1]);
    let (m, k, a0, a1) = logical(ar, ac, ta);
    let (k2, n, b0, b1) = logical(br, bc, tb);
    if k != k2 {
        return Err(Error::shape(
            "",
            format!("inner dimensions differ: {ad:?}{} · {bd:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" }),
        ));
    }
    let out_dims = if ad.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
    Ok(MatMulPlan {
        batch,
        m,
        k,
        n,
        a_stride: ar * ac,
        b_stride: br * bc,
        a_s: (a0, a1),
        b_s: (b0, b1),
        out_dims,
    })
}

fn matmul_forward(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let p = matmul_plan(a, b, ta, tb)?;
    let mut out = vec![0.0; p.batch * p.m * p.n];
    for bi in 0..p.batch {
        gemm(
            p.m,
            p.k,
            p.n,
            &a.data()[bi * p.a_stride..(bi + 1) * p.a_stride],
            p.a_s,
            &b.data()[bi * p.b_stride..(bi + 1) * p.b_stride],
            p.b_s,
            &mut out[bi * p.m * p.n..(bi + 1) * p.m * p.n],
            (p.n as isize, 1),
            false,
        );
    }
    Ok(Tensor::from_parts(p.out_dims, out))
}

/// Gradients of `C = op(A)·op(B)`. Each parent gradient is written with the
/// same logical strides as the parent, so transposed operands need no copy.
fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    ta: bool,
    tb: bool,
    dc: &Tensor,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let p = matmul_plan(a, b, ta, tb).expect("validated in forward");
    let mut ga = want_a.then(|| vec![0.0; a.len()]);
    let mut gb = want_b.then(|| vec![0.0; b.len()]);
    for bi in 0..p.batch {
        let dcs = &dc.data()[bi * p.m * p.n..(bi + 1) * p.m * p.n];
        let a_sl = &a.data()[bi * p.a_stride..(bi + 1) * p.a_stride];
        let b_sl = &b.data()[bi * p.b_stride..(bi + 1) * p.b_stride];
        if let Some(ga) = ga.as_mut() {
            // dA' = dC · B'ᵀ
            gemm(
                p.m,
                p.n,
                p.k,
                dcs,
                (p.n as isize, 1),
                b_sl,
                (p.b_s.1, p.b_s.0),
                &mut ga[bi * p.a_stride..(bi + 1) * p.a_stride],
                p.a_s,
                true,
            );
        }
        if let Some(gb) = gb.as_mut() {
            // dB' = A'ᵀ · dC
            gemm(
                p.k,
                p.m,
                p.n,
                a_sl,
                (p.a_s.1, p.a_s.0),
                dcs,
                (p.n as isize, 1),
                &mut gb[bi * p.b_stride..(bi + 1) * p.b_stride],
                p.b_s,
                true,
            );
        }
    }
    (
        ga.map(|g| Tensor::from_parts(a.dims().to_vec(), g)),
        gb.map(|g| Tensor::from_parts(b.dims().to_vec(), g)),
    )
}
