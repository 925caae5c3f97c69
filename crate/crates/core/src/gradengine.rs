//! Reverse-mode differentiation over a small, fixed set of array primitives.
//!
//! A [`Graph`] is built append-only, so the node list is always in
//! topological order. Shapes are inferred while building; an inconsistent
//! node is recorded and reported by [`Graph::forward`] with its id, which keeps
//! the builder free of `?` noise at every call site.
//!
//! Elementwise ops require identical shapes. There is no implicit
//! broadcasting: use [`Graph::broadcast_scalar`] or a matrix product with a
//! constant ones column to tile values.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf(String),
    Constant(Tensor),
    Add,
    Subtract,
    Multiply,
    MatMul,
    /// `x W + b` with `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    Affine,
    Relu,
    Tanh,
    Exp,
    Log,
    Negate,
    Square,
    /// Sum over one axis (kept with extent 1) or over everything to a scalar.
    Sum(Option<usize>),
    Mean(Option<usize>),
    LogSumExp(usize),
    Softmax(usize),
    /// Elementwise `log N(x; mean, exp(log_std)^2)`; inputs `(x, mean, log_std)`.
    GaussianLogDensity,
    BroadcastScalar(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Subtract => "subtract",
            Op::Multiply => "multiply",
            Op::MatMul => "matmul",
            Op::Affine => "affine",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Negate => "negate",
            Op::Square => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::LogSumExp(_) => "log-sum-exp",
            Op::Softmax(_) => "softmax",
            Op::GaussianLogDensity => "gaussian-log-density",
            Op::BroadcastScalar(_) => "broadcast-scalar",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: std::result::Result<Vec<usize>, String>,
}

/// Named leaf values for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    slots: BTreeMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> &mut Self {
        self.slots.insert(name.into(), value);
        self
    }

    pub fn with(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.slots.iter()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
}

fn reduce_shape(shape: &[usize], axis: usize) -> std::result::Result<Vec<usize>, String> {
    if axis >= shape.len() {
        return Err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    let mut out = shape.to_vec();
    out[axis] = 1;
    Ok(out)
}

fn infer_shape(op: &Op, ins: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
    let same = |a: &[usize], b: &[usize]| {
        if a == b {
            Ok(a.to_vec())
        } else {
            Err(format!("operand shapes {a:?} and {b:?} differ"))
        }
    };
    match op {
        Op::Leaf(_) | Op::Constant(_) => unreachable!("leaves carry their own shape"),
        Op::Add | Op::Subtract | Op::Multiply => same(ins[0], ins[1]),
        Op::MatMul => match (ins[0], ins[1]) {
            ([m, k1], [k2, n]) if k1 == k2 => Ok(vec![*m, *n]),
            (a, b) => Err(format!("cannot multiply {a:?} by {b:?}")),
        },
        Op::Affine => match (ins[0], ins[1], ins[2]) {
            ([n, i1], [i2, o1], [o2]) if i1 == i2 && o1 == o2 => Ok(vec![*n, *o1]),
            (x, w, b) => Err(format!(
                "affine needs x[n,in] W[in,out] b[out], got {x:?} {w:?} {b:?}"
            )),
        },
        Op::Relu | Op::Tanh | Op::Exp | Op::Log | Op::Negate | Op::Square => Ok(ins[0].to_vec()),
        Op::Sum(None) | Op::Mean(None) => Ok(vec![]),
        Op::Sum(Some(axis)) | Op::Mean(Some(axis)) | Op::LogSumExp(axis) => {
            reduce_shape(ins[0], *axis)
        }
        Op::Softmax(axis) => reduce_shape(ins[0], *axis).map(|_| ins[0].to_vec()),
        Op::GaussianLogDensity => same(ins[0], ins[1]).and_then(|s| same(&s, ins[2])),
        Op::BroadcastScalar(shape) => {
            if ins[0].iter().product::<usize>() == 1 {
                if shape.len() > 2 {
                    Err(format!("rank {} unsupported", shape.len()))
                } else {
                    Ok(shape.clone())
                }
            } else {
                Err(format!(
                    "broadcast source must hold one value, has shape {:?}",
                    ins[0]
                ))
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let shape = if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            Err(format!("input node {} does not exist", bad.0))
        } else {
            let mut shapes = Vec::with_capacity(inputs.len());
            let mut upstream = None;
            for id in &inputs {
                match &self.nodes[id.0].shape {
                    Ok(s) => shapes.push(s.as_slice()),
                    Err(_) => {
                        upstream = Some(id.0);
                        break;
                    }
                }
            }
            match upstream {
                Some(i) => Err(format!("input node {i} is malformed")),
                None => infer_shape(&op, &shapes),
            }
        };
        self.nodes.push(Node { op, inputs, shape });
        NodeId(self.nodes.len() - 1)
    }

    /// Named input slot. Re-declaring a name returns the existing node; a
    /// conflicting shape marks a new malformed node instead.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            if self.nodes[id.0].shape.as_deref() == Ok(shape) {
                return id;
            }
            self.nodes.push(Node {
                op: Op::Leaf(name.to_string()),
                inputs: vec![],
                shape: Err(format!("slot `{name}` redeclared with shape {shape:?}")),
            });
            return NodeId(self.nodes.len() - 1);
        }
        let shape = if shape.len() > 2 {
            Err(format!("rank {} unsupported", shape.len()))
        } else {
            Ok(shape.to_vec())
        };
        self.nodes.push(Node {
            op: Op::Leaf(name.to_string()),
            inputs: vec![],
            shape,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = Ok(value.shape().to_vec());
        self.nodes.push(Node {
            op: Op::Constant(value),
            inputs: vec![],
            shape,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Subtract, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Multiply, vec![a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine, vec![x, w, b])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu, vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log, vec![a])
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Negate, vec![a])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square, vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(None), vec![a])
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::Sum(Some(axis)), vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(None), vec![a])
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::Mean(Some(axis)), vec![a])
    }

    pub fn log_sum_exp(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::LogSumExp(axis), vec![a])
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::Softmax(axis), vec![a])
    }

    pub fn gaussian_log_density(&mut self, x: NodeId, mean: NodeId, log_std: NodeId) -> NodeId {
        self.push(Op::GaussianLogDensity, vec![x, mean, log_std])
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::BroadcastScalar(shape.to_vec()), vec![a])
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).unwrap_or_default();
        let k = self.constant(Tensor::full(&shape, c));
        self.mul(a, k)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).unwrap_or_default();
        let k = self.constant(Tensor::full(&shape, c));
        self.add(a, k)
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> Option<Vec<usize>> {
        self.nodes.get(id.0).and_then(|n| n.shape.clone().ok())
    }

    pub fn op(&self, id: NodeId) -> Option<&Op> {
        self.nodes.get(id.0).map(|n| &n.op)
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    /// Evaluates every node. Fails on the first malformed node, missing or
    /// mis-shaped binding, or non-finite intermediate.
    pub fn forward(&self, bindings: &Bindings) -> Result<Evaluation<'_>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let shape = node.shape.as_ref().map_err(|detail| Error::Node {
                node: i,
                op: node.op.name(),
                detail: detail.clone(),
            })?;
            let value = match &node.op {
                Op::Leaf(name) => {
                    let bound = bindings
                        .get(name)
                        .ok_or_else(|| Error::MissingBinding(name.clone()))?;
                    if bound.shape() != shape.as_slice() {
                        return Err(Error::Node {
                            node: i,
                            op: "leaf",
                            detail: format!(
                                "slot `{name}` declared {shape:?}, bound {:?}",
                                bound.shape()
                            ),
                        });
                    }
                    bound.clone()
                }
                Op::Constant(t) => t.clone(),
                op => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|id| &values[id.0]).collect();
                    forward_op(op, &ins, shape)
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            values.push(value);
        }
        Ok(Evaluation {
            graph: self,
            values,
        })
    }
}

fn forward_op(op: &Op, ins: &[&Tensor], shape: &[usize]) -> Tensor {
    let x = ins[0];
    match op {
        Op::Leaf(_) | Op::Constant(_) => unreachable!(),
        Op::Add => x.zip_map(ins[1], |a, b| a + b),
        Op::Subtract => x.zip_map(ins[1], |a, b| a - b),
        Op::Multiply => x.zip_map(ins[1], |a, b| a * b),
        Op::MatMul => x.matmul(ins[1]),
        Op::Affine => {
            let mut out = x.matmul(ins[1]);
            let bias = ins[2].data();
            let cols = bias.len();
            for row in out.data_mut().chunks_mut(cols) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            out
        }
        Op::Relu => x.map(|v| v.max(0.0)),
        Op::Tanh => x.map(f64::tanh),
        Op::Exp => x.map(f64::exp),
        Op::Log => x.map(f64::ln),
        Op::Negate => x.map(|v| -v),
        Op::Square => x.map(|v| v * v),
        Op::Sum(None) => Tensor::scalar(x.sum()),
        Op::Mean(None) => Tensor::scalar(x.sum() / x.len() as f64),
        Op::Sum(Some(axis)) => reduce(x, *axis, shape, |lane| lane.iter().sum()),
        Op::Mean(Some(axis)) => reduce(x, *axis, shape, |lane| {
            lane.iter().sum::<f64>() / lane.len() as f64
        }),
        Op::LogSumExp(axis) => reduce(x, *axis, shape, log_sum_exp),
        Op::Softmax(axis) => {
            let mut out = x.clone();
            for_each_lane(x, *axis, |idx| {
                let lane: Vec<f64> = idx.iter().map(|&i| x.data()[i]).collect();
                let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for &v in &lane {
                    z += (v - m).exp();
                }
                for (&i, &v) in idx.iter().zip(&lane) {
                    out.data_mut()[i] = (v - m).exp() / z;
                }
            });
            out
        }
        Op::GaussianLogDensity => {
            let (mean, log_std) = (ins[1].data(), ins[2].data());
            let data = x
                .data()
                .iter()
                .zip(mean)
                .zip(log_std)
                .map(|((&v, &m), &s)| {
                    let z = (v - m) * (-s).exp();
                    -0.5 * LN_2PI - s - 0.5 * z * z
                })
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape inferred")
        }
        Op::BroadcastScalar(target) => Tensor::full(target, x.data()[0]),
    }
}

/// Shift-stable `log(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Calls `f` with the flat indices of every lane along `axis`.
fn for_each_lane(x: &Tensor, axis: usize, mut f: impl FnMut(&[usize])) {
    let shape = x.shape();
    match (shape.len(), axis) {
        (1, 0) => f(&(0..shape[0]).collect::<Vec<_>>()),
        (2, 0) => {
            for c in 0..shape[1] {
                f(&(0..shape[0]).map(|r| r * shape[1] + c).collect::<Vec<_>>());
            }
        }
        (2, 1) => {
            for r in 0..shape[0] {
                f(&(0..shape[1]).map(|c| r * shape[1] + c).collect::<Vec<_>>());
            }
        }
        _ => unreachable!("axis validated at build time"),
    }
}

fn reduce(x: &Tensor, axis: usize, shape: &[usize], f: impl Fn(&[f64]) -> f64) -> Tensor {
    let mut out = Vec::with_capacity(shape.iter().product());
    for_each_lane(x, axis, |idx| {
        let lane: Vec<f64> = idx.iter().map(|&i| x.data()[i]).collect();
        out.push(f(&lane));
    });
    Tensor::new(shape.to_vec(), out).expect("shape inferred")
}

/// Broadcasts a reduced tensor back along `axis` to `x`'s layout.
fn expand(reduced: &Tensor, x: &Tensor, axis: usize) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let mut lane_index = 0;
    for_each_lane(x, axis, |idx| {
        let v = reduced.data()[lane_index];
        for &i in idx {
            out.data_mut()[i] = v;
        }
        lane_index += 1;
    });
    out
}

/// All node values of one forward pass.
pub struct Evaluation<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
}

impl<'g> Evaluation<'g> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn output(&self) -> Result<&Tensor> {
        self.graph
            .output
            .map(|id| &self.values[id.0])
            .ok_or(Error::NoOutput)
    }

    /// Reverse pass from the scalar output; returns one gradient per `wrt`
    /// slot, zero-filled for slots the output does not depend on.
    pub fn backward(&self, wrt: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let graph = self.graph;
        let output = graph.output.ok_or(Error::NoOutput)?;
        let out_value = &self.values[output.0];
        if out_value.len() != 1 {
            return Err(Error::NonScalarOutput(out_value.shape().to_vec()));
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for name in wrt {
            targets.push(
                graph
                    .leaf(name)
                    .ok_or_else(|| Error::UnknownSlot(name.to_string()))?,
            );
        }

        // Only propagate through nodes that depend on a requested leaf.
        let n = graph.nodes.len();
        let mut needed = vec![false; n];
        for t in &targets {
            needed[t.0] = true;
        }
        for (i, node) in graph.nodes.iter().enumerate() {
            if node.inputs.iter().any(|id| needed[id.0]) {
                needed[i] = true;
            }
        }

        let mut adjoints: Vec<Option<Tensor>> = vec![None; n];
        if needed[output.0] {
            adjoints[output.0] = Some(Tensor::full(out_value.shape(), 1.0));
        }
        for i in (0..=output.0).rev() {
            let Some(g) = adjoints[i].take() else {
                continue;
            };
            let node = &graph.nodes[i];
            if node.inputs.is_empty() {
                adjoints[i] = Some(g);
                continue;
            }
            let ins: Vec<&Tensor> = node.inputs.iter().map(|id| &self.values[id.0]).collect();
            let y = &self.values[i];
            for (k, id) in node.inputs.iter().enumerate() {
                if !needed[id.0] {
                    continue;
                }
                let contrib = vjp(&node.op, &ins, y, &g, k);
                match &mut adjoints[id.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (name, t) in wrt.iter().zip(&targets) {
            let g = adjoints[t.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.values[t.0].shape()));
            grads.insert(name.to_string(), g);
        }
        Ok(grads)
    }
}

/// Vector-Jacobian product of `op` with respect to input `k`.
fn vjp(op: &Op, ins: &[&Tensor], y: &Tensor, g: &Tensor, k: usize) -> Tensor {
    let x = ins[0];
    match op {
        Op::Leaf(_) | Op::Constant(_) => unreachable!(),
        Op::Add => g.clone(),
        Op::Subtract => {
            if k == 0 {
                g.clone()
            } else {
                g.map(|v| -v)
            }
        }
        Op::Multiply => g.zip_map(ins[1 - k], |a, b| a * b),
        Op::MatMul => {
            if k == 0 {
                g.matmul(&ins[1].transpose())
            } else {
                x.transpose().matmul(g)
            }
        }
        Op::Affine => match k {
            0 => g.matmul(&ins[1].transpose()),
            1 => x.transpose().matmul(g),
            _ => {
                let cols = g.cols();
                let mut b = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (acc, v) in b.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::vector(b)
            }
        },
        Op::Relu => g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
        Op::Tanh => g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)),
        Op::Exp => g.zip_map(y, |gv, yv| gv * yv),
        Op::Log => g.zip_map(x, |gv, xv| gv / xv),
        Op::Negate => g.map(|v| -v),
        Op::Square => g.zip_map(x, |gv, xv| 2.0 * gv * xv),
        Op::Sum(None) => Tensor::full(x.shape(), g.data()[0]),
        Op::Mean(None) => Tensor::full(x.shape(), g.data()[0] / x.len() as f64),
        Op::Sum(Some(axis)) => expand(g, x, *axis),
        Op::Mean(Some(axis)) => {
            let extent = x.shape()[*axis] as f64;
            expand(g, x, *axis).map(|v| v / extent)
        }
        Op::LogSumExp(axis) => {
            let up = expand(g, x, *axis);
            let lse = expand(y, x, *axis);
            let soft = x.zip_map(&lse, |a, b| (a - b).exp());
            up.zip_map(&soft, |a, b| a * b)
        }
        Op::Softmax(axis) => {
            let gy = g.zip_map(y, |a, b| a * b);
            let dot = reduce(
                &gy,
                *axis,
                &reduce_shape(y.shape(), *axis).expect("valid axis"),
                |l| l.iter().sum(),
            );
            let dot = expand(&dot, y, *axis);
            let inner = g.zip_map(&dot, |a, b| a - b);
            inner.zip_map(y, |a, b| a * b)
        }
        Op::GaussianLogDensity => {
            let (mean, log_std) = (ins[1], ins[2]);
            let mut out = Tensor::zeros(x.shape());
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                let inv_var = (-2.0 * log_std.data()[i]).exp();
                let r = x.data()[i] - mean.data()[i];
                let d = match k {
                    0 => -r * inv_var,
                    1 => r * inv_var,
                    _ => r * r * inv_var - 1.0,
                };
                *o = g.data()[i] * d;
            }
            out
        }
        Op::BroadcastScalar(_) => {
            Tensor::new(x.shape().to_vec(), vec![g.sum()]).expect("single value")
        }
    }
}

/// Value of the graph's designated output node.
pub fn evaluate(graph: &Graph, bindings: &Bindings) -> Result<Tensor> {
    let eval = graph.forward(bindings)?;
    eval.output().cloned()
}

/// Exact reverse-mode gradients of the scalar output with respect to `wrt`.
pub fn gradient(
    graph: &Graph,
    bindings: &Bindings,
    wrt: &[&str],
) -> Result<BTreeMap<String, Tensor>> {
    graph.forward(bindings)?.backward(wrt)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = f(&probe);
        probe[i] = point[i] - step;
        let down = f(&probe);
        probe[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe(i));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}
