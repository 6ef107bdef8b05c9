use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::{DiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, f32),
    Scale(NodeId, f32),
    Neg(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Broadcast(NodeId),
    Concat { axis: usize, inputs: Vec<NodeId> },
    Slice { input: NodeId, axis: usize, start: usize },
    Reshape(NodeId),
    Gather { input: NodeId, indices: Arc<Vec<usize>> },
    SumAxis { input: NodeId, axis: usize },
    MeanAxis { input: NodeId, axis: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Softmax(NodeId),
    LayerNorm { input: NodeId, eps: f32 },
    Cumsum(NodeId),
    Dot(NodeId, NodeId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
}

/// Range of tape nodes whose forward values were dropped after recording and
/// must be recomputed on demand during the backward pass.
struct CheckpointRange {
    start: usize,
    end: usize,
    dropped: Vec<usize>,
}

/// Reverse-mode automatic differentiation tape.
///
/// Operations evaluate eagerly as they are recorded, so after recording the
/// value of every node is available via [`Tape::value`]. Nodes are stored in
/// topological order by construction; [`Tape::backward`] visits each node
/// exactly once in reverse. Recording is deterministic: the same sequence of
/// ops on the same inputs produces bit-identical values.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    checkpoints: Vec<CheckpointRange>,
    rematerialize: bool,
    scope_depth: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            checkpoints: Vec::new(),
            rematerialize: false,
            scope_depth: 0,
        }
    }

    /// Enables dropping of activation values inside [`Tape::checkpoint`]
    /// scopes; they are recomputed during the backward pass.
    pub fn with_rematerialization(mut self, on: bool) -> Tape {
        self.rematerialize = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a constant input node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Adds a named trainable leaf. Gradients for every registered parameter
    /// are collected by [`Tape::param_grads`].
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId, DiffError> {
        if self.params.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        let id = self.push(Op::Leaf, value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Forward value of a node. Panics for interior nodes of a completed
    /// checkpoint scope (their values were dropped).
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("value dropped inside a checkpoint scope")
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn assert_finite(&self, id: NodeId, context: &str) -> Result<(), DiffError> {
        self.value(id).assert_finite(context)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
            value: Some(value),
        });
        id
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("missing forward value")
    }

    // ---- recording API -------------------------------------------------

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, DiffError> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(DiffError::ShapeMismatch {
                op: name,
                lhs: self.shape_of(a).to_vec(),
                rhs: self.shape_of(b).to_vec(),
            });
        }
        let op = make(a, b);
        let value = self.eval_op(&op)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("add", a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("sub", a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("mul", a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("div", a, b, Op::Div)
    }

    fn unary(&mut self, a: NodeId, make: impl Fn(NodeId) -> Op) -> NodeId {
        let op = make(a);
        let value = self.eval_op(&op).expect("unary op cannot fail");
        self.push(op, value)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        self.unary(a, |a| Op::AddScalar(a, c))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        self.unary(a, |a| Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sin)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Cos)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Gelu)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softmax)
    }

    /// Layer normalization over the last axis, without affine terms.
    pub fn layer_norm(&mut self, a: NodeId, eps: f32) -> NodeId {
        self.unary(a, |a| Op::LayerNorm { input: a, eps })
    }

    /// Inclusive cumulative sum over the last axis.
    pub fn cumsum(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Cumsum)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let op = Op::Matmul(a, b);
        let value = self.eval_op(&op)?;
        Ok(self.push(op, value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        if self.shape_of(a).len() != 2 {
            return Err(DiffError::Invalid {
                op: "transpose",
                msg: format!("expected rank-2 input, got shape {:?}", self.shape_of(a)),
            });
        }
        let op = Op::Transpose(a);
        let value = self.eval_op(&op)?;
        Ok(self.push(op, value))
    }

    /// Expands `a` to `target` shape, NumPy style: shapes align on the right
    /// and each input dimension must equal the target or be 1.
    pub fn broadcast(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId, DiffError> {
        let sa = self.shape_of(a).to_vec();
        if !broadcast_compatible(&sa, target) {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast",
                lhs: sa,
                rhs: target.to_vec(),
            });
        }
        let value = broadcast_kernel(self.val(a), target);
        Ok(self.push(Op::Broadcast(a), value))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        if inputs.is_empty() {
            return Err(DiffError::Invalid {
                op: "concat",
                msg: "no inputs".to_string(),
            });
        }
        let first = self.shape_of(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(DiffError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        for &id in &inputs[1..] {
            let s = self.shape_of(id);
            let compatible = s.len() == first.len()
                && s.iter()
                    .enumerate()
                    .all(|(i, &d)| i == axis || d == first[i]);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
        }
        let op = Op::Concat {
            axis,
            inputs: inputs.to_vec(),
        };
        let value = self.eval_op(&op)?;
        Ok(self.push(op, value))
    }

    /// Contiguous slice `start..end` along `axis`.
    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, DiffError> {
        let s = self.shape_of(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(DiffError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of shape {s:?}"),
            });
        }
        let op = Op::Slice {
            input: a,
            axis,
            start,
        };
        let mut out_shape = s;
        out_shape[axis] = end - start;
        let value = slice_kernel(self.val(a), axis, start, &out_shape);
        Ok(self.push(op, value))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        let n: usize = shape.iter().product();
        if n != self.val(a).len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape_of(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.val(a).clone().with_shape(shape.to_vec());
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Fixed reindexing of the flattened input: `out[i] = in[indices[i]]`.
    /// Covers patch extraction and other static permutations.
    pub fn gather(
        &mut self,
        a: NodeId,
        indices: Arc<Vec<usize>>,
        out_shape: &[usize],
    ) -> Result<NodeId, DiffError> {
        let n: usize = out_shape.iter().product();
        if n != indices.len() {
            return Err(DiffError::Invalid {
                op: "gather",
                msg: format!("{} indices for output shape {:?}", indices.len(), out_shape),
            });
        }
        let in_len = self.val(a).len();
        if indices.iter().any(|&i| i >= in_len) {
            return Err(DiffError::Invalid {
                op: "gather",
                msg: format!("index out of range for input of {in_len} elements"),
            });
        }
        let src = self.val(a).data();
        let data: Vec<f32> = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(out_shape.to_vec(), data);
        Ok(self.push(Op::Gather { input: a, indices }, value))
    }

    fn reduce_axis(
        &mut self,
        name: &'static str,
        a: NodeId,
        axis: usize,
        make: impl Fn(NodeId, usize) -> Op,
    ) -> Result<NodeId, DiffError> {
        let s = self.shape_of(a).to_vec();
        if axis >= s.len() {
            return Err(DiffError::Invalid {
                op: name,
                msg: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let op = make(a, axis);
        let value = self.eval_op(&op)?;
        Ok(self.push(op, value))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        self.reduce_axis("sum_axis", a, axis, |input, axis| Op::SumAxis {
            input,
            axis,
        })
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        self.reduce_axis("mean_axis", a, axis, |input, axis| Op::MeanAxis {
            input,
            axis,
        })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::SumAll)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::MeanAll)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        if self.val(a).len() != self.val(b).len() {
            return Err(DiffError::ShapeMismatch {
                op: "dot",
                lhs: self.shape_of(a).to_vec(),
                rhs: self.shape_of(b).to_vec(),
            });
        }
        let op = Op::Dot(a, b);
        let value = self.eval_op(&op)?;
        Ok(self.push(op, value))
    }

    // ---- checkpoint scopes ----------------------------------------------

    /// Runs `f` as an activation block. When rematerialization is enabled,
    /// forward values of nodes recorded inside the block are dropped once it
    /// returns (except the block's output) and recomputed during backward.
    /// Only the returned node may be consumed by later ops.
    pub fn checkpoint<E>(
        &mut self,
        f: impl FnOnce(&mut Tape) -> Result<NodeId, E>,
    ) -> Result<NodeId, E> {
        let start = self.nodes.len();
        self.scope_depth += 1;
        let result = f(self);
        self.scope_depth -= 1;
        let out = result?;
        if self.rematerialize && self.scope_depth == 0 {
            let end = self.nodes.len();
            let mut dropped = Vec::new();
            for i in start..end {
                // Leaves hold the only copy of their value and cannot be
                // recomputed; keep them.
                let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
                if i != out.0 && !is_leaf && self.nodes[i].value.is_some() {
                    self.nodes[i].value = None;
                    dropped.push(i);
                }
            }
            if !dropped.is_empty() {
                self.checkpoints.push(CheckpointRange {
                    start,
                    end,
                    dropped,
                });
            }
        }
        Ok(out)
    }

    fn rematerialize_range(&mut self, range_idx: usize) -> Result<(), DiffError> {
        let ids: Vec<usize> = self.checkpoints[range_idx].dropped.clone();
        for i in ids {
            if self.nodes[i].value.is_none() {
                let op = self.nodes[i].op.clone();
                let shape = self.nodes[i].shape.clone();
                let value = match &op {
                    Op::Broadcast(a) => broadcast_kernel(self.val(*a), &shape),
                    Op::Slice { input, axis, start } => {
                        slice_kernel(self.val(*input), *axis, *start, &shape)
                    }
                    Op::Reshape(a) => self.val(*a).clone().with_shape(shape),
                    Op::Gather { input, indices } => {
                        let src = self.val(*input).data();
                        let data: Vec<f32> = indices.iter().map(|&i| src[i]).collect();
                        Tensor::new(shape, data)
                    }
                    _ => self.eval_op(&op)?,
                };
                self.nodes[i].value = Some(value);
            }
        }
        Ok(())
    }

    fn drop_range(&mut self, range_idx: usize) {
        let ids: Vec<usize> = self.checkpoints[range_idx].dropped.clone();
        for i in ids {
            self.nodes[i].value = None;
        }
    }

    // ---- backward --------------------------------------------------------

    /// Gradient of a scalar `output` with respect to every node.
    ///
    /// Disconnected nodes get no entry; [`Tape::param_grads`] materializes
    /// zeros for disconnected parameters. Results are identical whether
    /// forward activations were stored or rematerialized.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients, DiffError> {
        let out_shape = self.shape_of(output).to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarOutput { shape: out_shape });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        // Checkpoint ranges were recorded in increasing node order; walk them
        // from the back as the reverse sweep descends.
        let mut next_range = self.checkpoints.len();
        let mut active_range: Option<usize> = None;

        for i in (0..=output.0).rev() {
            if let Some(r) = active_range {
                if i < self.checkpoints[r].start {
                    self.drop_range(r);
                    active_range = None;
                }
            }
            if active_range.is_none() && next_range > 0 {
                let r = next_range - 1;
                let range = &self.checkpoints[r];
                if i < range.end && i >= range.start {
                    self.rematerialize_range(r)?;
                    active_range = Some(r);
                    next_range = r;
                }
            }

            let Some(g) = grads[i].take() else { continue };
            self.accumulate_input_grads(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        if let Some(r) = active_range {
            self.drop_range(r);
        }
        Ok(Gradients { grads })
    }

    /// Gradients for every registered parameter; disconnected parameters get
    /// zero tensors of the parameter shape.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &id)| {
                let g = grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].shape.clone()));
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate_input_grads(
        &self,
        node: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), DiffError> {
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, t: Tensor| {
            match &mut grads[id.0] {
                Some(acc) => {
                    debug_assert_eq!(acc.shape(), t.shape());
                    acc.data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, &b)| *a += b);
                }
                slot @ None => *slot = Some(t),
            }
        };

        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g.zip(self.val(*b), |g, b| g * b));
                add_to(grads, *b, g.zip(self.val(*a), |g, a| g * a));
            }
            Op::Div(a, b) => {
                let vb = self.val(*b);
                add_to(grads, *a, g.zip(vb, |g, b| g / b));
                let va = self.val(*a);
                let db = Tensor::from_fn(vb.shape().to_vec(), |i| {
                    let b = vb.data()[i];
                    -g.data()[i] * va.data()[i] / (b * b)
                });
                add_to(grads, *b, db);
            }
            Op::AddScalar(a, _) => add_to(grads, *a, g.clone()),
            Op::Scale(a, c) => add_to(grads, *a, g.map(|v| v * c)),
            Op::Neg(a) => add_to(grads, *a, g.map(|v| -v)),
            Op::Matmul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = g @ B^T, dB = A^T @ g
                let mut da = vec![0.0f32; m * k];
                gemm_strided(m, n, k, g.data(), n as isize, 1, vb.data(), 1, n as isize, &mut da);
                add_to(grads, *a, Tensor::new(vec![m, k], da));
                let mut db = vec![0.0f32; k * n];
                gemm_strided(k, m, n, va.data(), 1, k as isize, g.data(), n as isize, 1, &mut db);
                add_to(grads, *b, Tensor::new(vec![k, n], db));
            }
            Op::Transpose(a) => {
                let s = &self.nodes[node].shape; // [n, m]
                add_to(grads, *a, transpose_kernel(g, s[0], s[1]));
            }
            Op::Broadcast(a) => {
                let target = self.nodes[a.0].shape.clone();
                add_to(grads, *a, reduce_to_shape(g, &target));
            }
            Op::Concat { axis, inputs } => {
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.nodes[inp.0].shape[*axis];
                    let mut out_shape = self.nodes[node].shape.clone();
                    out_shape[*axis] = len;
                    add_to(grads, inp, slice_kernel(g, *axis, offset, &out_shape));
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let full = Tensor::zeros(self.nodes[input.0].shape.clone());
                add_to(grads, *input, paste_kernel(full, g, *axis, *start));
            }
            Op::Reshape(a) => {
                let s = self.nodes[a.0].shape.clone();
                add_to(grads, *a, g.clone().with_shape(s));
            }
            Op::Gather { input, indices } => {
                let mut acc = vec![0.0f32; self.val(*input).len()];
                for (o, &src) in indices.iter().enumerate() {
                    acc[src] += g.data()[o];
                }
                add_to(
                    grads,
                    *input,
                    Tensor::new(self.nodes[input.0].shape.clone(), acc),
                );
            }
            Op::SumAxis { input, axis } => {
                let s = self.nodes[input.0].shape.clone();
                add_to(grads, *input, expand_axis(g, *axis, s[*axis], &s));
            }
            Op::MeanAxis { input, axis } => {
                let s = self.nodes[input.0].shape.clone();
                let len = s[*axis] as f32;
                let expanded = expand_axis(g, *axis, s[*axis], &s);
                add_to(grads, *input, expanded.map(|v| v / len));
            }
            Op::SumAll(a) => {
                let s = self.nodes[a.0].shape.clone();
                add_to(grads, *a, Tensor::full(s, g.data()[0]));
            }
            Op::MeanAll(a) => {
                let s = self.nodes[a.0].shape.clone();
                let n: usize = s.iter().product();
                add_to(grads, *a, Tensor::full(s, g.data()[0] / n as f32));
            }
            Op::Exp(a) => add_to(grads, *a, g.zip(self.val_of(node), |g, y| g * y)),
            Op::Log(a) => add_to(grads, *a, g.zip(self.val(*a), |g, x| g / x)),
            Op::Sin(a) => add_to(grads, *a, g.zip(self.val(*a), |g, x| g * x.cos())),
            Op::Cos(a) => add_to(grads, *a, g.zip(self.val(*a), |g, x| -g * x.sin())),
            Op::Relu(a) => add_to(
                grads,
                *a,
                g.zip(self.val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Softplus(a) => add_to(grads, *a, g.zip(self.val(*a), |g, x| g * sigmoid(x))),
            Op::Sigmoid(a) => add_to(
                grads,
                *a,
                g.zip(self.val_of(node), |g, y| g * y * (1.0 - y)),
            ),
            Op::Tanh(a) => add_to(
                grads,
                *a,
                g.zip(self.val_of(node), |g, y| g * (1.0 - y * y)),
            ),
            Op::Gelu(a) => add_to(grads, *a, g.zip(self.val(*a), |g, x| g * gelu_grad(x))),
            Op::Square(a) => add_to(grads, *a, g.zip(self.val(*a), |g, x| 2.0 * g * x)),
            Op::Sqrt(a) => add_to(
                grads,
                *a,
                g.zip(self.val_of(node), |g, y| g / (2.0 * y)),
            ),
            Op::Softmax(a) => {
                let y = self.val_of(node);
                let rows = rows_of(y.shape());
                let cols = y.len() / rows.max(1);
                let mut dx = vec![0.0f32; y.len()];
                for r in 0..rows {
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f32 = ys.iter().zip(gs).map(|(&y, &g)| y * g).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = ys[c] * (gs[c] - dot);
                    }
                }
                add_to(grads, *a, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::LayerNorm { input, eps } => {
                let x = self.val(*input);
                let y = self.val_of(node);
                let rows = rows_of(x.shape());
                let cols = x.len() / rows.max(1);
                let mut dx = vec![0.0f32; x.len()];
                for r in 0..rows {
                    let xs = &x.data()[r * cols..(r + 1) * cols];
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let mean: f32 = xs.iter().sum::<f32>() / cols as f32;
                    let var: f32 =
                        xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean: f32 = gs.iter().sum::<f32>() / cols as f32;
                    let gy_mean: f32 =
                        gs.iter().zip(ys).map(|(&g, &y)| g * y).sum::<f32>() / cols as f32;
                    for c in 0..cols {
                        dx[r * cols + c] = inv * (gs[c] - g_mean - ys[c] * gy_mean);
                    }
                }
                add_to(grads, *input, Tensor::new(x.shape().to_vec(), dx));
            }
            Op::Cumsum(a) => {
                let s = self.nodes[node].shape.clone();
                let rows = rows_of(&s);
                let cols = g.len() / rows.max(1);
                let mut dx = vec![0.0f32; g.len()];
                for r in 0..rows {
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let mut acc = 0.0f32;
                    for c in (0..cols).rev() {
                        acc += gs[c];
                        dx[r * cols + c] = acc;
                    }
                }
                add_to(grads, *a, Tensor::new(s, dx));
            }
            Op::Dot(a, b) => {
                let g0 = g.data()[0];
                add_to(grads, *a, self.val(*b).map(|v| g0 * v));
                add_to(grads, *b, self.val(*a).map(|v| g0 * v));
            }
        }
        Ok(())
    }

    fn val_of(&self, node: usize) -> &Tensor {
        self.nodes[node]
            .value
            .as_ref()
            .expect("missing forward value")
    }

    // ---- forward kernels ---------------------------------------------------

    fn eval_op(&self, op: &Op) -> Result<Tensor, DiffError> {
        Ok(match op {
            Op::Leaf => unreachable!("leaves carry their value"),
            Op::Add(a, b) => self.val(*a).zip(self.val(*b), |a, b| a + b),
            Op::Sub(a, b) => self.val(*a).zip(self.val(*b), |a, b| a - b),
            Op::Mul(a, b) => self.val(*a).zip(self.val(*b), |a, b| a * b),
            Op::Div(a, b) => self.val(*a).zip(self.val(*b), |a, b| a / b),
            Op::AddScalar(a, c) => self.val(*a).map(|v| v + c),
            Op::Scale(a, c) => self.val(*a).map(|v| v * c),
            Op::Neg(a) => self.val(*a).map(|v| -v),
            Op::Matmul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let mut c = vec![0.0f32; m * n];
                gemm_strided(m, k, n, va.data(), k as isize, 1, vb.data(), n as isize, 1, &mut c);
                Tensor::new(vec![m, n], c)
            }
            Op::Transpose(a) => {
                let va = self.val(*a);
                transpose_kernel(va, va.shape()[0], va.shape()[1])
            }
            Op::Broadcast(_) | Op::Slice { .. } | Op::Gather { .. } | Op::Reshape(_) => {
                unreachable!("shape ops evaluated at record time")
            }
            Op::Concat { axis, inputs } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&i| self.val(i)).collect();
                concat_kernel(&tensors, *axis)
            }
            Op::SumAxis { input, axis } => reduce_axis_kernel(self.val(*input), *axis, false),
            Op::MeanAxis { input, axis } => reduce_axis_kernel(self.val(*input), *axis, true),
            Op::SumAll(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            Op::MeanAll(a) => {
                let v = self.val(*a);
                Tensor::scalar(v.data().iter().sum::<f32>() / v.len() as f32)
            }
            Op::Exp(a) => self.val(*a).map(f32::exp),
            Op::Log(a) => self.val(*a).map(f32::ln),
            Op::Sin(a) => self.val(*a).map(f32::sin),
            Op::Cos(a) => self.val(*a).map(f32::cos),
            Op::Relu(a) => self.val(*a).map(|v| v.max(0.0)),
            Op::Softplus(a) => self.val(*a).map(softplus),
            Op::Sigmoid(a) => self.val(*a).map(sigmoid),
            Op::Tanh(a) => self.val(*a).map(f32::tanh),
            Op::Gelu(a) => self.val(*a).map(gelu),
            Op::Square(a) => self.val(*a).map(|v| v * v),
            Op::Sqrt(a) => self.val(*a).map(f32::sqrt),
            Op::Softmax(a) => softmax_kernel(self.val(*a)),
            Op::LayerNorm { input, eps } => layer_norm_kernel(self.val(*input), *eps),
            Op::Cumsum(a) => cumsum_kernel(self.val(*a)),
            Op::Dot(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                Tensor::scalar(va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).sum())
            }
        })
    }
}

// ---- shared kernels -------------------------------------------------------

/// C[m,n] += A[m,k] * B[k,n] with arbitrary strides for A and B; C is
/// row-major and overwritten. Large products are split over row blocks so
/// parallel and serial execution write identical results.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert_eq!(c.len(), m * n);
    const PAR_THRESHOLD: usize = 1 << 19;
    let threads = rayon::current_num_threads();
    if threads > 1 && m >= 2 * threads && m * k * n >= PAR_THRESHOLD {
        let rows_per = m.div_ceil(threads);
        let a_ptr = SyncPtr(a.as_ptr());
        let b_ptr = SyncPtr(b.as_ptr());
        c.par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|(ci, chunk)| {
                let row0 = ci * rows_per;
                let rows = chunk.len() / n;
                unsafe {
                    matrixmultiply::sgemm(
                        rows,
                        k,
                        n,
                        1.0,
                        a_ptr.get().offset(row0 as isize * rsa),
                        rsa,
                        csa,
                        b_ptr.get(),
                        rsb,
                        csb,
                        0.0,
                        chunk.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
    } else {
        unsafe {
            matrixmultiply::sgemm(
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
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

struct SyncPtr(*const f32);
unsafe impl Sync for SyncPtr {}
unsafe impl Send for SyncPtr {}

impl SyncPtr {
    fn get(&self) -> *const f32 {
        self.0
    }
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn rows_of(shape: &[usize]) -> usize {
    if shape.is_empty() {
        1
    } else {
        shape[..shape.len() - 1].iter().product()
    }
}

fn broadcast_compatible(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    from.iter()
        .rev()
        .zip(to.iter().rev())
        .all(|(&f, &t)| f == t || f == 1)
}

fn broadcast_kernel(src: &Tensor, target: &[usize]) -> Tensor {
    if src.shape() == target {
        return src.clone();
    }
    let rank = target.len();
    let mut padded = vec![1usize; rank];
    let offset = rank - src.rank();
    padded[offset..].copy_from_slice(src.shape());

    // Contiguous tail: trailing axes where source and target agree.
    let mut tail = rank;
    while tail > 0 && padded[tail - 1] == target[tail - 1] {
        tail -= 1;
    }
    let chunk: usize = target[tail..].iter().product();
    let outer_dims = &target[..tail];

    let mut src_strides = vec![0isize; tail];
    let mut stride = chunk as isize;
    for i in (0..tail).rev() {
        src_strides[i] = if padded[i] == 1 { 0 } else { stride };
        stride *= padded[i] as isize;
    }

    let total: usize = target.iter().product();
    let mut out = vec![0.0f32; total];
    let mut idx = vec![0usize; tail];
    let mut dst = 0usize;
    loop {
        let src_off: isize = idx
            .iter()
            .zip(&src_strides)
            .map(|(&i, &s)| i as isize * s)
            .sum();
        let src_off = src_off as usize;
        out[dst..dst + chunk].copy_from_slice(&src.data()[src_off..src_off + chunk]);
        dst += chunk;
        // mixed-radix increment
        let mut carry = true;
        for d in (0..tail).rev() {
            idx[d] += 1;
            if idx[d] < outer_dims[d] {
                carry = false;
                break;
            }
            idx[d] = 0;
        }
        if tail == 0 || carry {
            break;
        }
    }
    Tensor::new(target.to_vec(), out)
}

/// Sums `g` down to `target` shape (inverse of broadcast).
fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let mut cur = g.clone();
    while cur.rank() > target.len() {
        cur = reduce_axis_kernel(&cur, 0, false);
    }
    for axis in 0..target.len() {
        if target[axis] == 1 && cur.shape()[axis] > 1 {
            let reduced = reduce_axis_kernel(&cur, axis, false);
            // reinsert the squeezed axis as size 1
            let mut shape = cur.shape().to_vec();
            shape[axis] = 1;
            cur = reduced.with_shape(shape);
        }
    }
    cur
}

fn reduce_axis_kernel(t: &Tensor, axis: usize, mean: bool) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0f32; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let base = (o * len + k) * inner;
            let dst = o * inner;
            for i in 0..inner {
                out[dst + i] += t.data()[base + i];
            }
        }
    }
    if mean {
        let inv = 1.0 / len as f32;
        out.iter_mut().for_each(|v| *v *= inv);
    }
    let mut out_shape: Vec<usize> = shape.to_vec();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    Tensor::new(out_shape, out)
}

/// Inverse of `reduce_axis_kernel`: repeats `g` along a reinserted axis.
fn expand_axis(g: &Tensor, axis: usize, len: usize, target: &[usize]) -> Tensor {
    let outer: usize = target[..axis].iter().product();
    let inner: usize = target[axis + 1..].iter().product();
    let mut out = vec![0.0f32; outer * len * inner];
    for o in 0..outer {
        let src = &g.data()[o * inner..(o + 1) * inner];
        for k in 0..len {
            let dst = (o * len + k) * inner;
            out[dst..dst + inner].copy_from_slice(src);
        }
    }
    Tensor::new(target.to_vec(), out)
}

fn transpose_kernel(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    debug_assert_eq!(t.len(), rows * cols);
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = t.data()[r * cols + c];
        }
    }
    Tensor::new(vec![cols, rows], out)
}

fn concat_kernel(tensors: &[&Tensor], axis: usize) -> Tensor {
    let first = tensors[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total_axis: usize = tensors.iter().map(|t| t.shape()[axis]).sum();
    let mut out = vec![0.0f32; outer * total_axis * inner];
    let row = total_axis * inner;
    let mut offset = 0;
    for t in tensors {
        let len = t.shape()[axis];
        let block = len * inner;
        for o in 0..outer {
            let src = &t.data()[o * block..(o + 1) * block];
            let dst = o * row + offset * inner;
            out[dst..dst + block].copy_from_slice(src);
        }
        offset += len;
    }
    let mut shape = first.to_vec();
    shape[axis] = total_axis;
    Tensor::new(shape, out)
}

fn slice_kernel(t: &Tensor, axis: usize, start: usize, out_shape: &[usize]) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = out_shape[axis];
    let src_row = shape[axis] * inner;
    let block = len * inner;
    let mut out = vec![0.0f32; outer * block];
    for o in 0..outer {
        let src = o * src_row + start * inner;
        out[o * block..(o + 1) * block].copy_from_slice(&t.data()[src..src + block]);
    }
    Tensor::new(out_shape.to_vec(), out)
}

/// Writes `patch` into `base` at `start` along `axis` (for slice backward).
fn paste_kernel(mut base: Tensor, patch: &Tensor, axis: usize, start: usize) -> Tensor {
    let shape = base.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = patch.shape()[axis];
    let dst_row = shape[axis] * inner;
    let block = len * inner;
    for o in 0..outer {
        let dst = o * dst_row + start * inner;
        base.data_mut()[dst..dst + block].copy_from_slice(&patch.data()[o * block..(o + 1) * block]);
    }
    base
}

fn softmax_kernel(t: &Tensor) -> Tensor {
    let rows = rows_of(t.shape());
    let cols = t.len() / rows.max(1);
    let mut out = vec![0.0f32; t.len()];
    for r in 0..rows {
        let xs = &t.data()[r * cols..(r + 1) * cols];
        let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0f32;
        for (d, &x) in dst.iter_mut().zip(xs) {
            let e = (x - max).exp();
            *d = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn layer_norm_kernel(t: &Tensor, eps: f32) -> Tensor {
    let rows = rows_of(t.shape());
    let cols = t.len() / rows.max(1);
    let mut out = vec![0.0f32; t.len()];
    for r in 0..rows {
        let xs = &t.data()[r * cols..(r + 1) * cols];
        let mean: f32 = xs.iter().sum::<f32>() / cols as f32;
        let var: f32 = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for c in 0..cols {
            out[r * cols + c] = (xs[c] - mean) * inv;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn cumsum_kernel(t: &Tensor) -> Tensor {
    let rows = rows_of(t.shape());
    let cols = t.len() / rows.max(1);
    let mut out = vec![0.0f32; t.len()];
    for r in 0..rows {
        let xs = &t.data()[r * cols..(r + 1) * cols];
        let mut acc = 0.0f32;
        for c in 0..cols {
            acc += xs[c];
            out[r * cols + c] = acc;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}
