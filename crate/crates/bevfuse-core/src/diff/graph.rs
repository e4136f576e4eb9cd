//! Replayable op graph with reverse-mode gradients.
//!
//! A [`Graph`] is built once per forward pass: leaves (inputs, parameter
//! snapshots, constants) followed by op nodes in topological order. Running
//! [`Graph::run_forward`] evaluates every node from the current leaf values
//! and retains all activations, so the same graph can be re-evaluated after
//! mutating a leaf (finite-difference probing) or new input data. Backward
//! walks the node list in reverse, accumulating gradients by summation over
//! fan-out.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::mem;

use super::kernels::{self, ConvDims};
use super::tensor::{broadcast_shape, numel_of, strides_of, Tensor};
use super::GraphError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input { requires_grad: bool },
    Param,
    Const,
    Conv2d { stride: usize, pad: usize },
    Upsample2x,
    Relu,
    Sigmoid,
    Softmax { axis: usize },
    InstanceNorm { eps: f64 },
    Add,
    Sub,
    Mul,
    Scale { factor: f64 },
    Linear,
    MatMul,
    BilinearSample,
    ScatterAdd { height: usize, width: usize, cells: Vec<i64> },
    GatherRows { indices: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape,
    Permute { perm: Vec<usize> },
    GlobalAvgPool,
    SumAxis { axis: usize },
    MeanAll,
    BceWithLogits,
    DiceWithLogits { smooth: f64 },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param => "param",
            Op::Const => "const",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x => "upsample2x",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::Linear => "linear",
            Op::MatMul => "matmul",
            Op::BilinearSample => "bilinear_sample",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::GatherRows { .. } => "gather_rows",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::Permute { .. } => "permute",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAll => "mean_all",
            Op::BceWithLogits => "bce_with_logits",
            Op::DiceWithLogits { .. } => "dice_with_logits",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input { .. } | Op::Param | Op::Const)
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Gradients returned by [`Graph::backward`], keyed by leaf name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub inputs: BTreeMap<String, Tensor>,
    pub params: BTreeMap<String, Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    has_value: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    input_ids: BTreeMap<String, NodeId>,
    param_ids: BTreeMap<String, NodeId>,
    output_ids: BTreeMap<String, NodeId>,
    ran_forward: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let needs_grad = match op {
            Op::Input { requires_grad } => requires_grad,
            Op::Param => true,
            Op::Const => false,
            _ => inputs.iter().any(|id| self.nodes[id.0].needs_grad),
        };
        let is_leaf = op.is_leaf();
        let id = NodeId(self.nodes.len());
        self.values.push(Tensor::zeros(&shape));
        self.has_value.push(false);
        self.grads.push(None);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            needs_grad,
        });
        if !is_leaf {
            self.ran_forward = false;
        }
        id
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn check_rank(&self, id: NodeId, rank: usize, role: &str) -> Result<(), GraphError> {
        if self.shape_of(id).len() != rank {
            return Err(GraphError::Shape(alloc::format!(
                "{} must have rank {}, got shape {:?}",
                role,
                rank,
                self.shape_of(id)
            )));
        }
        Ok(())
    }

    // ---- leaves ------------------------------------------------------

    pub fn input(
        &mut self,
        name: &str,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<NodeId, GraphError> {
        if let Some(&id) = self.input_ids.get(name) {
            if self.shape_of(id) != shape {
                return Err(GraphError::Shape(alloc::format!(
                    "input '{}' redeclared with shape {:?}, had {:?}",
                    name,
                    shape,
                    self.shape_of(id)
                )));
            }
            return Ok(id);
        }
        let id = self.push(Op::Input { requires_grad }, vec![], shape.to_vec());
        self.input_ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        let id = self.push(Op::Const, vec![], shape);
        self.values[id.0] = value;
        self.has_value[id.0] = true;
        id
    }

    /// Snapshot a named parameter value as a differentiable leaf. Repeated
    /// requests for the same name return the same node.
    pub fn param_leaf(&mut self, name: &str, value: Tensor) -> NodeId {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let shape = value.shape().to_vec();
        let id = self.push(Op::Param, vec![], shape);
        self.values[id.0] = value;
        self.has_value[id.0] = true;
        self.param_ids.insert(name.to_string(), id);
        id
    }

    pub fn set_input(&mut self, name: &str, value: Tensor) -> Result<(), GraphError> {
        let id = *self
            .input_ids
            .get(name)
            .ok_or_else(|| GraphError::UnknownName(name.to_string()))?;
        if value.shape() != self.shape_of(id) {
            return Err(GraphError::Shape(alloc::format!(
                "input '{}' expects shape {:?}, got {:?}",
                name,
                self.shape_of(id),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        self.has_value[id.0] = true;
        self.ran_forward = false;
        Ok(())
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.output_ids.insert(name.to_string(), id);
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.output_ids.get(name).copied()
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.param_ids.get(name).copied()
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.input_ids.get(name).copied()
    }

    /// Mutable access to a leaf's stored data (finite-difference probing).
    pub fn leaf_data_mut(&mut self, id: NodeId) -> Result<&mut [f64], GraphError> {
        if !self.nodes[id.0].op.is_leaf() {
            return Err(GraphError::Shape(alloc::format!(
                "{} node {} is not a leaf",
                self.nodes[id.0].op.kind(),
                id.0
            )));
        }
        Ok(self.values[id.0].data_mut())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    // ---- ops ---------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        self.check_rank(x, 3, "conv2d input")?;
        self.check_rank(w, 4, "conv2d weight")?;
        self.check_rank(b, 1, "conv2d bias")?;
        let (xs, ws, bs) = (self.shape_of(x), self.shape_of(w), self.shape_of(b));
        if ws[1] != xs[0] {
            return Err(GraphError::Shape(alloc::format!(
                "conv2d: weight expects {} input channels, input has {}",
                ws[1],
                xs[0]
            )));
        }
        if bs[0] != ws[0] {
            return Err(GraphError::Shape(alloc::format!(
                "conv2d: bias has {} channels, weight produces {}",
                bs[0],
                ws[0]
            )));
        }
        let dims = ConvDims::new(xs[0], xs[1], xs[2], ws[0], ws[2], ws[3], stride, pad)
            .ok_or_else(|| {
                GraphError::Shape(alloc::format!(
                    "conv2d: kernel {}x{} stride {} pad {} does not fit input {:?}",
                    ws[2],
                    ws[3],
                    stride,
                    pad,
                    xs
                ))
            })?;
        let shape = vec![dims.cout, dims.ho, dims.wo];
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, w, b], shape))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.check_rank(x, 3, "upsample input")?;
        let s = self.shape_of(x);
        let shape = vec![s[0], s[1] * 2, s[2] * 2];
        Ok(self.push(Op::Upsample2x, vec![x], shape))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Relu, vec![x], shape)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Sigmoid, vec![x], shape)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, GraphError> {
        let shape = self.shape_of(x).to_vec();
        if axis >= shape.len() {
            return Err(GraphError::Shape(alloc::format!(
                "softmax axis {} out of range for shape {:?}",
                axis,
                shape
            )));
        }
        Ok(self.push(Op::Softmax { axis }, vec![x], shape))
    }

    pub fn instance_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, GraphError> {
        self.check_rank(x, 3, "instance_norm input")?;
        self.check_rank(gamma, 1, "instance_norm gamma")?;
        self.check_rank(beta, 1, "instance_norm beta")?;
        let c = self.shape_of(x)[0];
        if self.shape_of(gamma)[0] != c || self.shape_of(beta)[0] != c {
            return Err(GraphError::Shape(alloc::format!(
                "instance_norm: gamma/beta must have {} channels",
                c
            )));
        }
        let shape = self.shape_of(x).to_vec();
        Ok(self.push(Op::InstanceNorm { eps }, vec![x, gamma, beta], shape))
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let shape = broadcast_shape(self.shape_of(a), self.shape_of(b))?;
        Ok(self.push(op, vec![a, b], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(Op::Mul, a, b)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Scale { factor }, vec![x], shape)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check_rank(x, 2, "linear input")?;
        self.check_rank(w, 2, "linear weight")?;
        self.check_rank(b, 1, "linear bias")?;
        let (xs, ws) = (self.shape_of(x), self.shape_of(w));
        if ws[1] != xs[1] {
            return Err(GraphError::Shape(alloc::format!(
                "linear: weight expects {} features, input has {}",
                ws[1],
                xs[1]
            )));
        }
        if self.shape_of(b)[0] != ws[0] {
            return Err(GraphError::Shape("linear: bias/weight mismatch".to_string()));
        }
        let shape = vec![xs[0], ws[0]];
        Ok(self.push(Op::Linear, vec![x, w, b], shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check_rank(a, 2, "matmul lhs")?;
        self.check_rank(b, 2, "matmul rhs")?;
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa[1] != sb[0] {
            return Err(GraphError::Shape(alloc::format!(
                "matmul: inner dims {} vs {}",
                sa[1],
                sb[0]
            )));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul, vec![a, b], shape))
    }

    /// Sample `map` ([C,H,W]) at pixel coordinates `coords` ([N,2] as (u,v),
    /// u along W, v along H). Out-of-map corners contribute zero.
    pub fn bilinear_sample(&mut self, map: NodeId, coords: NodeId) -> Result<NodeId, GraphError> {
        self.check_rank(map, 3, "bilinear map")?;
        self.check_rank(coords, 2, "bilinear coords")?;
        if self.shape_of(coords)[1] != 2 {
            return Err(GraphError::Shape(
                "bilinear coords must be [N,2]".to_string(),
            ));
        }
        let shape = vec![self.shape_of(coords)[0], self.shape_of(map)[0]];
        Ok(self.push(Op::BilinearSample, vec![map, coords], shape))
    }

    /// Sum per-point features ([N,C]) into a [C,H,W] grid. `cells` holds the
    /// flat spatial index per point, -1 for points outside the grid.
    pub fn scatter_add(
        &mut self,
        feats: NodeId,
        cells: Vec<i64>,
        height: usize,
        width: usize,
    ) -> Result<NodeId, GraphError> {
        self.check_rank(feats, 2, "scatter features")?;
        let fs = self.shape_of(feats);
        if cells.len() != fs[0] {
            return Err(GraphError::Shape(alloc::format!(
                "scatter_add: {} cells for {} points",
                cells.len(),
                fs[0]
            )));
        }
        let max = (height * width) as i64;
        if cells.iter().any(|&c| c >= max) {
            return Err(GraphError::Shape("scatter_add: cell out of grid".to_string()));
        }
        let shape = vec![fs[1], height, width];
        Ok(self.push(Op::ScatterAdd { height, width, cells }, vec![feats], shape))
    }

    /// Reorder the rows of a [N,C] matrix: row r of the output is row
    /// `indices[r]` of the input. Indices may repeat; gradient scatters back.
    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId, GraphError> {
        self.check_rank(x, 2, "gather_rows input")?;
        let xs = self.shape_of(x);
        if indices.iter().any(|&r| r >= xs[0]) {
            return Err(GraphError::Shape(alloc::format!(
                "gather_rows: index out of range for {} rows",
                xs[0]
            )));
        }
        let shape = vec![indices.len(), xs[1]];
        Ok(self.push(Op::GatherRows { indices }, vec![x], shape))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::Shape("concat of zero tensors".to_string()));
        }
        let base = self.shape_of(parts[0]).to_vec();
        if axis >= base.len() {
            return Err(GraphError::Shape(alloc::format!(
                "concat axis {} out of range for {:?}",
                axis,
                base
            )));
        }
        let mut total = base[axis];
        for &p in &parts[1..] {
            let s = self.shape_of(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(base.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(GraphError::Shape(alloc::format!(
                    "concat: shape {:?} incompatible with {:?} on axis {}",
                    s,
                    base,
                    axis
                )));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), shape))
    }

    pub fn slice(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, GraphError> {
        let s = self.shape_of(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(GraphError::Shape(alloc::format!(
                "slice [{}, {}+{}) out of range for {:?}",
                axis,
                start,
                len,
                s
            )));
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Op::Slice { axis, start, len }, vec![x], shape))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        if numel_of(shape) != numel_of(self.shape_of(x)) {
            return Err(GraphError::Shape(alloc::format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape_of(x),
                shape
            )));
        }
        Ok(self.push(Op::Reshape, vec![x], shape.to_vec()))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId, GraphError> {
        let s = self.shape_of(x);
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || mem::replace(&mut seen[p], true)) {
            return Err(GraphError::Shape(alloc::format!(
                "permute {:?} invalid for shape {:?}",
                perm,
                s
            )));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(Op::Permute { perm: perm.to_vec() }, vec![x], shape))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.check_rank(x, 3, "global_avg_pool input")?;
        let shape = vec![self.shape_of(x)[0]];
        Ok(self.push(Op::GlobalAvgPool, vec![x], shape))
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, GraphError> {
        let s = self.shape_of(x).to_vec();
        if axis >= s.len() {
            return Err(GraphError::Shape(alloc::format!(
                "sum_axis {} out of range for {:?}",
                axis,
                s
            )));
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(Op::SumAxis { axis }, vec![x], shape))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanAll, vec![x], vec![1])
    }

    pub fn bce_with_logits(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId, GraphError> {
        if self.shape_of(logits) != self.shape_of(target) {
            return Err(GraphError::Shape(alloc::format!(
                "bce: logits {:?} vs target {:?}",
                self.shape_of(logits),
                self.shape_of(target)
            )));
        }
        Ok(self.push(Op::BceWithLogits, vec![logits, target], vec![1]))
    }

    pub fn dice_with_logits(
        &mut self,
        logits: NodeId,
        target: NodeId,
        smooth: f64,
    ) -> Result<NodeId, GraphError> {
        if self.shape_of(logits) != self.shape_of(target) {
            return Err(GraphError::Shape(alloc::format!(
                "dice: logits {:?} vs target {:?}",
                self.shape_of(logits),
                self.shape_of(target)
            )));
        }
        Ok(self.push(Op::DiceWithLogits { smooth }, vec![logits, target], vec![1]))
    }

    // ---- execution ---------------------------------------------------

    /// Evaluate every node in order from the current leaf values.
    pub fn run_forward(&mut self) -> Result<(), GraphError> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].op.is_leaf() {
                if !self.has_value[i] {
                    if let Op::Input { .. } = self.nodes[i].op {
                        let name = self
                            .input_ids
                            .iter()
                            .find(|(_, id)| id.0 == i)
                            .map(|(n, _)| n.clone())
                            .unwrap_or_default();
                        return Err(GraphError::MissingInput(name));
                    }
                }
                continue;
            }
            let out = self.compute(i)?;
            debug_assert_eq!(out.shape(), &self.nodes[i].shape[..]);
            self.values[i] = out;
            self.has_value[i] = true;
        }
        self.ran_forward = true;
        for g in self.grads.iter_mut() {
            *g = None;
        }
        Ok(())
    }

    /// Bind named inputs, evaluate, and return the named outputs.
    pub fn forward(
        &mut self,
        inputs: &BTreeMap<String, Tensor>,
    ) -> Result<BTreeMap<String, Tensor>, GraphError> {
        for (name, value) in inputs {
            self.set_input(name, value.clone())?;
        }
        self.run_forward()?;
        let mut out = BTreeMap::new();
        for (name, id) in &self.output_ids {
            out.insert(name.clone(), self.values[id.0].clone());
        }
        Ok(out)
    }

    /// Seed gradients on named outputs and propagate to every leaf.
    /// Returns gradients for differentiable inputs and all parameters.
    pub fn backward(
        &mut self,
        output_grads: &BTreeMap<String, Tensor>,
    ) -> Result<Gradients, GraphError> {
        let mut seeds = Vec::new();
        for (name, grad) in output_grads {
            let id = *self
                .output_ids
                .get(name)
                .ok_or_else(|| GraphError::UnknownName(name.clone()))?;
            seeds.push((id, grad.clone()));
        }
        self.backward_seeded(&seeds)?;
        let mut grads = Gradients::default();
        for (name, id) in &self.input_ids {
            if self.nodes[id.0].needs_grad {
                let g = self.grads[id.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&self.nodes[id.0].shape));
                grads.inputs.insert(name.clone(), g);
            }
        }
        for (name, id) in &self.param_ids {
            let g = self.grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&self.nodes[id.0].shape));
            grads.params.insert(name.clone(), g);
        }
        Ok(grads)
    }

    /// Seed a single node's gradient and propagate it to the leaves.
    pub fn backward_node(&mut self, id: NodeId, seed: &Tensor) -> Result<(), GraphError> {
        self.backward_seeded(&[(id, seed.clone())])
    }

    fn backward_seeded(&mut self, seeds: &[(NodeId, Tensor)]) -> Result<(), GraphError> {
        if !self.ran_forward {
            return Err(GraphError::BackwardBeforeForward);
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        for (id, grad) in seeds {
            if grad.shape() != self.shape_of(*id) {
                return Err(GraphError::Shape(alloc::format!(
                    "seed grad for node {} expects shape {:?}, got {:?}",
                    id.0,
                    self.shape_of(*id),
                    grad.shape()
                )));
            }
            accumulate(&mut self.grads[id.0], grad.data(), grad.shape());
        }
        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || self.nodes[i].op.is_leaf() {
                continue;
            }
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i)?;
        }
        Ok(())
    }

    fn compute(&self, i: usize) -> Result<Tensor, GraphError> {
        let node = &self.nodes[i];
        let val = |k: usize| &self.values[node.inputs[k].0];
        let mut out = Tensor::zeros(&node.shape);
        match &node.op {
            Op::Input { .. } | Op::Param | Op::Const => unreachable!(),
            Op::Conv2d { stride, pad } => {
                let (x, w, b) = (val(0), val(1), val(2));
                let ws = w.shape();
                let xs = x.shape();
                let dims = ConvDims::new(xs[0], xs[1], xs[2], ws[0], ws[2], ws[3], *stride, *pad)
                    .expect("checked at build");
                kernels::conv2d_forward(x.data(), w.data(), b.data(), &dims, out.data_mut());
            }
            Op::Upsample2x => {
                let x = val(0);
                let (c, h, w) = dims3(x.shape());
                let y = out.data_mut();
                for ch in 0..c {
                    for r in 0..h {
                        for col in 0..w {
                            let v = x.data()[(ch * h + r) * w + col];
                            let base = (ch * 2 * h + 2 * r) * 2 * w + 2 * col;
                            y[base] = v;
                            y[base + 1] = v;
                            y[base + 2 * w] = v;
                            y[base + 2 * w + 1] = v;
                        }
                    }
                }
            }
            Op::Relu => {
                for (o, &v) in out.data_mut().iter_mut().zip(val(0).data()) {
                    *o = if v > 0.0 { v } else { 0.0 };
                }
            }
            Op::Sigmoid => {
                for (o, &v) in out.data_mut().iter_mut().zip(val(0).data()) {
                    *o = kernels::sigmoid(v);
                }
            }
            Op::Softmax { axis } => {
                softmax_forward(val(0), *axis, &mut out);
            }
            Op::InstanceNorm { eps } => {
                let (x, gamma, beta) = (val(0), val(1), val(2));
                let (c, h, w) = dims3(x.shape());
                let m = h * w;
                for ch in 0..c {
                    let xc = &x.data()[ch * m..(ch + 1) * m];
                    let mean = xc.iter().sum::<f64>() / m as f64;
                    let var = xc.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                    for (o, &v) in out.data_mut()[ch * m..(ch + 1) * m].iter_mut().zip(xc) {
                        *o = (v - mean) * inv * g + b;
                    }
                }
            }
            Op::Add => bcast_binary(val(0), val(1), &mut out, |a, b| a + b),
            Op::Sub => bcast_binary(val(0), val(1), &mut out, |a, b| a - b),
            Op::Mul => bcast_binary(val(0), val(1), &mut out, |a, b| a * b),
            Op::Scale { factor } => {
                for (o, &v) in out.data_mut().iter_mut().zip(val(0).data()) {
                    *o = factor * v;
                }
            }
            Op::Linear => {
                let (x, w, b) = (val(0), val(1), val(2));
                let (n, cin) = (x.shape()[0], x.shape()[1]);
                let cout = w.shape()[0];
                let y = out.data_mut();
                for r in 0..n {
                    y[r * cout..(r + 1) * cout].copy_from_slice(b.data());
                }
                kernels::matmul_abt_acc(y, x.data(), w.data(), n, cin, cout);
            }
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                kernels::matmul_acc(out.data_mut(), a.data(), b.data(), m, k, n);
            }
            Op::BilinearSample => {
                let (map, coords) = (val(0), val(1));
                if !coords.all_finite() {
                    return Err(GraphError::NonFinite(alloc::format!(
                        "bilinear_sample (node {}): non-finite coordinates",
                        i
                    )));
                }
                bilinear_forward(map, coords, &mut out);
            }
            Op::ScatterAdd { height, width, cells } => {
                let feats = val(0);
                let c = feats.shape()[1];
                let hw = height * width;
                let y = out.data_mut();
                for (n, &cell) in cells.iter().enumerate() {
                    if cell < 0 {
                        continue;
                    }
                    let cell = cell as usize;
                    for ch in 0..c {
                        y[ch * hw + cell] += feats.data()[n * c + ch];
                    }
                }
            }
            Op::GatherRows { indices } => {
                let x = val(0);
                let c = x.shape()[1];
                for (r, &src) in indices.iter().enumerate() {
                    out.data_mut()[r * c..(r + 1) * c]
                        .copy_from_slice(&x.data()[src * c..(src + 1) * c]);
                }
            }
            Op::Concat { axis } => {
                let inner: usize = node.shape[axis + 1..].iter().product();
                let outer: usize = node.shape[..*axis].iter().product();
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let part = val(k);
                    let span = part.shape()[*axis] * inner;
                    for o in 0..outer {
                        out.data_mut()[o * total + offset..o * total + offset + span]
                            .copy_from_slice(&part.data()[o * span..(o + 1) * span]);
                    }
                    offset += span;
                }
            }
            Op::Slice { axis, start, len } => {
                let xs = self.shape_of(node.inputs[0]);
                let inner: usize = xs[axis + 1..].iter().product();
                let outer: usize = xs[..*axis].iter().product();
                let total = xs[*axis] * inner;
                let span = len * inner;
                let x = val(0);
                for o in 0..outer {
                    out.data_mut()[o * span..(o + 1) * span].copy_from_slice(
                        &x.data()[o * total + start * inner..o * total + start * inner + span],
                    );
                }
            }
            Op::Reshape => {
                out.data_mut().copy_from_slice(val(0).data());
            }
            Op::Permute { perm } => {
                permute_into(val(0), perm, &mut out);
            }
            Op::GlobalAvgPool => {
                let x = val(0);
                let (c, h, w) = dims3(x.shape());
                let m = (h * w) as f64;
                for ch in 0..c {
                    out.data_mut()[ch] =
                        x.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / m;
                }
            }
            Op::SumAxis { axis } => {
                let xs = self.shape_of(node.inputs[0]);
                let inner: usize = xs[axis + 1..].iter().product();
                let outer: usize = xs[..*axis].iter().product();
                let lane = xs[*axis];
                let x = val(0).data();
                let y = out.data_mut();
                for o in 0..outer {
                    for l in 0..lane {
                        let src = &x[(o * lane + l) * inner..(o * lane + l + 1) * inner];
                        let dst = &mut y[o * inner..(o + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MeanAll => {
                let x = val(0);
                out.data_mut()[0] = x.data().iter().sum::<f64>() / x.numel().max(1) as f64;
            }
            Op::BceWithLogits => {
                let (s, y) = (val(0), val(1));
                let n = s.numel().max(1) as f64;
                let mut acc = 0.0;
                for (&sv, &yv) in s.data().iter().zip(y.data()) {
                    acc += sv.max(0.0) - sv * yv + kernels::softplus(-sv.abs());
                }
                out.data_mut()[0] = acc / n;
            }
            Op::DiceWithLogits { smooth } => {
                let (s, y) = (val(0), val(1));
                let mut inter = 0.0;
                let mut total = 0.0;
                for (&sv, &yv) in s.data().iter().zip(y.data()) {
                    let p = kernels::sigmoid(sv);
                    inter += p * yv;
                    total += p + yv;
                }
                out.data_mut()[0] = 1.0 - (2.0 * inter + smooth) / (total + smooth);
            }
        }
        Ok(out)
    }

    fn propagate(&mut self, i: usize) -> Result<(), GraphError> {
        let dy = self.grads[i].take().expect("grad present");
        let node = self.nodes[i].clone();
        let needs = |g: &Graph, k: usize| g.nodes[node.inputs[k].0].needs_grad;
        match &node.op {
            Op::Input { .. } | Op::Param | Op::Const => unreachable!(),
            Op::Conv2d { stride, pad } => {
                let x = self.values[node.inputs[0].0].clone();
                let w = self.values[node.inputs[1].0].clone();
                let ws = w.shape();
                let xs = x.shape();
                let dims = ConvDims::new(xs[0], xs[1], xs[2], ws[0], ws[2], ws[3], *stride, *pad)
                    .expect("checked at build");
                let mut dx = needs(self, 0).then(|| vec![0.0; x.numel()]);
                let mut dw = needs(self, 1).then(|| vec![0.0; w.numel()]);
                let mut db = needs(self, 2).then(|| vec![0.0; ws[0]]);
                kernels::conv2d_backward(
                    x.data(),
                    w.data(),
                    dy.data(),
                    &dims,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.add_grad(node.inputs[0], &dx);
                }
                if let Some(dw) = dw {
                    self.add_grad(node.inputs[1], &dw);
                }
                if let Some(db) = db {
                    self.add_grad(node.inputs[2], &db);
                }
            }
            Op::Upsample2x => {
                if needs(self, 0) {
                    let (c, h2, w2) = dims3(&node.shape);
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut dx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for r in 0..h2 {
                            for col in 0..w2 {
                                dx[(ch * h + r / 2) * w + col / 2] +=
                                    dy.data()[(ch * h2 + r) * w2 + col];
                            }
                        }
                    }
                    self.add_grad(node.inputs[0], &dx);
                }
            }
            Op::Relu => {
                if needs(self, 0) {
                    let x = &self.values[node.inputs[0].0];
                    let dx: Vec<f64> = x
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.add_grad(node.inputs[0], &dx);
                }
            }
            Op::Sigmoid => {
                if needs(self, 0) {
                    let y = &self.values[i];
                    let dx: Vec<f64> = y
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| g * v * (1.0 - v))
                        .collect();
                    self.add_grad(node.inputs[0], &dx);
                }
            }
            Op::Softmax { axis } => {
                if needs(self, 0) {
                    let y = self.values[i].clone();
                    let dx = softmax_backward(&y, &dy, *axis);
                    self.add_grad(node.inputs[0], &dx);
                }
            }
            Op::InstanceNorm { eps } => {
                let x = self.values[node.inputs[0].0].clone();
                let gamma = self.values[node.inputs[1].0].clone();
                let (c, h, w) = dims3(x.shape());
                let m = h * w;
                let mf = m as f64;
                let mut dx = needs(self, 0).then(|| vec![0.0; x.numel()]);
                let mut dg = needs(self, 1).then(|| vec![0.0; c]);
                let mut db = needs(self, 2).then(|| vec![0.0; c]);
                for ch in 0..c {
                    let xc = &x.data()[ch * m..(ch + 1) * m];
                    let gyc = &dy.data()[ch * m..(ch + 1) * m];
                    let mean = xc.iter().sum::<f64>() / mf;
                    let var = xc.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / mf;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for (&xv, &gv) in xc.iter().zip(gyc) {
                        sum_dy += gv;
                        sum_dy_xhat += gv * (xv - mean) * inv;
                    }
                    if let Some(dg) = dg.as_deref_mut() {
                        dg[ch] += sum_dy_xhat;
                    }
                    if let Some(db) = db.as_deref_mut() {
                        db[ch] += sum_dy;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let g = gamma.data()[ch];
                        for k in 0..m {
                            let xhat = (xc[k] - mean) * inv;
                            dx[ch * m + k] += g
                                * inv
                                * (gyc[k] - sum_dy / mf - xhat * sum_dy_xhat / mf);
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.add_grad(node.inputs[0], &dx);
                }
                if let Some(dg) = dg {
                    self.add_grad(node.inputs[1], &dg);
                }
                if let Some(db) = db {
                    self.add_grad(node.inputs[2], &db);
                }
            }
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                for (k, sgn) in [(0usize, 1.0), (1usize, sign)] {
                    if needs(self, k) {
                        let target = self.nodes[node.inputs[k].0].shape.clone();
                        let mut dk = reduce_to_shape(dy.data(), &node.shape, &target);
                        if sgn < 0.0 {
                            for v in dk.iter_mut() {
                                *v = -*v;
                            }
                        }
                        self.add_grad(node.inputs[k], &dk);
                    }
                }
            }
            Op::Mul => {
                for (k, other) in [(0usize, 1usize), (1usize, 0usize)] {
                    if needs(self, k) {
                        let ov = self.values[node.inputs[other].0].clone();
                        let mut prod = Tensor::zeros(&node.shape);
                        bcast_binary_ref(&dy, &ov, &node.shape, &mut prod, |a, b| a * b);
                        let target = self.nodes[node.inputs[k].0].shape.clone();
                        let dk = reduce_to_shape(prod.data(), &node.shape, &target);
                        self.add_grad(node.inputs[k], &dk);
                    }
                }
            }
            Op::Scale { factor } => {
                if needs(self, 0) {
                    let dx: Vec<f64> = dy.data().iter().map(|&g| g * factor).collect();
                    self.add_grad(node.inputs[0], &dx);
                }
            }
            Op::Linear => {
                let x = self.values[node.inputs[0].0].clone();
                let w = self.values[node.inputs[1].0].clone();
                let (n, cin) = (x.shape()[0], x.shape()[1]);
                let cout = w.shape()[0];
                if needs(self, 0) {
                    let mut dx = vec![0.0; n * cin];
                    kernels::matmul_acc(&mut dx, dy.data(), w.data(), n, cout, cin);
                    self.add_grad(node.inputs[0], &dx);
                }
                if needs(self, 1) {
                    let mut dw = vec![0.0; cout * cin];
                    kernels::matmul_atb_acc(&mut dw, dy.data(), x.data(), cout, n, cin);
                    self.add_grad(node.inputs[1], &dw);
                }
                if needs(self, 2) {
                    let mut db = vec![0.0; cout];
                    for r in 0..n {
                        for c in 0..cout {
                            db[c] += dy.data()[r * cout + c];
                        }
                    }
                    self.add_grad(node.inputs[2], &db);
                }
            }
            Op::MatMul => {
                let a = self.values[node.inputs[0].0].clone();
                let b = self.values[node.inputs[1].0].clone();
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if needs(self, 0) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_abt_acc(&mut da, dy.data(), b.data(), m, n, k);
                    self.add_grad(node.inputs[0], &da);
                }
                if needs(self, 1) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_atb_acc(&mut db, a.data(), dy.data(), k, m, n);
                    self.add_grad(node.inputs[1], &db);
                }
            }
            Op::BilinearSample => {
                let map = self.values[node.inputs[0].0].clone();
                let coords = self.values[node.inputs[1].0].clone();
                let mut dmap = needs(self, 0).then(|| vec![0.0; map.numel()]);
                let mut dcoords = needs(self, 1).then(|| vec![0.0; coords.numel()]);
                bilinear_backward(&map, &coords, &dy, dmap.as_deref_mut(), dcoords.as_deref_mut());
                if let Some(dmap) = dmap {
                    self.add_grad(node.inputs[0], &dmap);
                }
                if let Some(dcoords) = dcoords {
                    self.add_grad(node.inputs[1], &dcoords);
                }
            }
            Op::ScatterAdd { height, width, cells } => {
                if needs(self, 0) {
                    let c = node.shape[0];
                    let hw = height * width;
                    let mut df = vec![0.0; cells.len() * c];
                    for (n, &cell) in cells.iter().enumerate() {
                        if cell < 0 {
                            continue;
                        }
                        for ch in 0..c {
                            df[n * c + ch] = dy.data()[ch * hw + cell as usize];
                        }
                    }
                    self.add_grad(node.inputs[0], &df);
                }
            }
            Op::GatherRows { indices } => {
                if needs(self, 0) {
                    let xs = self.nodes[node.inputs[0].0].shape.clone();
                    let c = xs[1];
                    let mut dx = vec![0.0; xs[0] * c];
                    for (r, &src) in indices.iter().enumerate() {
                        for k in 0..c {
                            dx[src * c + k] += dy.data()[r * c + k];
                        }
                    }
                    self.add_grad(node.inputs[0], &dx);
                }
            }
            Op::Concat { axis } => {
                let inner: usize = node.shape[axis + 1..].iter().product();
                let outer: usize = node.shape[..*axis].iter().product();
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let ps = self.nodes[node.inputs[k].0].shape.clone();
                    let span = ps[*axis] * inner;
                    if needs(self, k) {
                        let mut dk = vec![0.0; outer * span];
                        for o in 0..outer {
                            dk[o * span..(o + 1) * span].copy_from_slice(
                                &dy.data()[o * total + offset..o * total + offset + span],
                            );
                        }
                        self.add_grad(node.inputs[k], &dk);
                    }
                    offset += span;
                }
            }
            Op::Slice { axis, start, len } => {
                if needs(self, 0) {
                    let xs = self.nodes[node.inputs[0].0].shape.clone();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let outer: usize = xs[..*axis].iter().product();
                    let total = xs[*axis] * inner;
                    let span = len * inner;
                    let mut dx = vec![0.0; outer * total];
                    for o in 0..outer {
                        dx[o * total + start * inner..o * total + start * inner + span]
                            .copy_from_slice(&dy.data()[o * span..(o + 1) * span]);
                    }
                    self.add_grad(node.inputs[0], &dx);
                }
            }
            Op::Reshape => {
                if needs(self, 0) {
                    self.add_grad(node.inputs[0], dy.data());
                }
            }
            Op::Permute { perm } => {
                if needs(self, 0) {
                    let mut inv = vec![0; perm.len()];
                    for (k, &p) in perm.iter().enumerate() {
                        inv[p] = k;
                    }
                    let mut dx = Tensor::zeros(&self.nodes[node.inputs[0].0].shape);
                    permute_into(&dy, &inv, &mut dx);
                    self.add_grad(node.inputs[0], dx.data());
                }
            }
            Op::GlobalAvgPool => {
                if needs(self, 0) {
                    let xs = self.nodes[node.inputs[0].0].shape.clone();
                    let (c, h, w) = dims3(&xs);
                    let m = (h * w) as f64;
                    let mut dx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        let g = dy.data()[ch] / m;
                        for v in dx[ch * h * w..(ch + 1) * h * w].iter_mut() {
                            *v = g;
                        }
                    }
                    self.add_grad(node.inputs[0], &dx);
                }
            }
            Op::SumAxis { axis } => {
                if needs(self, 0) {
                    let xs = self.nodes[node.inputs[0].0].shape.clone();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let outer: usize = xs[..*axis].iter().product();
                    let lane = xs[*axis];
                    let mut dx = vec![0.0; outer * lane * inner];
                    for o in 0..outer {
                        for l in 0..lane {
                            dx[(o * lane + l) * inner..(o * lane + l + 1) * inner]
                                .copy_from_slice(&dy.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    self.add_grad(node.inputs[0], &dx);
                }
            }
            Op::MeanAll => {
                if needs(self, 0) {
                    let n = self.values[node.inputs[0].0].numel();
                    let g = dy.data()[0] / n.max(1) as f64;
                    let dx = vec![g; n];
                    self.add_grad(node.inputs[0], &dx);
                }
            }
            Op::BceWithLogits => {
                if needs(self, 0) {
                    let s = self.values[node.inputs[0].0].clone();
                    let y = self.values[node.inputs[1].0].clone();
                    let n = s.numel().max(1) as f64;
                    let g = dy.data()[0] / n;
                    let dx: Vec<f64> = s
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&sv, &yv)| g * (kernels::sigmoid(sv) - yv))
                        .collect();
                    self.add_grad(node.inputs[0], &dx);
                }
            }
            Op::DiceWithLogits { smooth } => {
                if needs(self, 0) {
                    let s = self.values[node.inputs[0].0].clone();
                    let y = self.values[node.inputs[1].0].clone();
                    let mut inter = 0.0;
                    let mut total = 0.0;
                    let probs: Vec<f64> = s.data().iter().map(|&v| kernels::sigmoid(v)).collect();
                    for (p, &yv) in probs.iter().zip(y.data()) {
                        inter += p * yv;
                        total += p + yv;
                    }
                    let denom = total + smooth;
                    let g = dy.data()[0];
                    let dx: Vec<f64> = probs
                        .iter()
                        .zip(y.data())
                        .map(|(&p, &yv)| {
                            let dp = -(2.0 * yv * denom - (2.0 * inter + smooth)) / (denom * denom);
                            g * dp * p * (1.0 - p)
                        })
                        .collect();
                    self.add_grad(node.inputs[0], &dx);
                }
            }
        }
        self.grads[i] = Some(dy);
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, data: &[f64]) {
        let shape = self.nodes[id.0].shape.clone();
        accumulate(&mut self.grads[id.0], data, &shape);
    }
}

fn accumulate(slot: &mut Option<Tensor>, data: &[f64], shape: &[usize]) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        None => {
            let mut t = Tensor::zeros(shape);
            t.data_mut().copy_from_slice(data);
            *slot = Some(t);
        }
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

fn softmax_forward(x: &Tensor, axis: usize, out: &mut Tensor) {
    let shape = x.shape();
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let xd = x.data();
    let yd = out.data_mut();
    for o in 0..outer {
        for k in 0..inner {
            let base = o * lane * inner + k;
            let mut max = f64::NEG_INFINITY;
            for l in 0..lane {
                max = max.max(xd[base + l * inner]);
            }
            let mut sum = 0.0;
            for l in 0..lane {
                let e = libm::exp(xd[base + l * inner] - max);
                yd[base + l * inner] = e;
                sum += e;
            }
            for l in 0..lane {
                yd[base + l * inner] /= sum;
            }
        }
    }
}

fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Vec<f64> {
    let shape = y.shape();
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let mut dx = vec![0.0; y.numel()];
    for o in 0..outer {
        for k in 0..inner {
            let base = o * lane * inner + k;
            let mut dot = 0.0;
            for l in 0..lane {
                dot += y.data()[base + l * inner] * dy.data()[base + l * inner];
            }
            for l in 0..lane {
                let idx = base + l * inner;
                dx[idx] = y.data()[idx] * (dy.data()[idx] - dot);
            }
        }
    }
    dx
}

fn bilinear_forward(map: &Tensor, coords: &Tensor, out: &mut Tensor) {
    let (c, h, w) = dims3(map.shape());
    let n = coords.shape()[0];
    let md = map.data();
    let od = out.data_mut();
    for p in 0..n {
        let u = coords.data()[p * 2];
        let v = coords.data()[p * 2 + 1];
        let x0 = libm::floor(u);
        let y0 = libm::floor(v);
        let fx = u - x0;
        let fy = v - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let corners = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x0 + 1, (1.0 - fy) * fx),
            (y0 + 1, x0, fy * (1.0 - fx)),
            (y0 + 1, x0 + 1, fy * fx),
        ];
        for ch in 0..c {
            let mut acc = 0.0;
            for &(cy, cx, wt) in &corners {
                if cy >= 0 && cy < h as i64 && cx >= 0 && cx < w as i64 {
                    acc += wt * md[(ch * h + cy as usize) * w + cx as usize];
                }
            }
            od[p * c + ch] = acc;
        }
    }
}

fn bilinear_backward(
    map: &Tensor,
    coords: &Tensor,
    dy: &Tensor,
    mut dmap: Option<&mut [f64]>,
    mut dcoords: Option<&mut [f64]>,
) {
    let (c, h, w) = dims3(map.shape());
    let n = coords.shape()[0];
    let md = map.data();
    let fetch = |cy: i64, cx: i64, ch: usize| -> f64 {
        if cy >= 0 && cy < h as i64 && cx >= 0 && cx < w as i64 {
            md[(ch * h + cy as usize) * w + cx as usize]
        } else {
            0.0
        }
    };
    for p in 0..n {
        let u = coords.data()[p * 2];
        let v = coords.data()[p * 2 + 1];
        let x0f = libm::floor(u);
        let y0f = libm::floor(v);
        let fx = u - x0f;
        let fy = v - y0f;
        let (x0, y0) = (x0f as i64, y0f as i64);
        if let Some(dmap) = dmap.as_deref_mut() {
            let corners = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1, (1.0 - fy) * fx),
                (y0 + 1, x0, fy * (1.0 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ];
            for ch in 0..c {
                let g = dy.data()[p * c + ch];
                for &(cy, cx, wt) in &corners {
                    if cy >= 0 && cy < h as i64 && cx >= 0 && cx < w as i64 {
                        dmap[(ch * h + cy as usize) * w + cx as usize] += g * wt;
                    }
                }
            }
        }
        if let Some(dcoords) = dcoords.as_deref_mut() {
            let mut du = 0.0;
            let mut dv = 0.0;
            for ch in 0..c {
                let g = dy.data()[p * c + ch];
                let m00 = fetch(y0, x0, ch);
                let m01 = fetch(y0, x0 + 1, ch);
                let m10 = fetch(y0 + 1, x0, ch);
                let m11 = fetch(y0 + 1, x0 + 1, ch);
                du += g * ((1.0 - fy) * (m01 - m00) + fy * (m11 - m10));
                dv += g * ((1.0 - fx) * (m10 - m00) + fx * (m11 - m01));
            }
            dcoords[p * 2] += du;
            dcoords[p * 2 + 1] += dv;
        }
    }
}

fn bcast_binary(a: &Tensor, b: &Tensor, out: &mut Tensor, f: impl Fn(f64, f64) -> f64) {
    let shape = out.shape().to_vec();
    let mut tmp = Tensor::zeros(&shape);
    bcast_binary_ref(a, b, &shape, &mut tmp, f);
    out.data_mut().copy_from_slice(tmp.data());
}

fn bcast_binary_ref(
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    out: &mut Tensor,
    f: impl Fn(f64, f64) -> f64,
) {
    if a.shape() == b.shape() {
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            *o = f(x, y);
        }
        return;
    }
    let rank = out_shape.len();
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let sa = pad(a.shape());
    let sb = pad(b.shape());
    let stra = strides_of(&sa);
    let strb = strides_of(&sb);
    let total = numel_of(out_shape);
    let mut idx = vec![0usize; rank];
    for flat in 0..total {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank {
            if sa[d] != 1 {
                oa += idx[d] * stra[d];
            }
            if sb[d] != 1 {
                ob += idx[d] * strb[d];
            }
        }
        out.data_mut()[flat] = f(a.data()[oa], b.data()[ob]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sum `data` (of `from` shape) down to `to` shape over broadcast axes.
fn reduce_to_shape(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return data.to_vec();
    }
    let rank = from.len();
    let mut padded = vec![1; rank - to.len()];
    padded.extend_from_slice(to);
    let str_to = strides_of(&padded);
    let mut out = vec![0.0; numel_of(to)];
    let mut idx = vec![0usize; rank];
    for &v in data {
        let mut off = 0;
        for d in 0..rank {
            if padded[d] != 1 {
                off += idx[d] * str_to[d];
            }
        }
        out[off] += v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn permute_into(x: &Tensor, perm: &[usize], out: &mut Tensor) {
    let xs = x.shape();
    let rank = xs.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let str_x = strides_of(xs);
    let total = x.numel();
    let mut idx = vec![0usize; rank];
    let od = out.data_mut();
    for flat in 0..total {
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * str_x[perm[d]];
        }
        od[flat] = x.data()[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
