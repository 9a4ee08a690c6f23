//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every gradient produced by [`Graph::gradient`] is emitted as ordinary graph
//! nodes, so a gradient can itself be differentiated (double backprop).

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{self, ConvGeom, Tensor};
use super::GraphError;

type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Variable,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    /// 1-D input repeated along every axis of `shape` except `axis`.
    BroadcastAxis(NodeId, Vec<usize>, usize),
    /// Sum over every axis except `axis`, giving a 1-D result.
    ReduceToAxis(NodeId, usize),
    Sum(NodeId),
    /// One-element input repeated to fill the target shape.
    Expand(NodeId, Vec<usize>),
    /// `[r * g, d] -> [r, d]`, summing each run of `g` consecutive rows.
    ReduceGroups(NodeId, usize),
    /// `[r, d] -> [r * g, d]`, repeating each row `g` times.
    RepeatGroups(NodeId, usize),
    Relu(NodeId),
    ReluMask(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    ClampMask(NodeId, f64, f64),
    DropoutApply(NodeId, NodeId),
    Conv2d(NodeId, NodeId),
    Conv2dInputGrad(NodeId, NodeId),
    Conv2dKernelGrad(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Variable => "variable",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::BroadcastAxis(..) => "broadcast_axis",
            Op::ReduceToAxis(..) => "reduce_to_axis",
            Op::Sum(..) => "sum",
            Op::Expand(..) => "expand",
            Op::ReduceGroups(..) => "reduce_groups",
            Op::RepeatGroups(..) => "repeat_groups",
            Op::Relu(..) => "relu",
            Op::ReluMask(..) => "relu_mask",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Clamp(..) => "clamp",
            Op::ClampMask(..) => "clamp_mask",
            Op::DropoutApply(..) => "dropout_apply",
            Op::Conv2d(..) => "conv2d",
            Op::Conv2dInputGrad(..) => "conv2d_input_grad",
            Op::Conv2dKernelGrad(..) => "conv2d_kernel_grad",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Variable | Constant => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | DropoutApply(a, b)
            | Conv2d(a, b) | Conv2dInputGrad(a, b) | Conv2dKernelGrad(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | AddScalar(a, _) | Transpose(a) | Reshape(a, _)
            | BroadcastAxis(a, _, _) | ReduceToAxis(a, _) | Sum(a) | Expand(a, _)
            | ReduceGroups(a, _) | RepeatGroups(a, _) | Relu(a) | ReluMask(a) | Sigmoid(a)
            | Tanh(a) | Log(a) | Exp(a) | Clamp(a, _, _) | ClampMask(a, _, _) => vec![a],
        }
    }

    /// Ops whose output carries no gradient regardless of their inputs.
    fn is_piecewise_constant(&self) -> bool {
        matches!(self, Op::ReluMask(_) | Op::ClampMask(..))
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients returned by [`Graph::gradient`], keyed by the differentiated node.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    entries: Vec<(NodeId, NodeId)>,
}

impl GradientMap {
    pub fn get(&self, wrt: NodeId) -> Option<NodeId> {
        self.entries
            .iter()
            .find(|(v, _)| *v == wrt)
            .map(|&(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl std::ops::Index<NodeId> for GradientMap {
    type Output = NodeId;

    fn index(&self, wrt: NodeId) -> &NodeId {
        self.entries
            .iter()
            .find(|(v, _)| *v == wrt)
            .map(|(_, g)| g)
            .expect("no gradient recorded for node")
    }
}

/// An append-only computation graph. Node inputs always precede the node.
pub struct Graph {
    nodes: Vec<Node>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("seed", &self.seed)
            .finish()
    }
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    /// The value of a one-element node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.value(id).item().ok_or_else(|| GraphError::NotScalar {
            node: id.0,
            shape: self.shape(id).to_vec(),
        })
    }

    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Variable, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Constant, value, false)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        let inputs = op.inputs();
        if let Some(bad) = inputs.iter().find(|i| i.0 >= id) {
            return Err(GraphError::UnknownNode { node: bad.0 });
        }
        let value = compute(&op, &self.nodes).map_err(|detail| GraphError::Shape {
            node: id,
            op: op.name(),
            detail,
        })?;
        let requires_grad =
            !op.is_piecewise_constant() && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn broadcast_axis(&mut self, a: NodeId, shape: &[usize], axis: usize) -> Result<NodeId> {
        self.push(Op::BroadcastAxis(a, shape.to_vec(), axis))
    }

    pub fn reduce_to_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::ReduceToAxis(a, axis))
    }

    /// Sum of all elements, as a `[1]` node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(GraphError::Shape {
                node: self.nodes.len(),
                op: "mean",
                detail: "mean of an empty tensor".into(),
            });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn expand(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Expand(a, shape.to_vec()))
    }

    pub fn reduce_groups(&mut self, a: NodeId, group: usize) -> Result<NodeId> {
        self.push(Op::ReduceGroups(a, group))
    }

    pub fn repeat_groups(&mut self, a: NodeId, group: usize) -> Result<NodeId> {
        self.push(Op::RepeatGroups(a, group))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.push(Op::Clamp(a, lo, hi))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`. Identity unless `train`.
    pub fn dropout(&mut self, a: NodeId, rate: f64, train: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GraphError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(a).to_vec();
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = self.constant(Tensor::new(shape, mask));
        self.push(Op::DropoutApply(a, mask))
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.push(Op::Conv2d(x, kernel))
    }

    pub fn conv2d_input_grad(&mut self, gy: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.push(Op::Conv2dInputGrad(gy, kernel))
    }

    pub fn conv2d_kernel_grad(&mut self, x: NodeId, gy: NodeId) -> Result<NodeId> {
        self.push(Op::Conv2dKernelGrad(x, gy))
    }

    fn zeros_like(&mut self, id: NodeId) -> NodeId {
        let shape = self.shape(id).to_vec();
        self.constant(Tensor::zeros(&shape))
    }

    /// Reverse-mode gradient of a one-element node with respect to `wrt`.
    ///
    /// Gradients are built from graph ops, so every returned node may itself
    /// be differentiated. Nodes in `wrt` that `output` does not depend on get
    /// an all-zero constant of matching shape.
    pub fn gradient(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<GradientMap> {
        if output.0 >= self.nodes.len() {
            return Err(GraphError::UnknownNode { node: output.0 });
        }
        if self.value(output).len() != 1 {
            return Err(GraphError::NotScalar {
                node: output.0,
                shape: self.shape(output).to_vec(),
            });
        }
        let n = output.0 + 1;
        let mut is_target = vec![false; n];
        for w in wrt {
            if w.0 < n {
                is_target[w.0] = true;
            }
        }
        // reach[i]: some target is an ancestor-or-self of node i along a
        // differentiable path
        let mut reach = vec![false; n];
        for i in 0..n {
            let node = &self.nodes[i];
            reach[i] = is_target[i]
                || (node.requires_grad && node.op.inputs().iter().any(|j| reach[j.0]));
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; n];
        if reach[output.0] {
            let seed = Tensor::ones(self.shape(output));
            grads[output.0] = Some(self.constant(seed));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !reach[i] {
                continue;
            }
            let contributions = self.vjp(NodeId(i), g, &reach)?;
            for (input, c) in contributions {
                grads[input.0] = Some(match grads[input.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }

        let mut entries = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => self.zeros_like(w),
            };
            entries.push((w, g));
        }
        Ok(GradientMap { entries })
    }

    /// Vector-Jacobian products of node `id` with upstream gradient `g`, for
    /// the inputs flagged in `reach`.
    fn vjp(&mut self, id: NodeId, g: NodeId, reach: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[id.0].op.clone();
        let wants = |n: NodeId| reach[n.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Variable | Op::Constant | Op::ReluMask(_) | Op::ClampMask(..) => {}
            Op::Add(a, b) => {
                if wants(a) {
                    out.push((a, g));
                }
                if wants(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    out.push((a, g));
                }
                if wants(b) {
                    out.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if wants(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Div(a, b) => {
                let g_over_b = self.div(g, b)?;
                if wants(a) {
                    out.push((a, g_over_b));
                }
                if wants(b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = self.mul(g_over_b, id)?;
                    out.push((b, self.neg(t)?));
                }
            }
            Op::Neg(a) => {
                if wants(a) {
                    out.push((a, self.neg(g)?));
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    out.push((a, self.scale(g, c)?));
                }
            }
            Op::AddScalar(a, _) => {
                if wants(a) {
                    out.push((a, g));
                }
            }
            Op::MatMul(a, b) => {
                if wants(a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if wants(b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    out.push((a, self.transpose(g)?));
                }
            }
            Op::Reshape(a, _) => {
                if wants(a) {
                    let shape = self.shape(a).to_vec();
                    out.push((a, self.reshape(g, &shape)?));
                }
            }
            Op::BroadcastAxis(a, _, axis) => {
                if wants(a) {
                    out.push((a, self.reduce_to_axis(g, axis)?));
                }
            }
            Op::ReduceToAxis(a, axis) => {
                if wants(a) {
                    let shape = self.shape(a).to_vec();
                    out.push((a, self.broadcast_axis(g, &shape, axis)?));
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    let shape = self.shape(a).to_vec();
                    out.push((a, self.expand(g, &shape)?));
                }
            }
            Op::Expand(a, _) => {
                if wants(a) {
                    let s = self.sum(g)?;
                    let shape = self.shape(a).to_vec();
                    out.push((a, self.reshape(s, &shape)?));
                }
            }
            Op::ReduceGroups(a, group) => {
                if wants(a) {
                    out.push((a, self.repeat_groups(g, group)?));
                }
            }
            Op::RepeatGroups(a, group) => {
                if wants(a) {
                    out.push((a, self.reduce_groups(g, group)?));
                }
            }
            Op::Relu(a) => {
                if wants(a) {
                    let mask = self.push(Op::ReluMask(a))?;
                    out.push((a, self.mul(g, mask)?));
                }
            }
            Op::Sigmoid(a) => {
                if wants(a) {
                    // s * (1 - s)
                    let neg = self.neg(id)?;
                    let one_minus = self.add_scalar(neg, 1.0)?;
                    let local = self.mul(id, one_minus)?;
                    out.push((a, self.mul(g, local)?));
                }
            }
            Op::Tanh(a) => {
                if wants(a) {
                    // 1 - t^2
                    let sq = self.mul(id, id)?;
                    let neg = self.neg(sq)?;
                    let local = self.add_scalar(neg, 1.0)?;
                    out.push((a, self.mul(g, local)?));
                }
            }
            Op::Log(a) => {
                if wants(a) {
                    out.push((a, self.div(g, a)?));
                }
            }
            Op::Exp(a) => {
                if wants(a) {
                    out.push((a, self.mul(g, id)?));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if wants(a) {
                    let mask = self.push(Op::ClampMask(a, lo, hi))?;
                    out.push((a, self.mul(g, mask)?));
                }
            }
            Op::DropoutApply(a, mask) => {
                if wants(a) {
                    out.push((a, self.push(Op::DropoutApply(g, mask))?));
                }
            }
            Op::Conv2d(x, k) => {
                if wants(x) {
                    out.push((x, self.conv2d_input_grad(g, k)?));
                }
                if wants(k) {
                    out.push((k, self.conv2d_kernel_grad(x, g)?));
                }
            }
            Op::Conv2dInputGrad(gy, k) => {
                if wants(gy) {
                    out.push((gy, self.conv2d(g, k)?));
                }
                if wants(k) {
                    out.push((k, self.conv2d_kernel_grad(g, gy)?));
                }
            }
            Op::Conv2dKernelGrad(x, gy) => {
                if wants(x) {
                    out.push((x, self.conv2d_input_grad(gy, g)?));
                }
                if wants(gy) {
                    out.push((gy, self.conv2d(x, g)?));
                }
            }
        }
        Ok(out)
    }

    /// Rebinds variable nodes and recomputes forward values in topological
    /// order, returning the values of `outputs`.
    ///
    /// Variables absent from `bindings` keep their current values. Dropout
    /// masks sampled at construction are reused, so re-evaluation is
    /// deterministic.
    pub fn evaluate(
        &mut self,
        bindings: &[(NodeId, Tensor)],
        outputs: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        for (id, value) in bindings {
            let node = self
                .nodes
                .get_mut(id.0)
                .ok_or(GraphError::UnknownNode { node: id.0 })?;
            if !matches!(node.op, Op::Variable) {
                return Err(GraphError::NotVariable { node: id.0 });
            }
            if node.value.shape() != value.shape() {
                return Err(GraphError::Shape {
                    node: id.0,
                    op: "variable",
                    detail: format!(
                        "binding shape {:?} does not match {:?}",
                        value.shape(),
                        node.value.shape()
                    ),
                });
            }
            node.value = value.clone();
        }
        let last = match outputs.iter().map(|o| o.0).max() {
            Some(m) if m >= self.nodes.len() => return Err(GraphError::UnknownNode { node: m }),
            Some(m) => m,
            None => return Ok(Vec::new()),
        };
        for i in 0..=last {
            if matches!(self.nodes[i].op, Op::Variable | Op::Constant) {
                continue;
            }
            let value = compute(&self.nodes[i].op, &self.nodes).map_err(|detail| {
                GraphError::Shape {
                    node: i,
                    op: self.nodes[i].op.name(),
                    detail,
                }
            })?;
            self.nodes[i].value = value;
        }
        Ok(outputs.iter().map(|o| self.nodes[o.0].value.clone()).collect())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> std::result::Result<(), String> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()))
    }
}

fn conv_geom(x: &[usize], k: &[usize]) -> std::result::Result<ConvGeom, String> {
    if x.len() != 4 || k.len() != 4 {
        return Err(format!("conv2d expects 4-D input and kernel, got {x:?} and {k:?}"));
    }
    if x[1] != k[1] {
        return Err(format!("input channels {} do not match kernel channels {}", x[1], k[1]));
    }
    if k[2] == 0 || k[3] == 0 || k[2] > x[2] || k[3] > x[3] {
        return Err(format!("kernel {k:?} does not fit input {x:?}"));
    }
    Ok(ConvGeom {
        batch: x[0],
        in_ch: x[1],
        out_ch: k[0],
        in_h: x[2],
        in_w: x[3],
        k_h: k[2],
        k_w: k[3],
    })
}

fn compute(op: &Op, nodes: &[Node]) -> std::result::Result<Tensor, String> {
    let v = |id: &NodeId| &nodes[id.0].value;
    let t = match op {
        Op::Variable | Op::Constant => unreachable!("leaves carry their own values"),
        Op::Add(a, b) => {
            same_shape(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x - y)
        }
        Op::Mul(a, b) | Op::DropoutApply(a, b) => {
            same_shape(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x * y)
        }
        Op::Div(a, b) => {
            same_shape(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x / y)
        }
        Op::Neg(a) => v(a).map(|x| -x),
        Op::Scale(a, c) => v(a).map(|x| x * c),
        Op::AddScalar(a, c) => v(a).map(|x| x + c),
        Op::MatMul(a, b) => {
            let (sa, sb) = (v(a).shape(), v(b).shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(format!("cannot multiply {sa:?} by {sb:?}"));
            }
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            Tensor::new(vec![n, m], tensor::matmul(v(a).data(), v(b).data(), n, k, m))
        }
        Op::Transpose(a) => {
            let s = v(a).shape();
            if s.len() != 2 {
                return Err(format!("transpose expects 2-D, got {s:?}"));
            }
            Tensor::new(vec![s[1], s[0]], tensor::transpose(v(a).data(), s[0], s[1]))
        }
        Op::Reshape(a, shape) => v(a)
            .clone()
            .reshaped(shape.clone())
            .ok_or_else(|| format!("cannot reshape {:?} to {shape:?}", v(a).shape()))?,
        Op::BroadcastAxis(a, shape, axis) => {
            let src = v(a);
            if *axis >= shape.len() || src.shape() != [shape[*axis]] {
                return Err(format!(
                    "cannot broadcast {:?} along axis {axis} of {shape:?}",
                    src.shape()
                ));
            }
            let inner: usize = shape[axis + 1..].iter().product();
            let len = shape[*axis];
            let total: usize = shape.iter().product();
            let data = (0..total).map(|i| src.data()[(i / inner) % len]).collect();
            Tensor::new(shape.clone(), data)
        }
        Op::ReduceToAxis(a, axis) => {
            let src = v(a);
            let shape = src.shape();
            if *axis >= shape.len() {
                return Err(format!("axis {axis} out of range for {shape:?}"));
            }
            let inner: usize = shape[axis + 1..].iter().product();
            let len = shape[*axis];
            let mut out = vec![0.0; len];
            for (i, &x) in src.data().iter().enumerate() {
                out[(i / inner) % len] += x;
            }
            Tensor::vector(out)
        }
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::Expand(a, shape) => {
            let x = v(a)
                .item()
                .ok_or_else(|| format!("expand needs one element, got {:?}", v(a).shape()))?;
            Tensor::full(shape, x)
        }
        Op::ReduceGroups(a, group) => {
            let s = v(a).shape();
            if s.len() != 2 || *group == 0 || s[0] % group != 0 {
                return Err(format!("cannot reduce {s:?} in groups of {group}"));
            }
            let (rows, d) = (s[0] / group, s[1]);
            let mut out = vec![0.0; rows * d];
            for (r, chunk) in v(a).data().chunks(d).enumerate() {
                let dst = &mut out[(r / group) * d..][..d];
                for (o, &x) in dst.iter_mut().zip(chunk) {
                    *o += x;
                }
            }
            Tensor::new(vec![rows, d], out)
        }
        Op::RepeatGroups(a, group) => {
            let s = v(a).shape();
            if s.len() != 2 || *group == 0 {
                return Err(format!("cannot repeat {s:?} in groups of {group}"));
            }
            let d = s[1];
            let mut out = Vec::with_capacity(s[0] * group * d);
            for row in v(a).data().chunks(d.max(1)) {
                for _ in 0..*group {
                    out.extend_from_slice(row);
                }
            }
            Tensor::new(vec![s[0] * group, d], out)
        }
        Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::ReluMask(a) => v(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Sigmoid(a) => v(a).map(sigmoid),
        Op::Tanh(a) => v(a).map(f64::tanh),
        Op::Log(a) => v(a).map(f64::ln),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Clamp(a, lo, hi) => v(a).map(|x| x.clamp(*lo, *hi)),
        Op::ClampMask(a, lo, hi) => v(a).map(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 }),
        Op::Conv2d(x, k) => {
            let g = conv_geom(v(x).shape(), v(k).shape())?;
            Tensor::new(g.output_shape(), tensor::conv2d(v(x).data(), v(k).data(), g))
        }
        Op::Conv2dInputGrad(gy, k) => {
            let (sy, sk) = (v(gy).shape(), v(k).shape());
            if sy.len() != 4 || sk.len() != 4 || sy[1] != sk[0] {
                return Err(format!("incompatible output grad {sy:?} and kernel {sk:?}"));
            }
            let g = ConvGeom {
                batch: sy[0],
                in_ch: sk[1],
                out_ch: sk[0],
                in_h: sy[2] + sk[2] - 1,
                in_w: sy[3] + sk[3] - 1,
                k_h: sk[2],
                k_w: sk[3],
            };
            Tensor::new(
                g.input_shape(),
                tensor::conv2d_input_grad(v(gy).data(), v(k).data(), g),
            )
        }
        Op::Conv2dKernelGrad(x, gy) => {
            let (sx, sy) = (v(x).shape(), v(gy).shape());
            if sx.len() != 4 || sy.len() != 4 || sx[0] != sy[0] || sy[2] > sx[2] || sy[3] > sx[3]
            {
                return Err(format!("incompatible input {sx:?} and output grad {sy:?}"));
            }
            let g = ConvGeom {
                batch: sx[0],
                in_ch: sx[1],
                out_ch: sy[1],
                in_h: sx[2],
                in_w: sx[3],
                k_h: sx[2] - sy[2] + 1,
                k_w: sx[3] - sy[3] + 1,
            };
            Tensor::new(
                g.kernel_shape(),
                tensor::conv2d_kernel_grad(v(x).data(), v(gy).data(), g),
            )
        }
    };
    Ok(t)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
