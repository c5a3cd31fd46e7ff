//! Operator chains and the tensor set of a gradient computation.
//!
//! A graph is an ordered list of operators `f_1..f_m`. Operator `i` produces
//! activation `x_{i+1}`; `x_1` is the input. By default operator `i` reads
//! `x_i`, but `split`/`add`/`reduce_sum` may read any earlier activations, which
//! is enough for branch-and-merge shapes. The final operator is the loss, the
//! ones before it form the model.
//!
//! The tensor set holds `x_1..x_{m+1}`, `dx_1..dx_{m+1}` and `θ_j`/`dθ_j` for
//! every parameterized operator. Sizes are per example; the batch dimension is
//! not part of the accounting.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("model description is empty")]
    Empty,
    #[error("operator {op} ({kind}): {detail}")]
    Shape {
        op: usize,
        kind: &'static str,
        detail: String,
    },
    #[error("the last operator must be a loss (softmax_cross_entropy or abs_loss), found {0}")]
    MissingLoss(&'static str),
    #[error("loss operator {0} appears before the end of the chain")]
    MisplacedLoss(usize),
    #[error("unknown tensor id {0}")]
    UnknownTensor(usize),
}

/// Per-example tensor shape.
pub type Shape = Vec<usize>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Primitive operator kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    /// Fully connected layer without bias; weights are `[in, out]`.
    Dense { out: usize },
    /// 2-D convolution without bias over `[c, h, w]`; weights are `[out, c, k, k]`.
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    GlobalAvgPool,
    /// Softmax followed by cross-entropy against a class label.
    SoftmaxCrossEntropy,
    /// Contiguous slice `[offset, offset + len)` of the flattened input.
    Split { offset: usize, len: usize },
    /// Elementwise sum of equally sized inputs.
    Add,
    /// Sum of every element of every input, producing a scalar.
    ReduceSum,
    /// Multiplication by a constant.
    Scale { factor: f64 },
    /// `scale * |x - target|` against a real-valued target.
    AbsLoss { scale: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Dense { .. } => "dense",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Relu => "relu",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Split { .. } => "split",
            OpKind::Add => "add",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::Scale { .. } => "scale",
            OpKind::AbsLoss { .. } => "abs_loss",
        }
    }

    pub fn is_gemm(&self) -> bool {
        matches!(self, OpKind::Dense { .. } | OpKind::Conv2d { .. })
    }

    pub fn is_loss(&self) -> bool {
        matches!(self, OpKind::SoftmaxCrossEntropy | OpKind::AbsLoss { .. })
    }
}

/// One entry of a model description: an operator and, optionally, the
/// activation indices it reads (defaults to the previous activation).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: OpKind,
    pub from: Option<Vec<usize>>,
}

impl LayerSpec {
    pub fn new(kind: OpKind) -> Self {
        LayerSpec { kind, from: None }
    }

    pub fn reading(kind: OpKind, from: Vec<usize>) -> Self {
        LayerSpec {
            kind,
            from: Some(from),
        }
    }
}

impl From<OpKind> for LayerSpec {
    fn from(kind: OpKind) -> Self {
        LayerSpec::new(kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpNode {
    /// 1-based operator index.
    pub index: usize,
    pub kind: OpKind,
    /// 1-based activation indices read by this operator.
    pub inputs: Vec<usize>,
    pub in_shapes: Vec<Shape>,
    pub out_shape: Shape,
    /// Empty for parameterless operators.
    pub param_shape: Shape,
}

impl OpNode {
    pub fn is_gemm(&self) -> bool {
        self.kind.is_gemm()
    }

    pub fn has_params(&self) -> bool {
        !self.param_shape.is_empty()
    }

    pub fn param_size(&self) -> usize {
        if self.has_params() {
            numel(&self.param_shape)
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(pub usize);

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    FwdActivation,
    FwdWeight,
    BwdActivation,
    BwdWeight,
}

impl TensorKind {
    pub fn is_forward(self) -> bool {
        matches!(self, TensorKind::FwdActivation | TensorKind::FwdWeight)
    }

    pub fn is_weight(self) -> bool {
        matches!(self, TensorKind::FwdWeight | TensorKind::BwdWeight)
    }

    pub fn name(self) -> &'static str {
        match self {
            TensorKind::FwdActivation => "fwd_activation",
            TensorKind::FwdWeight => "fwd_weight",
            TensorKind::BwdActivation => "bwd_activation",
            TensorKind::BwdWeight => "bwd_weight",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorMeta {
    pub id: TensorId,
    pub kind: TensorKind,
    /// `i` for `x_i`/`dx_i` (so `m + 1` for the loss output), `j` for `θ_j`/`dθ_j`.
    pub owner_op: usize,
    pub size: usize,
}

impl TensorMeta {
    pub fn label(&self) -> String {
        let prefix = match self.kind {
            TensorKind::FwdActivation => "x",
            TensorKind::FwdWeight => "theta",
            TensorKind::BwdActivation => "dx",
            TensorKind::BwdWeight => "dtheta",
        };
        format!("{prefix}{}", self.owner_op)
    }
}

/// The operator chain together with its tensor set.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    input_shape: Shape,
    ops: Vec<OpNode>,
    tensors: Vec<TensorMeta>,
    /// `x_i` lives at `act_ids[i - 1]`, `dx_i` at `grad_act_ids[i - 1]`.
    act_ids: Vec<TensorId>,
    grad_act_ids: Vec<TensorId>,
    /// Indexed by operator index - 1.
    weight_ids: Vec<Option<TensorId>>,
    grad_weight_ids: Vec<Option<TensorId>>,
}

impl Graph {
    /// Shape inference over a layer list; the last layer must be the loss.
    pub fn build(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Graph, GraphError> {
        let last = layers.last().ok_or(GraphError::Empty)?;
        if !last.kind.is_loss() {
            return Err(GraphError::MissingLoss(last.kind.name()));
        }
        if let Some(pos) = layers[..layers.len() - 1].iter().position(|l| l.kind.is_loss()) {
            return Err(GraphError::MisplacedLoss(pos + 1));
        }
        if input_shape.is_empty() || numel(input_shape) == 0 {
            return Err(GraphError::Shape {
                op: 0,
                kind: "input",
                detail: "input shape must be non-empty".into(),
            });
        }

        let mut act_shapes: Vec<Shape> = vec![input_shape.to_vec()];
        let mut ops = Vec::with_capacity(layers.len());
        for (pos, layer) in layers.iter().enumerate() {
            let index = pos + 1;
            let inputs = layer.from.clone().unwrap_or_else(|| vec![index]);
            let node = infer_op(index, &layer.kind, inputs, &act_shapes)?;
            act_shapes.push(node.out_shape.clone());
            ops.push(node);
        }

        let m = ops.len();
        let mut tensors = Vec::new();
        let mut push = |kind, owner_op, size| {
            let id = TensorId(tensors.len());
            tensors.push(TensorMeta {
                id,
                kind,
                owner_op,
                size,
            });
            id
        };
        let act_ids: Vec<_> = (1..=m + 1)
            .map(|i| push(TensorKind::FwdActivation, i, numel(&act_shapes[i - 1])))
            .collect();
        let weight_ids: Vec<_> = ops
            .iter()
            .map(|op| op.has_params().then(|| push(TensorKind::FwdWeight, op.index, op.param_size())))
            .collect();
        let grad_act_ids: Vec<_> = (1..=m + 1)
            .map(|i| push(TensorKind::BwdActivation, i, numel(&act_shapes[i - 1])))
            .collect();
        let grad_weight_ids: Vec<_> = ops
            .iter()
            .map(|op| op.has_params().then(|| push(TensorKind::BwdWeight, op.index, op.param_size())))
            .collect();

        Ok(Graph {
            input_shape: input_shape.to_vec(),
            ops,
            tensors,
            act_ids,
            grad_act_ids,
            weight_ids,
            grad_weight_ids,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn ops(&self) -> &[OpNode] {
        &self.ops
    }

    pub fn op(&self, index: usize) -> &OpNode {
        &self.ops[index - 1]
    }

    /// Number of operators `m`.
    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Number of model operators `n` (everything but the loss).
    pub fn num_model_ops(&self) -> usize {
        self.ops.len() - 1
    }

    pub fn loss_op(&self) -> &OpNode {
        self.ops.last().expect("graph has a loss operator")
    }

    pub fn tensors(&self) -> &[TensorMeta] {
        &self.tensors
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor(&self, id: TensorId) -> Result<&TensorMeta, GraphError> {
        self.tensors.get(id.0).ok_or(GraphError::UnknownTensor(id.0))
    }

    pub fn activation_shape(&self, i: usize) -> &[usize] {
        if i == 1 {
            &self.input_shape
        } else {
            &self.ops[i - 2].out_shape
        }
    }

    pub fn activation_size(&self, i: usize) -> usize {
        numel(self.activation_shape(i))
    }

    /// `x_i`, 1-based.
    pub fn activation(&self, i: usize) -> TensorId {
        self.act_ids[i - 1]
    }

    /// `dx_i`, 1-based.
    pub fn activation_grad(&self, i: usize) -> TensorId {
        self.grad_act_ids[i - 1]
    }

    /// `θ_j` when operator `j` has parameters.
    pub fn weight(&self, j: usize) -> Option<TensorId> {
        self.weight_ids[j - 1]
    }

    /// `dθ_j` when operator `j` has parameters.
    pub fn weight_grad(&self, j: usize) -> Option<TensorId> {
        self.grad_weight_ids[j - 1]
    }

    /// The forward tensor of a backward tensor and vice versa.
    pub fn partner(&self, id: TensorId) -> Result<TensorId, GraphError> {
        let t = self.tensor(id)?;
        Ok(match t.kind {
            TensorKind::FwdActivation => self.activation_grad(t.owner_op),
            TensorKind::BwdActivation => self.activation(t.owner_op),
            TensorKind::FwdWeight => self.grad_weight_ids[t.owner_op - 1].expect("paired"),
            TensorKind::BwdWeight => self.weight_ids[t.owner_op - 1].expect("paired"),
        })
    }

    pub fn backward_weight_tensors(&self) -> Vec<TensorId> {
        self.grad_weight_ids.iter().flatten().copied().collect()
    }

    /// Total element count of a subset of tensors.
    pub fn total_size<'a>(
        &self,
        subset: impl IntoIterator<Item = &'a TensorId>,
    ) -> Result<usize, GraphError> {
        subset
            .into_iter()
            .map(|id| self.tensor(*id).map(|t| t.size))
            .sum()
    }

    /// Size of the whole tensor set.
    pub fn size(&self) -> usize {
        self.tensors.iter().map(|t| t.size).sum()
    }
}

fn shape_err(op: usize, kind: &OpKind, detail: String) -> GraphError {
    GraphError::Shape {
        op,
        kind: kind.name(),
        detail,
    }
}

fn infer_op(
    index: usize,
    kind: &OpKind,
    inputs: Vec<usize>,
    act_shapes: &[Shape],
) -> Result<OpNode, GraphError> {
    let err = |detail: String| shape_err(index, kind, detail);
    if inputs.is_empty() {
        return Err(err("no inputs".into()));
    }
    if let Some(&bad) = inputs.iter().find(|&&a| a == 0 || a > index) {
        return Err(err(format!("reads x{bad}, which is not available before this operator")));
    }
    let multi_input = matches!(kind, OpKind::Add | OpKind::ReduceSum);
    if !multi_input && inputs.len() != 1 {
        return Err(err(format!("expects one input, got {}", inputs.len())));
    }
    let in_shapes: Vec<Shape> = inputs.iter().map(|&a| act_shapes[a - 1].clone()).collect();
    let first = &in_shapes[0];
    let first_size = numel(first);

    let (out_shape, param_shape): (Shape, Shape) = match *kind {
        OpKind::Dense { out } => {
            if out == 0 {
                return Err(err("zero output features".into()));
            }
            (vec![out], vec![first_size, out])
        }
        OpKind::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let [c, h, w] = first[..] else {
                return Err(err(format!("expects a [c, h, w] input, got {first:?}")));
            };
            if out_channels == 0 || kernel == 0 || stride == 0 {
                return Err(err("channels, kernel and stride must be positive".into()));
            }
            if h + 2 * padding < kernel || w + 2 * padding < kernel {
                return Err(err(format!("kernel {kernel} larger than padded input {h}x{w}")));
            }
            let oh = (h + 2 * padding - kernel) / stride + 1;
            let ow = (w + 2 * padding - kernel) / stride + 1;
            (vec![out_channels, oh, ow], vec![out_channels, c, kernel, kernel])
        }
        OpKind::Relu | OpKind::Scale { .. } => (first.clone(), Vec::new()),
        OpKind::GlobalAvgPool => {
            let [c, _, _] = first[..] else {
                return Err(err(format!("expects a [c, h, w] input, got {first:?}")));
            };
            (vec![c], Vec::new())
        }
        OpKind::SoftmaxCrossEntropy => {
            if first_size < 2 {
                return Err(err("needs at least two classes".into()));
            }
            (vec![1], Vec::new())
        }
        OpKind::AbsLoss { .. } => {
            if first_size != 1 {
                return Err(err(format!("expects a scalar prediction, got {first:?}")));
            }
            (vec![1], Vec::new())
        }
        OpKind::Split { offset, len } => {
            if len == 0 || offset + len > first_size {
                return Err(err(format!(
                    "slice [{offset}, {}) outside input of size {first_size}",
                    offset + len
                )));
            }
            (vec![len], Vec::new())
        }
        OpKind::Add => {
            if let Some(s) = in_shapes.iter().find(|s| numel(s) != first_size) {
                return Err(err(format!("input sizes differ: {first:?} vs {s:?}")));
            }
            (first.clone(), Vec::new())
        }
        OpKind::ReduceSum => (vec![1], Vec::new()),
    };

    Ok(OpNode {
        index,
        kind: *kind,
        inputs,
        in_shapes,
        out_shape,
        param_shape,
    })
}

/// Convenience wrapper over [`Graph::build`].
pub fn build_graph(layers: &[LayerSpec], input_shape: &[usize]) -> Result<Graph, GraphError> {
    Graph::build(input_shape, layers)
}

/// A set of tensors that always share a precision level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorGroup {
    pub members: Vec<TensorId>,
    pub total_size: usize,
}

/// Groups the tensor set into segments delimited by GEMM operators.
///
/// Walks `i = 1..m`, adding `x_i, dx_i` (and `θ_i, dθ_i` for parameterized
/// model operators) to the open group, and closes the group right after every
/// GEMM. `x_{m+1}, dx_{m+1}` go to the last group.
pub fn group_tensors(g: &Graph) -> Vec<TensorGroup> {
    let mut groups: Vec<Vec<TensorId>> = vec![Vec::new()];
    for op in g.ops() {
        let i = op.index;
        let current = groups.last_mut().expect("at least one open group");
        current.push(g.activation(i));
        current.push(g.activation_grad(i));
        if i <= g.num_model_ops() {
            if let (Some(w), Some(dw)) = (g.weight(i), g.weight_grad(i)) {
                current.push(w);
                current.push(dw);
            }
        }
        if op.is_gemm() {
            groups.push(Vec::new());
        }
    }
    let last = g.num_ops() + 1;
    let current = groups.last_mut().expect("at least one open group");
    current.push(g.activation(last));
    current.push(g.activation_grad(last));

    groups
        .into_iter()
        .map(|members| {
            let total_size = members.iter().map(|id| g.tensors()[id.0].size).sum();
            TensorGroup {
                members,
                total_size,
            }
        })
        .collect()
}
