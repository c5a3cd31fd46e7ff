//! Mixed-precision forward/backward passes and SGD.
//!
//! Arithmetic inside an operator is carried out in `f64`; rounding happens
//! only when a tensor of the tensor set is materialized, with the format the
//! current assignment gives it.

mod ops;
mod scaler;
mod train;

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::assign::{AssignError, PrecisionAssignment, PrecisionCandidate};
use crate::fpnum::{FormatError, FpFormat, RoundStats};
use crate::graph::{Graph, OpKind, TensorId};

pub use ops::Targets;
pub use scaler::{LossScaler, ScaleDecision};
pub use train::{
    accuracy, promote_overflowing, train, Dataset, EpochRecord, PrecisionPlan, Promotion,
    StepReport, TrainConfig, TrainOutcome, TrainState,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error("batch: {0}")]
    Batch(&'static str),
    #[error("expected {expected} elements, got {got}")]
    Size { expected: usize, got: usize },
    #[error("label {label} outside the {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid config: {0}")]
    Config(&'static str),
    #[error("empty dataset")]
    EmptyData,
}

/// Rounding format per tensor, `None` meaning the tensor is kept exact.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFormats(Vec<Option<FpFormat>>);

impl TensorFormats {
    pub fn exact(g: &Graph) -> Self {
        TensorFormats(vec![None; g.num_tensors()])
    }

    pub fn uniform(g: &Graph, format: FpFormat) -> Self {
        TensorFormats(vec![Some(format); g.num_tensors()])
    }

    pub fn from_assignment(
        candidate: &PrecisionCandidate,
        assignment: &PrecisionAssignment,
    ) -> Result<Self, AssignError> {
        Ok(TensorFormats(
            candidate.resolve(assignment)?.into_iter().map(Some).collect(),
        ))
    }

    pub fn from_vec(formats: Vec<Option<FpFormat>>) -> Self {
        TensorFormats(formats)
    }

    pub fn get(&self, id: TensorId) -> Option<FpFormat> {
        self.0[id.0]
    }

    pub fn set(&mut self, id: TensorId, format: Option<FpFormat>) {
        self.0[id.0] = format;
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Master copy of the parameters, one buffer per operator (empty when the
/// operator has none).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(Vec<Vec<f64>>);

impl Weights {
    pub fn zeros(g: &Graph) -> Self {
        Weights(g.ops().iter().map(|op| vec![0.0; op.param_size()]).collect())
    }

    /// Uniform in `±1/sqrt(fan_in)`, stored in fp32.
    pub fn init_uniform(g: &Graph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = g
            .ops()
            .iter()
            .map(|op| {
                let fan_in = match op.kind {
                    OpKind::Dense { .. } => op.param_shape[0],
                    OpKind::Conv2d { .. } => op.param_shape[1..].iter().product(),
                    _ => return Vec::new(),
                };
                let bound = 1.0 / libm::sqrt(fan_in as f64);
                (0..op.param_size())
                    .map(|_| rng.random_range(-bound..=bound) as f32 as f64)
                    .collect()
            })
            .collect();
        Weights(params)
    }

    /// Parameters of operator `j` (1-based).
    pub fn param(&self, j: usize) -> &[f64] {
        &self.0[j - 1]
    }

    pub fn param_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.0[j - 1]
    }

    pub fn num_ops(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.0.iter().map(Vec::as_slice)
    }

    /// Bit patterns of every parameter, for exact comparisons.
    pub fn to_bits(&self) -> Vec<u64> {
        self.0.iter().flatten().map(|v| v.to_bits()).collect()
    }
}

/// A minibatch: `len * input_size` inputs, example-major, and one target each.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a [f64],
    pub targets: Targets<'a>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn validate(&self, g: &Graph) -> Result<(), EngineError> {
        if self.is_empty() {
            return Err(EngineError::Batch("no examples"));
        }
        let expected = self.len() * g.activation_size(1);
        if self.inputs.len() != expected {
            return Err(EngineError::Size {
                expected,
                got: self.inputs.len(),
            });
        }
        let loss = g.loss_op();
        match (loss.kind, self.targets) {
            (OpKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
                let classes = loss.in_shapes[0].iter().product();
                if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
                    return Err(EngineError::Label { label, classes });
                }
            }
            (OpKind::AbsLoss { .. }, Targets::Values(_)) => {}
            _ => return Err(EngineError::Batch("target kind does not match the loss")),
        }
        Ok(())
    }
}

/// Rounded forward activations and weights of one step.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `x̂_i` at index `i - 1`, `batch * size(x_i)` elements each.
    pub activations: Vec<Vec<f64>>,
    /// `θ̂_j` at index `j - 1`.
    pub weights: Vec<Vec<f64>>,
    /// Rounding counters by tensor id; backward entries stay empty.
    pub stats: Vec<RoundStats>,
    pub rounding_sites: usize,
    pub batch_len: usize,
}

impl ForwardTrace {
    /// Mean of the rounded per-example loss.
    pub fn loss(&self) -> f64 {
        let out = self.activations.last().expect("loss activation");
        out.iter().sum::<f64>() / out.len() as f64
    }

    /// Inputs of the loss operator, `batch * classes` scores.
    pub fn scores<'a>(&'a self, g: &Graph) -> &'a [f64] {
        &self.activations[g.loss_op().inputs[0] - 1]
    }
}

/// Everything one forward/backward pass produces.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    /// `dθ̂_j / loss_scale` at index `j - 1`; empty for parameterless operators.
    pub weight_grads: Vec<Vec<f64>>,
    /// `dx̂_i` at index `i - 1`, still multiplied by the loss scale.
    pub activation_grads: Vec<Vec<f64>>,
    /// Rounding counters by tensor id.
    pub stats: Vec<RoundStats>,
    pub backward_overflow: bool,
    /// Number of tensor roundings performed.
    pub rounding_sites: usize,
}

struct Rounder<'a> {
    formats: &'a TensorFormats,
    stats: Vec<RoundStats>,
    sites: usize,
}

impl Rounder<'_> {
    fn apply(&mut self, id: TensorId, data: &mut [f64]) -> Result<(), FormatError> {
        if let Some(format) = self.formats.get(id) {
            self.stats[id.0] = format.round_slice(data)?;
            self.sites += 1;
        }
        Ok(())
    }
}

fn check_formats(g: &Graph, formats: &TensorFormats) -> Result<(), EngineError> {
    if formats.len() != g.num_tensors() {
        return Err(EngineError::Size {
            expected: g.num_tensors(),
            got: formats.len(),
        });
    }
    Ok(())
}

fn check_weights(g: &Graph, weights: &Weights) -> Result<(), EngineError> {
    if weights.num_ops() != g.num_ops() {
        return Err(EngineError::Size {
            expected: g.num_ops(),
            got: weights.num_ops(),
        });
    }
    for op in g.ops() {
        let got = weights.param(op.index).len();
        if got != op.param_size() {
            return Err(EngineError::Size {
                expected: op.param_size(),
                got,
            });
        }
    }
    Ok(())
}

/// Forward pass: `x̂_{i+1} = rnd(f_i(x̂_i, θ̂_i))` with `θ̂_i = rnd(θ_i)`.
pub fn forward(
    g: &Graph,
    formats: &TensorFormats,
    weights: &Weights,
    batch: Batch<'_>,
) -> Result<ForwardTrace, EngineError> {
    check_formats(g, formats)?;
    check_weights(g, weights)?;
    batch.validate(g)?;
    let b = batch.len();
    let mut rounder = Rounder {
        formats,
        stats: vec![RoundStats::default(); g.num_tensors()],
        sites: 0,
    };

    let mut activations = Vec::with_capacity(g.num_ops() + 1);
    let mut x1 = batch.inputs.to_vec();
    rounder.apply(g.activation(1), &mut x1)?;
    activations.push(x1);

    let mut rounded_weights = Vec::with_capacity(g.num_ops());
    for op in g.ops() {
        let mut w = weights.param(op.index).to_vec();
        if let Some(id) = g.weight(op.index) {
            rounder.apply(id, &mut w)?;
        }
        let inputs: Vec<&[f64]> = op.inputs.iter().map(|&a| activations[a - 1].as_slice()).collect();
        let mut y = ops::forward_op(op, &inputs, &w, batch.targets, b);
        rounder.apply(g.activation(op.index + 1), &mut y)?;
        activations.push(y);
        rounded_weights.push(w);
    }

    Ok(ForwardTrace {
        activations,
        weights: rounded_weights,
        stats: rounder.stats,
        rounding_sites: rounder.sites,
        batch_len: b,
    })
}

/// Backward pass from a forward trace.
///
/// The seed `dx̂_{m+1}` is `rnd(loss_scale)` for every example. Gradients
/// reaching an activation from several consumers are summed before rounding.
/// Weight gradients are rounded, then divided by `loss_scale`.
pub fn backward(
    g: &Graph,
    formats: &TensorFormats,
    trace: &ForwardTrace,
    batch: Batch<'_>,
    loss_scale: f64,
) -> Result<StepResult, EngineError> {
    check_formats(g, formats)?;
    if !(loss_scale.is_finite() && loss_scale > 0.0) {
        return Err(EngineError::Config("loss scale must be positive and finite"));
    }
    let m = g.num_ops();
    let b = trace.batch_len;
    let mut rounder = Rounder {
        formats,
        stats: trace.stats.clone(),
        sites: trace.rounding_sites,
    };

    let mut pending: Vec<Option<Vec<f64>>> = vec![None; m + 1];
    let mut activation_grads: Vec<Vec<f64>> = vec![Vec::new(); m + 1];
    let mut weight_grads: Vec<Vec<f64>> = vec![Vec::new(); m];
    pending[m] = Some(vec![loss_scale; b]);

    for i in (1..=m).rev() {
        let op = g.op(i);
        let out = i + 1;
        let mut dy = pending[out - 1]
            .take()
            .unwrap_or_else(|| vec![0.0; b * g.activation_size(out)]);
        rounder.apply(g.activation_grad(out), &mut dy)?;

        let inputs: Vec<&[f64]> = op
            .inputs
            .iter()
            .map(|&a| trace.activations[a - 1].as_slice())
            .collect();
        let grads = ops::backward_op(op, &inputs, &trace.weights[i - 1], &dy, batch.targets, b);
        for (&src, dx) in op.inputs.iter().zip(grads.inputs) {
            match &mut pending[src - 1] {
                Some(acc) => acc.iter_mut().zip(&dx).for_each(|(a, v)| *a += v),
                slot => *slot = Some(dx),
            }
        }
        if let (Some(mut dw), Some(id)) = (grads.weight, g.weight_grad(i)) {
            rounder.apply(id, &mut dw)?;
            dw.iter_mut().for_each(|v| *v /= loss_scale);
            weight_grads[i - 1] = dw;
        }
        activation_grads[out - 1] = dy;
    }
    let mut dx1 = pending[0].take().unwrap_or_else(|| vec![0.0; b * g.activation_size(1)]);
    rounder.apply(g.activation_grad(1), &mut dx1)?;
    activation_grads[0] = dx1;

    let backward_overflow = g
        .tensors()
        .iter()
        .filter(|t| !t.kind.is_forward())
        .any(|t| rounder.stats[t.id.0].overflows > 0);
    Ok(StepResult {
        loss: trace.loss(),
        weight_grads,
        activation_grads,
        stats: rounder.stats,
        backward_overflow,
        rounding_sites: rounder.sites,
    })
}

pub fn forward_backward(
    g: &Graph,
    formats: &TensorFormats,
    weights: &Weights,
    batch: Batch<'_>,
    loss_scale: f64,
) -> Result<StepResult, EngineError> {
    let trace = forward(g, formats, weights, batch)?;
    backward(g, formats, &trace, batch, loss_scale)
}

/// `θ ← rnd_master(θ − lr · g)` for every parameterized operator.
pub fn sgd_step(
    weights: &mut Weights,
    grads: &[Vec<f64>],
    lr: f64,
    master: FpFormat,
) -> Result<(), EngineError> {
    if grads.len() != weights.num_ops() {
        return Err(EngineError::Size {
            expected: weights.num_ops(),
            got: grads.len(),
        });
    }
    for (j, grad) in grads.iter().enumerate() {
        let w = weights.param_mut(j + 1);
        if grad.is_empty() {
            continue;
        }
        if grad.len() != w.len() {
            return Err(EngineError::Size {
                expected: w.len(),
                got: grad.len(),
            });
        }
        for (p, &d) in w.iter_mut().zip(grad) {
            *p = master.round(*p - lr * d)?.value;
        }
    }
    Ok(())
}

/// Mean loss with every tensor exact.
pub fn exact_loss(g: &Graph, weights: &Weights, batch: Batch<'_>) -> Result<f64, EngineError> {
    Ok(forward(g, &TensorFormats::exact(g), weights, batch)?.loss())
}

/// Index of the largest score per example; ties go to the lowest class.
pub fn predict(g: &Graph, trace: &ForwardTrace) -> Vec<usize> {
    let scores = trace.scores(g);
    let classes = scores.len() / trace.batch_len;
    scores
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests;
