//! Minibatch SGD with dynamic loss scaling and overflow-driven promotion.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    forward, forward_backward, predict, sgd_step, Batch, EngineError, LossScaler, ScaleDecision,
    Targets, TensorFormats, Weights,
};
use crate::assign::{lrt, Level, PrecisionAssignment, PrecisionCandidate};
use crate::fpnum::{FpFormat, RoundStats};
use crate::graph::{Graph, TensorId};

/// Labelled examples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    num_features: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, num_features: usize) -> Result<Self, EngineError> {
        if features.len() != labels.len() * num_features {
            return Err(EngineError::Size {
                expected: labels.len() * num_features,
                got: features.len(),
            });
        }
        Ok(Dataset {
            features,
            labels,
            num_features,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        for &i in indices {
            features.extend_from_slice(self.example(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_features: self.num_features,
        }
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch {
            inputs: &self.features,
            targets: Targets::Classes(&self.labels),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub theta: f64,
    pub promotion_enabled: bool,
    pub dynamic_loss_scaling: bool,
    pub loss_scale_init: f64,
    pub growth_factor: f64,
    pub backoff_factor: f64,
    /// In epochs; converted to a whole number of steps (at least one).
    pub growth_interval: f64,
    pub master_format: FpFormat,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            theta: 0.01,
            promotion_enabled: true,
            dynamic_loss_scaling: true,
            loss_scale_init: 65536.0,
            growth_factor: 2.0,
            backoff_factor: 0.5,
            growth_interval: 1.0,
            master_format: FpFormat::FP32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.batch_size == 0 {
            return Err(EngineError::Config("batch_size must be at least 1"));
        }
        if !positive(self.learning_rate) {
            return Err(EngineError::Config("learning_rate must be positive"));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(EngineError::Config("theta must lie in (0, 1)"));
        }
        if !positive(self.loss_scale_init) {
            return Err(EngineError::Config("loss_scale_init must be positive"));
        }
        if !positive(self.growth_factor) || !positive(self.backoff_factor) {
            return Err(EngineError::Config("loss-scale factors must be positive"));
        }
        if !positive(self.growth_interval) {
            return Err(EngineError::Config("growth_interval must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }

    pub fn growth_interval_steps(&self, examples: usize) -> usize {
        let steps = libm::round(self.growth_interval * self.steps_per_epoch(examples) as f64);
        (steps as usize).max(1)
    }
}

/// How tensors are rounded during training.
#[derive(Debug, Clone, PartialEq)]
pub enum PrecisionPlan {
    /// Fixed per-tensor formats. Nothing is promoted and lrt is reported as 0.
    Fixed(TensorFormats),
    /// A candidate and a live assignment over it.
    Mixed {
        candidate: PrecisionCandidate,
        assignment: PrecisionAssignment,
    },
}

impl PrecisionPlan {
    pub fn formats(&self) -> Result<TensorFormats, EngineError> {
        match self {
            PrecisionPlan::Fixed(f) => Ok(f.clone()),
            PrecisionPlan::Mixed {
                candidate,
                assignment,
            } => Ok(TensorFormats::from_assignment(candidate, assignment)?),
        }
    }

    pub fn assignment(&self) -> Option<&PrecisionAssignment> {
        match self {
            PrecisionPlan::Fixed(_) => None,
            PrecisionPlan::Mixed { assignment, .. } => Some(assignment),
        }
    }

    pub fn lrt(&self, g: &Graph) -> f64 {
        self.assignment().map_or(0.0, |a| lrt(g, a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Promotion {
    /// Zero-based global step index.
    pub step: usize,
    pub tensor: TensorId,
}

/// Promotes every low forward tensor whose overflow ratio exceeds `theta`.
/// Returns how many tensors were promoted.
pub fn promote_overflowing(
    g: &Graph,
    assignment: &mut PrecisionAssignment,
    stats: &[RoundStats],
    theta: f64,
    step: usize,
    log: &mut Vec<Promotion>,
) -> usize {
    let mut promoted = 0;
    for t in g.tensors().iter().filter(|t| t.kind.is_forward()) {
        if assignment.level(t.id) == Level::Lo && stats[t.id.0].overflow_ratio() > theta {
            assignment.set(t.id, Level::Hi);
            log.push(Promotion { step, tensor: t.id });
            promoted += 1;
        }
    }
    promoted
}

/// Outcome of a single training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub backward_overflow: bool,
    pub skipped: bool,
    pub promoted: usize,
}

/// Mutable training state: master weights, live assignment, loss scale and
/// the counters of the most recent step.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: Weights,
    pub plan: PrecisionPlan,
    pub scaler: LossScaler,
    pub step: usize,
    pub last_stats: Vec<RoundStats>,
    pub promotions: Vec<Promotion>,
}

impl TrainState {
    pub fn new(weights: Weights, plan: PrecisionPlan, scaler: LossScaler) -> Self {
        TrainState {
            weights,
            plan,
            scaler,
            step: 0,
            last_stats: Vec::new(),
            promotions: Vec::new(),
        }
    }

    /// forward/backward, promotion, loss-scale update, then SGD unless the
    /// scaler asks to skip.
    pub fn step(&mut self, g: &Graph, cfg: &TrainConfig, batch: Batch<'_>) -> Result<StepReport, EngineError> {
        let formats = self.plan.formats()?;
        let result = forward_backward(g, &formats, &self.weights, batch, self.scaler.scale())?;

        let mut promoted = 0;
        if cfg.promotion_enabled {
            if let PrecisionPlan::Mixed { assignment, .. } = &mut self.plan {
                promoted = promote_overflowing(
                    g,
                    assignment,
                    &result.stats,
                    cfg.theta,
                    self.step,
                    &mut self.promotions,
                );
            }
        }
        let decision = self.scaler.update(result.backward_overflow);
        if decision == ScaleDecision::Apply {
            sgd_step(
                &mut self.weights,
                &result.weight_grads,
                cfg.learning_rate,
                cfg.master_format,
            )?;
        }
        self.step += 1;
        self.last_stats = result.stats;
        Ok(StepReport {
            loss: result.loss,
            backward_overflow: result.backward_overflow,
            skipped: decision == ScaleDecision::Skip,
            promoted,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Forward pass under the current assignment.
    pub eval_accuracy: f64,
    /// Forward pass with fp32 everywhere.
    pub eval_accuracy_fp32: f64,
    /// lrt at the end of the epoch.
    pub lrt_now: f64,
    pub loss_scale_end: f64,
    pub promotions_this_epoch: usize,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub records: Vec<EpochRecord>,
    pub plan: PrecisionPlan,
    pub promotions: Vec<Promotion>,
    /// lrt after every step.
    pub lrt_trace: Vec<f64>,
}

impl TrainOutcome {
    /// Mean of the per-epoch lrt.
    pub fn mean_lrt(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.lrt_now).sum::<f64>() / self.records.len() as f64
    }

    pub fn best_eval_accuracy(&self) -> f64 {
        self.records.iter().map(|r| r.eval_accuracy).fold(0.0, f64::max)
    }
}

const EVAL_CHUNK: usize = 256;

/// Fraction of `data` classified correctly by a forward pass under `formats`.
pub fn accuracy(g: &Graph, formats: &TensorFormats, weights: &Weights, data: &Dataset) -> Result<f64, EngineError> {
    if data.is_empty() {
        return Err(EngineError::EmptyData);
    }
    let mut correct = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let part = data.subset(chunk);
        let trace = forward(g, formats, weights, part.batch())?;
        correct += predict(g, &trace)
            .iter()
            .zip(part.labels())
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains from a seeded initialization and records one row per epoch.
pub fn train(
    g: &Graph,
    plan: PrecisionPlan,
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<TrainOutcome, EngineError> {
    cfg.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(EngineError::EmptyData);
    }
    let scaler = if cfg.dynamic_loss_scaling {
        LossScaler::new(
            cfg.loss_scale_init,
            cfg.growth_factor,
            cfg.backoff_factor,
            cfg.growth_interval_steps(train_set.len()),
        )
    } else {
        LossScaler::disabled()
    };
    let mut state = TrainState::new(Weights::init_uniform(g, cfg.seed), plan, scaler);
    let fp32 = TensorFormats::uniform(g, FpFormat::FP32);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut lrt_trace = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let promotions_before = state.promotions.len();
        let mut skipped = 0;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let part = train_set.subset(chunk);
            let report = state.step(g, cfg, part.batch())?;
            loss_sum += report.loss * chunk.len() as f64;
            skipped += usize::from(report.skipped);
            lrt_trace.push(state.plan.lrt(g));
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            eval_accuracy: accuracy(g, &state.plan.formats()?, &state.weights, eval_set)?,
            eval_accuracy_fp32: accuracy(g, &fp32, &state.weights, eval_set)?,
            lrt_now: state.plan.lrt(g),
            loss_scale_end: state.scaler.scale(),
            promotions_this_epoch: state.promotions.len() - promotions_before,
            skipped_steps: skipped,
        });
    }

    Ok(TrainOutcome {
        weights: state.weights,
        records,
        plan: state.plan,
        promotions: state.promotions,
        lrt_trace,
    })
}
