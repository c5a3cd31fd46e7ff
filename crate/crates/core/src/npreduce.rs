//! Reduction from 0/1 knapsack to the memory/accuracy tradeoff problem.
//!
//! A knapsack instance `(w, p, W)` becomes a tiny network: the input `x` is
//! split into `n` scalars, branch `i` multiplies its scalar by a weight vector
//! of length `w_i`, everything is summed, and the loss is `2^-k |f(x) - y|`.
//! Training is one step of gradient descent from zero weights with learning
//! rate `2^-l` and master weights in the high-precision format; accuracy is the
//! negated exact loss afterwards. With suitable formats, the optimal precision
//! assignment encodes an optimal knapsack selection.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::assign::{lrt, AssignError, Level, PrecisionAssignment, PrecisionCandidate};
use crate::engine::{
    backward, exact_loss, forward, sgd_step, Batch, EngineError, ForwardTrace, Targets,
    TensorFormats, Weights,
};
use crate::fpnum::{pow2, FpFormat};
use crate::graph::{build_graph, Graph, GraphError, LayerSpec, OpKind, TensorId};

/// Largest item count [`knapsack_bruteforce`] accepts.
pub const MAX_KNAPSACK_ITEMS: usize = 20;
/// Largest tensor set [`solve_tradeoff_bruteforce`] accepts.
pub const MAX_FACTORED_TENSORS: usize = 24;
/// Largest tensor set [`solve_tradeoff_direct`] accepts.
pub const MAX_DIRECT_TENSORS: usize = 18;

const MAX_LO_BITS: u32 = 16;
const MAX_HI_BITS: u32 = 32;
const MAX_EXTRA_BIAS: i32 = 16;
const MAX_K: u32 = 1074;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReductionError {
    #[error("invalid knapsack instance: {0}")]
    InvalidInstance(&'static str),
    #[error("{items} items exceed the brute-force limit of {limit}")]
    TooManyItems { items: usize, limit: usize },
    #[error("{tensors} tensors exceed the enumeration limit of {limit}")]
    EnumerationRefused { tensors: usize, limit: usize },
    #[error("no format pair satisfies the construction within the search space")]
    NoFormats,
    #[error("no assignment reaches the required low-precision ratio")]
    Infeasible,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Assign(#[from] AssignError),
}

/// `α_i = true` when item `i` is selected.
pub type Selection = Vec<bool>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnapsackInstance {
    weights: Vec<u64>,
    profits: Vec<u64>,
    capacity: u64,
}

impl KnapsackInstance {
    /// Weights and profits must be positive and of equal, nonzero length.
    pub fn new(weights: Vec<u64>, profits: Vec<u64>, capacity: u64) -> Result<Self, ReductionError> {
        if weights.is_empty() {
            return Err(ReductionError::InvalidInstance("no items"));
        }
        if weights.len() != profits.len() {
            return Err(ReductionError::InvalidInstance("weights and profits differ in length"));
        }
        if weights.contains(&0) || profits.contains(&0) {
            return Err(ReductionError::InvalidInstance("weights and profits must be positive"));
        }
        Ok(KnapsackInstance {
            weights,
            profits,
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[u64] {
        &self.weights
    }

    pub fn profits(&self) -> &[u64] {
        &self.profits
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn weight_of(&self, alpha: &[bool]) -> u64 {
        self.weights.iter().zip(alpha).filter(|(_, &a)| a).map(|(w, _)| w).sum()
    }

    pub fn profit_of(&self, alpha: &[bool]) -> u64 {
        self.profits.iter().zip(alpha).filter(|(_, &a)| a).map(|(p, _)| p).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnapsackSolution {
    pub selection: Selection,
    pub profit: u64,
}

fn selection_from_mask(mask: u32, n: usize) -> Selection {
    // item 0 is the most significant bit, so ascending masks are in
    // lexicographic order of the selection
    (0..n).map(|i| mask >> (n - 1 - i) & 1 == 1).collect()
}

/// Exhaustive search over all `2^n` selections. Among optimal selections the
/// lexicographically smallest one is returned.
pub fn knapsack_bruteforce(inst: &KnapsackInstance) -> Result<KnapsackSolution, ReductionError> {
    let n = inst.len();
    if n > MAX_KNAPSACK_ITEMS {
        return Err(ReductionError::TooManyItems {
            items: n,
            limit: MAX_KNAPSACK_ITEMS,
        });
    }
    let mut best = KnapsackSolution {
        selection: vec![false; n],
        profit: 0,
    };
    for mask in 0..1u32 << n {
        let alpha = selection_from_mask(mask, n);
        if inst.weight_of(&alpha) > inst.capacity {
            continue;
        }
        let profit = inst.profit_of(&alpha);
        if profit > best.profit {
            best = KnapsackSolution {
                selection: alpha,
                profit,
            };
        }
    }
    Ok(best)
}

/// Formats and constants of a constructed instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormatChoice {
    pub hi: FpFormat,
    pub lo: FpFormat,
    pub k: u32,
    pub l: u32,
}

fn err_bound(inst: &KnapsackInstance) -> f64 {
    let max_p = *inst.profits.iter().max().expect("nonempty") as f64;
    1.0 / (6.0 * inst.len() as f64 * max_p)
}

fn rounds_to(format: FpFormat, x: f64) -> f64 {
    format.round(x).map(|o| o.value).unwrap_or(f64::NAN)
}

/// `x_i = rnd_lo(sqrt(p_i / w_i))`, or `None` when some relative error is not
/// below the bound.
fn lo_inputs(inst: &KnapsackInstance, lo: FpFormat, err: f64) -> Option<Vec<f64>> {
    inst.weights
        .iter()
        .zip(&inst.profits)
        .map(|(&w, &p)| {
            let s = libm::sqrt(p as f64 / w as f64);
            let x = rounds_to(lo, s);
            ((x - s).abs() < s * err).then_some(x)
        })
        .collect()
}

fn underflows_in(lo: FpFormat, k: u32, x: &[f64]) -> bool {
    let scale = pow2(-(k as i64));
    rounds_to(lo, scale) == 0.0 && x.iter().all(|&xi| rounds_to(lo, scale * xi) == 0.0)
}

/// `-2^e` for the smallest `2^e` strictly above `2^-(k+l) Σ w_i x_i²`.
fn target_for(inst: &KnapsackInstance, x: &[f64], k: u32, l: u32) -> f64 {
    let bound = pow2(-((k + l) as i64)) * weighted_square_sum(inst, x, &vec![true; x.len()]);
    let (_, e) = libm::frexp(bound);
    -pow2(e as i64)
}

fn weighted_square_sum(inst: &KnapsackInstance, x: &[f64], beta: &[bool]) -> f64 {
    inst.weights
        .iter()
        .zip(x)
        .zip(beta)
        .filter(|(_, &b)| b)
        .map(|((&w, &xi), _)| w as f64 * xi * xi)
        .sum()
}

fn hi_accepts(inst: &KnapsackInstance, hi: FpFormat, x: &[f64], k: u32, l: u32) -> bool {
    let exact = |v: f64| hi.is_representable(v);
    let sk = pow2(-(k as i64));
    let skl = pow2(-((k + l) as i64));
    exact(1.0)
        && exact(sk)
        && x.iter().all(|&xi| exact(xi) && exact(sk * xi) && exact(skl * xi))
        && exact(target_for(inst, x, k, l))
}

fn extra_biases() -> impl Iterator<Item = i32> {
    core::iter::once(0).chain((1..=MAX_EXTRA_BIAS).flat_map(|b| [-b, b]))
}

fn formats_of_width(bits: u32) -> impl Iterator<Item = FpFormat> {
    (1..bits).flat_map(move |e| {
        extra_biases().filter_map(move |b| FpFormat::new(e, bits - 1 - e, b).ok())
    })
}

/// Searches for `(fp_hi, fp_lo, k)` satisfying the construction's conditions,
/// smallest combined bitwidth first:
///
/// * every `sqrt(p_i/w_i)` has relative error below `1/(6n max p)` in `fp_lo`;
/// * `2^-k` and every `2^-k x_i` round to zero in `fp_lo`;
/// * `2^-k`, `2^-k x_i` and `2^-(k+l) x_i` are exact in `fp_hi`;
/// * `fp_hi` has at least as many exponent and mantissa bits as `fp_lo`.
///
/// The simulated training also needs `1` exact in both formats and `x_i` and
/// the target `y` exact in `fp_hi`. When `k` is `None` the smallest working
/// `k` is used for each low format; `l` defaults to 1.
pub fn choose_formats(
    inst: &KnapsackInstance,
    k: Option<u32>,
    l: Option<u32>,
) -> Result<FormatChoice, ReductionError> {
    let l = l.unwrap_or(1);
    if k == Some(0) || l == 0 {
        return Err(ReductionError::InvalidInstance("k and l must be at least 1"));
    }
    let err = err_bound(inst);
    for total in 7..=MAX_LO_BITS + MAX_HI_BITS {
        for lo_bits in 3..=MAX_LO_BITS.min(total / 2) {
            let hi_bits = total - lo_bits;
            if hi_bits <= lo_bits || hi_bits > MAX_HI_BITS {
                continue;
            }
            for lo in formats_of_width(lo_bits) {
                if !lo.is_representable(1.0) {
                    continue;
                }
                let Some(x) = lo_inputs(inst, lo, err) else {
                    continue;
                };
                let k = match k {
                    Some(k) if underflows_in(lo, k, &x) => k,
                    Some(_) => continue,
                    None => match (1..=MAX_K).find(|&k| underflows_in(lo, k, &x)) {
                        Some(k) => k,
                        None => continue,
                    },
                };
                let found = formats_of_width(hi_bits)
                    .filter(|hi| hi.exp_bits() >= lo.exp_bits() && hi.man_bits() >= lo.man_bits())
                    .find(|&hi| hi_accepts(inst, hi, &x, k, l));
                if let Some(hi) = found {
                    return Ok(FormatChoice { hi, lo, k, l });
                }
            }
        }
    }
    Err(ReductionError::NoFormats)
}

/// A constructed tradeoff instance.
#[derive(Debug, Clone)]
pub struct ReductionInstance {
    pub knapsack: KnapsackInstance,
    pub formats: FormatChoice,
    pub x: Vec<f64>,
    pub y: f64,
    pub r: f64,
    pub graph: Graph,
    pub candidate: PrecisionCandidate,
    /// `dθ_i` per branch.
    pub weight_grads: Vec<TensorId>,
    /// Gradient of branch `i`'s output.
    pub branch_grads: Vec<TensorId>,
    /// Gradient of the summed prediction.
    pub prediction_grad: TensorId,
}

impl ReductionInstance {
    pub fn num_tensors(&self) -> usize {
        self.graph.num_tensors()
    }

    /// `size(TS)`.
    pub fn size(&self) -> usize {
        self.graph.size()
    }

    /// Smallest low-precision size meeting `lrt >= r`, i.e. `size(TS) - 2W - 1`
    /// clamped at zero. Integer form of the ratio constraint.
    pub fn required_lo_size(&self) -> usize {
        let budget = 2 * self.knapsack.capacity as u128 + 1;
        (self.size() as u128).saturating_sub(budget) as usize
    }

    pub fn is_feasible(&self, pi: &PrecisionAssignment) -> bool {
        pi.lo_size(&self.graph) >= self.required_lo_size()
    }

    fn learning_rate(&self) -> f64 {
        pow2(-(self.formats.l as i64))
    }

    fn batch(&self) -> Batch<'_> {
        Batch {
            inputs: &self.x,
            targets: Targets::Values(core::slice::from_ref(&self.y)),
        }
    }
}

/// The split/branch/sum network for `inst`, with `x` of length `n` as input.
pub fn reduction_graph(inst: &KnapsackInstance, k: u32) -> Result<Graph, ReductionError> {
    let n = inst.len();
    let mut layers = Vec::with_capacity(2 * n + 2);
    for i in 0..n {
        layers.push(LayerSpec::reading(OpKind::Split { offset: i, len: 1 }, vec![1]));
    }
    for (i, &w) in inst.weights.iter().enumerate() {
        layers.push(LayerSpec::reading(OpKind::Dense { out: w as usize }, vec![i + 2]));
    }
    layers.push(LayerSpec::reading(OpKind::ReduceSum, (n + 2..=2 * n + 1).collect()));
    layers.push(LayerSpec::new(OpKind::AbsLoss {
        scale: pow2(-(k as i64)),
    }));
    Ok(build_graph(&layers, &[n])?)
}

/// Builds the tradeoff instance for `inst`.
pub fn build_instance(
    inst: &KnapsackInstance,
    k: Option<u32>,
    l: Option<u32>,
) -> Result<ReductionInstance, ReductionError> {
    let formats = choose_formats(inst, k, l)?;
    let err = err_bound(inst);
    let x = lo_inputs(inst, formats.lo, err).expect("checked by the format search");
    let y = target_for(inst, &x, formats.k, formats.l);
    let graph = reduction_graph(inst, formats.k)?;
    let candidate = PrecisionCandidate::uniform(&graph, formats.lo, formats.hi)?;
    let n = inst.len();
    let weight_grads = (n + 1..=2 * n)
        .map(|j| graph.weight_grad(j).expect("branch has weights"))
        .collect();
    let branch_grads = (n + 2..=2 * n + 1).map(|a| graph.activation_grad(a)).collect();
    let prediction_grad = graph.activation_grad(2 * n + 2);
    let size = graph.size() as f64;
    let r = (1.0 - (2.0 * inst.capacity as f64 + 1.0) / size).max(0.0);
    Ok(ReductionInstance {
        knapsack: inst.clone(),
        formats,
        x,
        y,
        r,
        graph,
        candidate,
        weight_grads,
        branch_grads,
        prediction_grad,
    })
}

/// `α_i = 1` iff `dθ_i`, the gradient of branch `i` and the gradient of the
/// prediction are all high.
pub fn extract_selection(ri: &ReductionInstance, pi: &PrecisionAssignment) -> Selection {
    let hi = |id: TensorId| pi.level(id) == Level::Hi;
    ri.weight_grads
        .iter()
        .zip(&ri.branch_grads)
        .map(|(&dw, &db)| hi(dw) && hi(db) && hi(ri.prediction_grad))
        .collect()
}

/// `2^-k y + 2^-(2k+l) Σ α_i w_i x_i²`.
pub fn acc_closed_form(ri: &ReductionInstance, alpha: &[bool]) -> f64 {
    let FormatChoice { k, l, .. } = ri.formats;
    pow2(-(k as i64)) * ri.y
        + pow2(-((2 * k + l) as i64)) * weighted_square_sum(&ri.knapsack, &ri.x, alpha)
}

/// Largest `|Σ β_i w_i x_i² - Σ β_i p_i|` over all `β`.
pub fn max_profit_gap(ri: &ReductionInstance) -> f64 {
    let n = ri.knapsack.len();
    (0..1u32 << n)
        .map(|mask| {
            let beta = selection_from_mask(mask, n);
            (weighted_square_sum(&ri.knapsack, &ri.x, &beta) - ri.knapsack.profit_of(&beta) as f64)
                .abs()
        })
        .fold(0.0, f64::max)
}

fn update_and_score(
    ri: &ReductionInstance,
    formats: &TensorFormats,
    trace: &ForwardTrace,
) -> Result<f64, ReductionError> {
    let g = &ri.graph;
    let step = backward(g, formats, trace, ri.batch(), 1.0)?;
    let mut weights = Weights::zeros(g);
    sgd_step(&mut weights, &step.weight_grads, ri.learning_rate(), ri.formats.hi)?;
    Ok(-exact_loss(g, &weights, ri.batch())?)
}

/// Accuracy after the one-step training under `pi`.
pub fn simulate_accuracy(ri: &ReductionInstance, pi: &PrecisionAssignment) -> Result<f64, ReductionError> {
    let formats = TensorFormats::from_assignment(&ri.candidate, pi)?;
    let trace = forward(&ri.graph, &formats, &Weights::zeros(&ri.graph), ri.batch())?;
    update_and_score(ri, &formats, &trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffSolution {
    pub assignment: PrecisionAssignment,
    pub accuracy: f64,
    pub lrt: f64,
}

/// Levels for the tensors in `ids`, tensor `ids[0]` on the most significant bit
/// of `bits` and `Lo` encoded as 1.
fn decode_levels(levels: &mut [Level], ids: &[TensorId], bits: u32) {
    let len = ids.len();
    for (j, id) in ids.iter().enumerate() {
        levels[id.0] = if bits >> (len - 1 - j) & 1 == 1 { Level::Lo } else { Level::Hi };
    }
}

fn lo_size_of(g: &Graph, ids: &[TensorId], bits: u32) -> usize {
    let len = ids.len();
    ids.iter()
        .enumerate()
        .filter(|(j, _)| bits >> (len - 1 - j) & 1 == 1)
        .map(|(_, id)| g.tensors()[id.0].size)
        .sum()
}

fn trace_key(trace: &ForwardTrace) -> Vec<u64> {
    // Everything the backward pass reads: operator inputs (the final loss
    // value is never read) and the rounded weights.
    let n = trace.activations.len();
    trace.activations[..n - 1]
        .iter()
        .chain(&trace.weights)
        .flat_map(|t| t.iter().map(|v| v.to_bits()).chain(core::iter::once(u64::MAX)))
        .collect()
}

/// Best backward assignment by low-precision size, for one forward state.
struct BackwardTable {
    /// Ascending distinct low sizes.
    lo_sizes: Vec<usize>,
    /// Best `(accuracy, bits)` among backward assignments with low size at
    /// least `lo_sizes[i]`; ties keep the smaller `bits`.
    best_from: Vec<(f64, u32)>,
}

impl BackwardTable {
    fn new(scores: &[(usize, f64)]) -> Self {
        let mut by_size: BTreeMap<usize, (f64, u32)> = BTreeMap::new();
        for (bits, &(size, acc)) in scores.iter().enumerate() {
            let bits = bits as u32;
            by_size
                .entry(size)
                .and_modify(|best| {
                    if better(acc, bits, *best) {
                        *best = (acc, bits);
                    }
                })
                .or_insert((acc, bits));
        }
        let lo_sizes: Vec<usize> = by_size.keys().copied().collect();
        let mut best_from: Vec<(f64, u32)> = by_size.values().copied().collect();
        for i in (0..best_from.len().saturating_sub(1)).rev() {
            let next = best_from[i + 1];
            if better(next.0, next.1, best_from[i]) {
                best_from[i] = next;
            }
        }
        BackwardTable { lo_sizes, best_from }
    }

    fn best_with_at_least(&self, lo_size: usize) -> Option<(f64, u32)> {
        let i = self.lo_sizes.partition_point(|&s| s < lo_size);
        self.best_from.get(i).copied()
    }
}

fn better(acc: f64, bits: u32, than: (f64, u32)) -> bool {
    acc > than.0 || (acc == than.0 && bits < than.1)
}

fn guard(ri: &ReductionInstance, limit: usize) -> Result<(), ReductionError> {
    let tensors = ri.num_tensors();
    if tensors > limit {
        return Err(ReductionError::EnumerationRefused { tensors, limit });
    }
    Ok(())
}

/// Exhaustive solution of the tradeoff problem over every assignment.
///
/// Every assignment is scored by simulating its training step, but the work
/// is shared: the forward pass depends only on the forward tensors' levels,
/// so it runs once per forward assignment, and the backward pass, update and
/// evaluation run once per distinct forward state and backward assignment.
/// Among optimal feasible assignments the lexicographically smallest one in
/// tensor-id order (with `hi < lo`) is returned.
pub fn solve_tradeoff_bruteforce(ri: &ReductionInstance) -> Result<TradeoffSolution, ReductionError> {
    guard(ri, MAX_FACTORED_TENSORS)?;
    let g = &ri.graph;
    let (fwd, bwd): (Vec<TensorId>, Vec<TensorId>) = {
        let (f, b): (Vec<_>, Vec<_>) = g.tensors().iter().partition(|t| t.kind.is_forward());
        (f.iter().map(|t| t.id).collect(), b.iter().map(|t| t.id).collect())
    };
    debug_assert!(fwd.iter().all(|f| bwd.iter().all(|b| f < b)));
    let zeros = Weights::zeros(g);
    let mut levels = vec![Level::Hi; g.num_tensors()];

    // forward states, keyed by what the backward pass reads
    let mut states: Vec<(ForwardTrace, Vec<Level>)> = Vec::new();
    let mut state_index: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let mut fwd_runs: Vec<(usize, usize)> = Vec::with_capacity(1 << fwd.len());
    for bits in 0..1u32 << fwd.len() {
        decode_levels(&mut levels, &fwd, bits);
        let pi = PrecisionAssignment::from_levels(levels.clone());
        let formats = TensorFormats::from_assignment(&ri.candidate, &pi)?;
        let trace = forward(g, &formats, &zeros, ri.batch())?;
        let next = states.len();
        let s = *state_index.entry(trace_key(&trace)).or_insert(next);
        if s == next {
            states.push((trace, levels.clone()));
        }
        fwd_runs.push((s, lo_size_of(g, &fwd, bits)));
    }

    let mut tables = Vec::with_capacity(states.len());
    for (trace, fwd_levels) in &states {
        let mut levels = fwd_levels.clone();
        let mut memo: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
        let mut scores = Vec::with_capacity(1 << bwd.len());
        for bits in 0..1u32 << bwd.len() {
            decode_levels(&mut levels, &bwd, bits);
            let pi = PrecisionAssignment::from_levels(levels.clone());
            let formats = TensorFormats::from_assignment(&ri.candidate, &pi)?;
            let step = backward(g, &formats, trace, ri.batch(), 1.0)?;
            let mut weights = Weights::zeros(g);
            sgd_step(&mut weights, &step.weight_grads, ri.learning_rate(), ri.formats.hi)?;
            let acc = match memo.get(&weights.to_bits()) {
                Some(&acc) => acc,
                None => {
                    let acc = -exact_loss(g, &weights, ri.batch())?;
                    memo.insert(weights.to_bits(), acc);
                    acc
                }
            };
            scores.push((lo_size_of(g, &bwd, bits), acc));
        }
        tables.push(BackwardTable::new(&scores));
    }

    let need = ri.required_lo_size();
    let mut best: Option<(f64, u32, u32)> = None;
    for (fbits, &(s, fwd_lo)) in fwd_runs.iter().enumerate() {
        let Some((acc, bbits)) = tables[s].best_with_at_least(need.saturating_sub(fwd_lo)) else {
            continue;
        };
        if best.is_none_or(|(b, _, _)| acc > b) {
            best = Some((acc, fbits as u32, bbits));
        }
    }
    let (accuracy, fbits, bbits) = best.ok_or(ReductionError::Infeasible)?;
    decode_levels(&mut levels, &fwd, fbits);
    decode_levels(&mut levels, &bwd, bbits);
    let assignment = PrecisionAssignment::from_levels(levels);
    Ok(TradeoffSolution {
        lrt: lrt(g, &assignment),
        assignment,
        accuracy,
    })
}

/// Same answer as [`solve_tradeoff_bruteforce`], simulating every assignment
/// independently. Only for small tensor sets.
pub fn solve_tradeoff_direct(ri: &ReductionInstance) -> Result<TradeoffSolution, ReductionError> {
    guard(ri, MAX_DIRECT_TENSORS)?;
    let g = &ri.graph;
    let ids: Vec<TensorId> = g.tensors().iter().map(|t| t.id).collect();
    let mut levels = vec![Level::Hi; ids.len()];
    let mut best: Option<(f64, PrecisionAssignment)> = None;
    for bits in 0..1u32 << ids.len() {
        decode_levels(&mut levels, &ids, bits);
        let pi = PrecisionAssignment::from_levels(levels.clone());
        if !ri.is_feasible(&pi) {
            continue;
        }
        let acc = simulate_accuracy(ri, &pi)?;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, pi));
        }
    }
    let (accuracy, assignment) = best.ok_or(ReductionError::Infeasible)?;
    Ok(TradeoffSolution {
        lrt: lrt(g, &assignment),
        assignment,
        accuracy,
    })
}

/// Both brute-force answers and the selection read off the tradeoff optimum.
#[derive(Debug, Clone)]
pub struct ReductionReport {
    pub instance: ReductionInstance,
    pub tradeoff: TradeoffSolution,
    pub extracted: Selection,
    pub knapsack: KnapsackSolution,
}

impl ReductionReport {
    pub fn extracted_weight(&self) -> u64 {
        self.instance.knapsack.weight_of(&self.extracted)
    }

    pub fn extracted_profit(&self) -> u64 {
        self.instance.knapsack.profit_of(&self.extracted)
    }

    /// The extracted selection fits the capacity and is profit-optimal.
    pub fn holds(&self) -> bool {
        self.extracted_weight() <= self.instance.knapsack.capacity()
            && self.extracted_profit() == self.knapsack.profit
    }
}

/// Builds the instance, solves both problems exhaustively and compares them.
pub fn verify_reduction(
    inst: &KnapsackInstance,
    k: Option<u32>,
    l: Option<u32>,
) -> Result<ReductionReport, ReductionError> {
    let knapsack = knapsack_bruteforce(inst)?;
    let instance = build_instance(inst, k, l)?;
    let tradeoff = solve_tradeoff_bruteforce(&instance)?;
    let extracted = extract_selection(&instance, &tradeoff.assignment);
    Ok(ReductionReport {
        instance,
        tradeoff,
        extracted,
        knapsack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TensorKind;

    fn ks(w: &[u64], p: &[u64], cap: u64) -> KnapsackInstance {
        KnapsackInstance::new(w.to_vec(), p.to_vec(), cap).unwrap()
    }

    #[test]
    fn knapsack_examples() {
        let s = knapsack_bruteforce(&ks(&[1, 2], &[3, 1], 2)).unwrap();
        assert_eq!(s.selection, vec![true, false]);
        assert_eq!(s.profit, 3);
        let s = knapsack_bruteforce(&ks(&[1, 2, 2], &[1, 1, 1], 5)).unwrap();
        assert_eq!(s.selection, vec![true, true, true]);
        let s = knapsack_bruteforce(&ks(&[1, 2], &[3, 1], 0)).unwrap();
        assert_eq!(s.selection, vec![false, false]);
        assert_eq!(s.profit, 0);
        // ties: {0} and {1} both give 2; the smaller selection (false, true) wins
        let s = knapsack_bruteforce(&ks(&[1, 1], &[2, 2], 1)).unwrap();
        assert_eq!(s.selection, vec![false, true]);
        assert!(matches!(
            knapsack_bruteforce(&ks(&[1; 21], &[1; 21], 3)),
            Err(ReductionError::TooManyItems { items: 21, .. })
        ));
        assert!(KnapsackInstance::new(vec![1, 0], vec![1, 1], 1).is_err());
        assert!(KnapsackInstance::new(vec![], vec![], 1).is_err());
    }

    #[test]
    fn chosen_formats_meet_every_condition() {
        for inst in [ks(&[1, 1], &[1, 1], 1), ks(&[1, 2, 2], &[4, 3, 1], 2), ks(&[2], &[3], 0)] {
            let c = choose_formats(&inst, None, None).unwrap();
            let ri = build_instance(&inst, None, None).unwrap();
            let err = err_bound(&inst);
            for (i, (&w, &p)) in inst.weights().iter().zip(inst.profits()).enumerate() {
                let s = libm::sqrt(p as f64 / w as f64);
                assert!((ri.x[i] - s).abs() < s * err);
            }
            let sk = pow2(-(c.k as i64));
            let skl = pow2(-((c.k + c.l) as i64));
            let mut s2 = vec![sk];
            s2.extend(ri.x.iter().map(|x| sk * x));
            for &s in &s2 {
                assert_eq!(c.lo.round(s).unwrap().value, 0.0);
                assert_eq!(c.hi.round(s).unwrap().value, s);
            }
            for x in &ri.x {
                assert_eq!(c.hi.round(skl * x).unwrap().value, skl * x);
            }
            assert!(c.hi.exp_bits() >= c.lo.exp_bits() && c.hi.man_bits() >= c.lo.man_bits());
            assert!(c.hi.bitwidth() <= 32);
            let bound = -skl * weighted_square_sum(&inst, &ri.x, &vec![true; inst.len()]);
            assert!(ri.y < bound);
            assert!(c.hi.is_representable(ri.y));
        }
    }

    #[test]
    fn caller_supplied_k_is_honoured() {
        let inst = ks(&[1, 1], &[1, 1], 1);
        let auto = choose_formats(&inst, None, None).unwrap();
        let c = choose_formats(&inst, Some(auto.k + 3), Some(2)).unwrap();
        assert_eq!((c.k, c.l), (auto.k + 3, 2));
        assert!(choose_formats(&inst, Some(0), None).is_err());
    }

    #[test]
    fn instance_shape() {
        let ri = build_instance(&ks(&[1, 2], &[3, 1], 2), None, None).unwrap();
        let g = &ri.graph;
        assert_eq!(g.num_tensors(), 18);
        assert_eq!(g.tensors().iter().filter(|t| t.kind == TensorKind::FwdWeight).count(), 2);
        assert_eq!(g.tensor(g.weight(3).unwrap()).unwrap().size, 1);
        assert_eq!(g.tensor(g.weight(4).unwrap()).unwrap().size, 2);
        // activations: x(2) + splits(1+1) + branches(1+2) + sum(1) + loss(1) = 9,
        // doubled for gradients, plus weights and weight gradients of size 3
        assert_eq!(ri.size(), 9 * 2 + 3 * 2);
        assert_eq!(ri.r, 1.0 - 5.0 / 24.0);
        assert_eq!(ri.required_lo_size(), 19);
        let big = build_instance(&ks(&[1, 2], &[3, 1], 50), None, None).unwrap();
        assert_eq!(big.r, 0.0);
        assert_eq!(big.required_lo_size(), 0);
    }

    #[test]
    fn selection_extraction() {
        let ri = build_instance(&ks(&[1, 2, 1], &[3, 1, 2], 2), None, None).unwrap();
        let g = &ri.graph;
        let all_hi = PrecisionAssignment::all(g, Level::Hi);
        assert_eq!(extract_selection(&ri, &all_hi), vec![true; 3]);
        assert_eq!(extract_selection(&ri, &PrecisionAssignment::all(g, Level::Lo)), vec![false; 3]);
        let mut pi = all_hi.clone();
        pi.set(ri.weight_grads[0], Level::Lo);
        assert_eq!(extract_selection(&ri, &pi), vec![false, true, true]);
        let mut pi = all_hi;
        pi.set(ri.prediction_grad, Level::Lo);
        assert_eq!(extract_selection(&ri, &pi), vec![false; 3]);
    }

    #[test]
    fn closed_form_endpoints() {
        let ri = build_instance(&ks(&[1, 2], &[3, 1], 2), None, None).unwrap();
        let k = ri.formats.k as i64;
        assert_eq!(acc_closed_form(&ri, &[false, false]), pow2(-k) * ri.y);
        let g = &ri.graph;
        assert_eq!(
            simulate_accuracy(&ri, &PrecisionAssignment::all(g, Level::Hi)).unwrap(),
            acc_closed_form(&ri, &[true, true])
        );
        assert_eq!(
            simulate_accuracy(&ri, &PrecisionAssignment::all(g, Level::Lo)).unwrap(),
            acc_closed_form(&ri, &[false, false])
        );
    }

    #[test]
    fn solver_endpoints() {
        let open = build_instance(&ks(&[1], &[1], 50), None, None).unwrap();
        let s = solve_tradeoff_bruteforce(&open).unwrap();
        assert_eq!(s.assignment, PrecisionAssignment::all(&open.graph, Level::Hi));
        assert_eq!(s.accuracy, acc_closed_form(&open, &[true]));

        let ri = build_instance(&ks(&[1], &[1], 0), None, None).unwrap();
        let s = solve_tradeoff_bruteforce(&ri).unwrap();
        assert_eq!(extract_selection(&ri, &s.assignment), vec![false]);
        assert!(ri.is_feasible(&s.assignment));
    }

    #[test]
    fn factored_and_direct_solvers_agree() {
        for inst in [ks(&[1], &[2], 0), ks(&[2], &[3], 1), ks(&[1, 2], &[3, 1], 2), ks(&[1, 1], &[1, 2], 1)] {
            let ri = build_instance(&inst, None, None).unwrap();
            let a = solve_tradeoff_bruteforce(&ri).unwrap();
            let b = solve_tradeoff_direct(&ri).unwrap();
            assert_eq!(a, b, "{inst:?}");
        }
    }

    #[test]
    fn reduction_examples() {
        let r = verify_reduction(&ks(&[1, 2], &[3, 1], 2), None, None).unwrap();
        assert!(r.holds());
        assert_eq!(r.extracted, vec![true, false]);
        let r = verify_reduction(&ks(&[1, 2], &[3, 1], 3), None, None).unwrap();
        assert!(r.holds());
        assert_eq!(r.extracted, vec![true, true]);
        let r = verify_reduction(&ks(&[1], &[1], 0), None, None).unwrap();
        assert!(r.holds());
        assert_eq!(r.extracted, vec![false]);
    }

    #[test]
    fn profit_gap_below_half() {
        let ri = build_instance(&ks(&[1, 2, 2], &[4, 3, 1], 2), None, None).unwrap();
        assert!(max_profit_gap(&ri) < 0.5);
    }
}
