//! Precision candidates, precision assignments and the schemes that build them.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fpnum::FpFormat;
use crate::graph::{group_tensors, Graph, TensorGroup, TensorId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssignError {
    #[error("low-precision formats must share one bitwidth")]
    MixedLowBitwidth,
    #[error("high-precision formats must share one bitwidth")]
    MixedHighBitwidth,
    #[error("low bitwidth {lo} must be smaller than high bitwidth {hi}")]
    NotNarrower { lo: u32, hi: u32 },
    #[error("covers {got} tensors, graph has {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("ratio {0} outside [0, 1]")]
    RatioOutOfRange(f64),
    #[error("unknown tensor id {0}")]
    UnknownTensor(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Lo,
    Hi,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Lo => "lo",
            Level::Hi => "hi",
        }
    }
}

/// The pair of formats each tensor may take.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionCandidate {
    lo: Vec<FpFormat>,
    hi: Vec<FpFormat>,
}

impl PrecisionCandidate {
    pub fn new(lo: Vec<FpFormat>, hi: Vec<FpFormat>) -> Result<Self, AssignError> {
        if lo.len() != hi.len() {
            return Err(AssignError::SizeMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        let lo_bits = lo.first().map(FpFormat::bitwidth).unwrap_or(0);
        let hi_bits = hi.first().map(FpFormat::bitwidth).unwrap_or(0);
        if lo.iter().any(|f| f.bitwidth() != lo_bits) {
            return Err(AssignError::MixedLowBitwidth);
        }
        if hi.iter().any(|f| f.bitwidth() != hi_bits) {
            return Err(AssignError::MixedHighBitwidth);
        }
        if !lo.is_empty() && lo_bits >= hi_bits {
            return Err(AssignError::NotNarrower {
                lo: lo_bits,
                hi: hi_bits,
            });
        }
        Ok(PrecisionCandidate { lo, hi })
    }

    /// The same `(lo, hi)` pair for every tensor.
    pub fn uniform(g: &Graph, lo: FpFormat, hi: FpFormat) -> Result<Self, AssignError> {
        let n = g.num_tensors();
        Self::new(vec![lo; n], vec![hi; n])
    }

    pub fn lo_of(&self, id: TensorId) -> FpFormat {
        self.lo[id.0]
    }

    pub fn hi_of(&self, id: TensorId) -> FpFormat {
        self.hi[id.0]
    }

    pub fn format(&self, id: TensorId, level: Level) -> FpFormat {
        match level {
            Level::Lo => self.lo[id.0],
            Level::Hi => self.hi[id.0],
        }
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    /// Resolves an assignment into one format per tensor.
    pub fn resolve(&self, assignment: &PrecisionAssignment) -> Result<Vec<FpFormat>, AssignError> {
        if assignment.len() != self.len() {
            return Err(AssignError::SizeMismatch {
                expected: self.len(),
                got: assignment.len(),
            });
        }
        Ok(assignment
            .levels()
            .iter()
            .enumerate()
            .map(|(i, &level)| self.format(TensorId(i), level))
            .collect())
    }
}

/// 16-bit `fp(6,9,0)` everywhere for high precision; 8-bit `fp(4,3,4)` on
/// forward tensors and `fp(5,2,0)` on backward tensors for low precision.
pub fn candidate_hfp8(g: &Graph) -> PrecisionCandidate {
    let hi = FpFormat::new(6, 9, 0).expect("valid format");
    let fwd_lo = FpFormat::new(4, 3, 4).expect("valid format");
    let bwd_lo = FpFormat::new(5, 2, 0).expect("valid format");
    let lo = g
        .tensors()
        .iter()
        .map(|t| if t.kind.is_forward() { fwd_lo } else { bwd_lo })
        .collect();
    PrecisionCandidate::new(lo, vec![hi; g.num_tensors()]).expect("hfp8 candidate is well formed")
}

/// A lo/hi choice per tensor, plus the tensors pinned to high precision.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PrecisionAssignment {
    levels: Vec<Level>,
    forced_hi: Vec<bool>,
}

impl PrecisionAssignment {
    pub fn all(g: &Graph, level: Level) -> Self {
        PrecisionAssignment {
            levels: vec![level; g.num_tensors()],
            forced_hi: vec![false; g.num_tensors()],
        }
    }

    pub fn from_levels(levels: Vec<Level>) -> Self {
        let n = levels.len();
        PrecisionAssignment {
            levels,
            forced_hi: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level(&self, id: TensorId) -> Level {
        self.levels[id.0]
    }

    pub fn is_forced(&self, id: TensorId) -> bool {
        self.forced_hi[id.0]
    }

    pub fn forced_hi(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.forced_hi
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(i, _)| TensorId(i))
    }

    /// Sets a level; forced tensors stay high.
    pub fn set(&mut self, id: TensorId, level: Level) {
        if !self.forced_hi[id.0] {
            self.levels[id.0] = level;
        }
    }

    /// Pins tensors to high precision.
    pub fn force_hi(&mut self, ids: &[TensorId]) -> Result<(), AssignError> {
        for id in ids {
            if id.0 >= self.levels.len() {
                return Err(AssignError::UnknownTensor(id.0));
            }
            self.forced_hi[id.0] = true;
            self.levels[id.0] = Level::Hi;
        }
        Ok(())
    }

    pub fn lo_size(&self, g: &Graph) -> usize {
        g.tensors()
            .iter()
            .filter(|t| self.levels[t.id.0] == Level::Lo)
            .map(|t| t.size)
            .sum()
    }
}

/// Low-precision ratio: size of the low tensors over the size of the tensor set.
pub fn lrt(g: &Graph, assignment: &PrecisionAssignment) -> f64 {
    let total = g.size();
    if total == 0 {
        return 0.0;
    }
    assignment.lo_size(g) as f64 / total as f64
}

fn check_cover(g: &Graph, forced_hi: &[TensorId]) -> Result<(), AssignError> {
    match forced_hi.iter().find(|id| id.0 >= g.num_tensors()) {
        Some(id) => Err(AssignError::UnknownTensor(id.0)),
        None => Ok(()),
    }
}

/// Every tensor low, except the forced ones.
pub fn assign_uniform(g: &Graph, forced_hi: &[TensorId]) -> Result<PrecisionAssignment, AssignError> {
    check_cover(g, forced_hi)?;
    let mut pi = PrecisionAssignment::all(g, Level::Lo);
    pi.force_hi(forced_hi)?;
    Ok(pi)
}

/// Which tensors around an inner GEMM go low.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpVariant {
    /// Inputs only: `x_i, θ_i, dx_{i+1}`.
    Op,
    /// Inputs and outputs: `x_i, θ_i, x_{i+1}, dx_i, dθ_i, dx_{i+1}`.
    OpPrime,
}

/// Operator-based assignment: low precision around every GEMM except the first
/// and the last one in operator order.
pub fn assign_op_based(
    g: &Graph,
    variant: OpVariant,
    forced_hi: &[TensorId],
) -> Result<PrecisionAssignment, AssignError> {
    check_cover(g, forced_hi)?;
    let mut pi = PrecisionAssignment::all(g, Level::Hi);
    let gemms: Vec<_> = g.ops().iter().filter(|op| op.is_gemm()).collect();
    if gemms.len() > 2 {
        for op in &gemms[1..gemms.len() - 1] {
            let out = op.index + 1;
            let mut lo = Vec::new();
            for &a in &op.inputs {
                lo.push(g.activation(a));
                if variant == OpVariant::OpPrime {
                    lo.push(g.activation_grad(a));
                }
            }
            lo.push(g.activation_grad(out));
            if let Some(w) = g.weight(op.index) {
                lo.push(w);
            }
            if variant == OpVariant::OpPrime {
                lo.push(g.activation(out));
                lo.extend(g.weight_grad(op.index));
            }
            for id in lo {
                pi.set(id, Level::Lo);
            }
        }
    }
    pi.force_hi(forced_hi)?;
    Ok(pi)
}

/// Order in which tensor groups are demoted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemotionOrder {
    Decreasing,
    Increasing,
    Random { seed: u64 },
}

/// Output of [`assign_ours`].
#[derive(Debug, Clone, PartialEq)]
pub struct Demotion {
    pub assignment: PrecisionAssignment,
    pub groups: Vec<TensorGroup>,
    /// Indices into `groups`, in the order they were demoted.
    pub demoted: Vec<usize>,
}

/// Group indices in the order `order` visits them. Equal sizes keep
/// operator order.
pub fn demotion_sequence(groups: &[TensorGroup], order: DemotionOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..groups.len()).collect();
    match order {
        DemotionOrder::Decreasing => idx.sort_by(|&a, &b| groups[b].total_size.cmp(&groups[a].total_size)),
        DemotionOrder::Increasing => idx.sort_by_key(|&a| groups[a].total_size),
        DemotionOrder::Random { seed } => idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    idx
}

/// Size-ordered precision demotion.
///
/// Starts from all-high and demotes whole groups in the given order until the
/// low-precision ratio first reaches `r`. Forced tensors count towards their
/// group's size but never change level.
pub fn assign_ours(
    g: &Graph,
    r: f64,
    order: DemotionOrder,
    forced_hi: &[TensorId],
) -> Result<Demotion, AssignError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(AssignError::RatioOutOfRange(r));
    }
    check_cover(g, forced_hi)?;
    let groups = group_tensors(g);
    let mut pi = PrecisionAssignment::all(g, Level::Hi);
    pi.force_hi(forced_hi)?;

    let mut demoted = Vec::new();
    for gi in demotion_sequence(&groups, order) {
        if lrt(g, &pi) >= r {
            break;
        }
        for &id in &groups[gi].members {
            pi.set(id, Level::Lo);
        }
        demoted.push(gi);
    }
    Ok(Demotion {
        assignment: pi,
        groups,
        demoted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, LayerSpec, OpKind, TensorKind};

    fn three_gemm() -> Graph {
        // GEMMs at operators 1, 3 and 5.
        build_graph(
            &[
                OpKind::Dense { out: 6 }.into(),
                OpKind::Relu.into(),
                OpKind::Dense { out: 5 }.into(),
                OpKind::Relu.into(),
                OpKind::Dense { out: 3 }.into(),
                OpKind::SoftmaxCrossEntropy.into(),
            ],
            &[4],
        )
        .unwrap()
    }

    #[test]
    fn hfp8_candidate() {
        let g = three_gemm();
        let c = candidate_hfp8(&g);
        assert_eq!(c.lo_of(g.activation(1)), FpFormat::new(4, 3, 4).unwrap());
        assert_eq!(c.lo_of(g.activation_grad(2)), FpFormat::new(5, 2, 0).unwrap());
        assert_eq!(c.lo_of(g.weight(1).unwrap()).bitwidth(), 8);
        assert_eq!(c.hi_of(g.weight_grad(3).unwrap()), FpFormat::new(6, 9, 0).unwrap());
        assert_eq!(c.hi_of(g.activation(1)).bitwidth(), 16);
    }

    #[test]
    fn candidate_validation() {
        let a = FpFormat::new(4, 3, 0).unwrap();
        let b = FpFormat::new(5, 2, 0).unwrap();
        let wide = FpFormat::new(6, 9, 0).unwrap();
        assert!(PrecisionCandidate::new(vec![a, b], vec![wide, wide]).is_ok());
        assert_eq!(
            PrecisionCandidate::new(vec![a, wide], vec![wide, wide]),
            Err(AssignError::MixedLowBitwidth)
        );
        assert_eq!(
            PrecisionCandidate::new(vec![wide], vec![a]),
            Err(AssignError::NotNarrower { lo: 16, hi: 8 })
        );
    }

    #[test]
    fn uniform_assignment() {
        let g = three_gemm();
        let pi = assign_uniform(&g, &[]).unwrap();
        assert_eq!(lrt(&g, &pi), 1.0);
        let forced = g.backward_weight_tensors();
        let pi = assign_uniform(&g, &forced).unwrap();
        for t in g.tensors() {
            let expect = if t.kind == TensorKind::BwdWeight { Level::Hi } else { Level::Lo };
            assert_eq!(pi.level(t.id), expect);
        }
        assert!(assign_uniform(&g, &[TensorId(500)]).is_err());
    }

    #[test]
    fn op_based_skips_first_and_last_gemm() {
        let g = three_gemm();
        let pi = assign_op_based(&g, OpVariant::Op, &[]).unwrap();
        let lo: Vec<_> = g.tensors().iter().filter(|t| pi.level(t.id) == Level::Lo).map(|t| t.id).collect();
        let mut expect = vec![g.activation(3), g.weight(3).unwrap(), g.activation_grad(4)];
        expect.sort();
        assert_eq!(lo, expect);

        let forced = g.backward_weight_tensors();
        let pi = assign_op_based(&g, OpVariant::OpPrime, &forced).unwrap();
        let lo: Vec<_> = g.tensors().iter().filter(|t| pi.level(t.id) == Level::Lo).map(|t| t.id).collect();
        let mut expect = vec![
            g.activation(3),
            g.weight(3).unwrap(),
            g.activation(4),
            g.activation_grad(3),
            g.activation_grad(4),
        ];
        expect.sort();
        assert_eq!(lo, expect);
        assert_eq!(pi.level(g.weight_grad(3).unwrap()), Level::Hi);
    }

    #[test]
    fn op_based_with_two_gemms_is_all_high() {
        let g = build_graph(
            &[OpKind::Dense { out: 8 }.into(), OpKind::Relu.into(), OpKind::Dense { out: 3 }.into(), OpKind::SoftmaxCrossEntropy.into()],
            &[4],
        )
        .unwrap();
        for variant in [OpVariant::Op, OpVariant::OpPrime] {
            let pi = assign_op_based(&g, variant, &[]).unwrap();
            assert_eq!(lrt(&g, &pi), 0.0);
        }
    }

    fn sized_groups() -> Graph {
        build_graph(
            &[
                OpKind::Dense { out: 2 }.into(),
                LayerSpec::new(OpKind::Dense { out: 2 }),
                OpKind::SoftmaxCrossEntropy.into(),
            ],
            &[3],
        )
        .unwrap()
    }

    #[test]
    fn demotion_stops_once_ratio_is_reached() {
        let g = sized_groups();
        let groups = group_tensors(&g);
        // x1,dx1,θ1,dθ1 = 3+3+6+6 = 18 ; x2,dx2,θ2,dθ2 = 2+2+4+4 = 12 ; x3,dx3,x4,dx4 = 2+2+1+1 = 6
        let sizes: Vec<_> = groups.iter().map(|g| g.total_size).collect();
        assert_eq!(sizes, vec![18, 12, 6]);
        assert_eq!(g.size(), 36);

        let d = assign_ours(&g, 0.0, DemotionOrder::Decreasing, &[]).unwrap();
        assert!(d.demoted.is_empty());
        assert_eq!(lrt(&g, &d.assignment), 0.0);

        let d = assign_ours(&g, 0.5, DemotionOrder::Decreasing, &[]).unwrap();
        assert_eq!(d.demoted, vec![0]);
        assert_eq!(lrt(&g, &d.assignment), 0.5);

        let d = assign_ours(&g, 0.51, DemotionOrder::Decreasing, &[]).unwrap();
        assert_eq!(d.demoted, vec![0, 1]);

        let d = assign_ours(&g, 0.2, DemotionOrder::Increasing, &[]).unwrap();
        assert_eq!(d.demoted, vec![2, 1]);

        let d = assign_ours(&g, 1.0, DemotionOrder::Decreasing, &[]).unwrap();
        assert_eq!(d.demoted.len(), 3);
        assert_eq!(lrt(&g, &d.assignment), 1.0);

        assert_eq!(
            assign_ours(&g, 1.5, DemotionOrder::Decreasing, &[]),
            Err(AssignError::RatioOutOfRange(1.5))
        );
    }

    #[test]
    fn demotes_only_the_largest_group() {
        // input 25 -> dense(1) -> 20 relus -> dense(4) -> loss gives groups of
        // 2*25*2 = 100, 2*1*(1 + 20 + 4) = 50 and 2*4 + 2 = 10 elements.
        let mut layers: Vec<LayerSpec> = vec![OpKind::Dense { out: 1 }.into()];
        layers.extend((0..20).map(|_| LayerSpec::new(OpKind::Relu)));
        layers.push(OpKind::Dense { out: 4 }.into());
        layers.push(OpKind::SoftmaxCrossEntropy.into());
        let g = build_graph(&layers, &[25]).unwrap();
        let sizes: Vec<_> = group_tensors(&g).iter().map(|g| g.total_size).collect();
        assert_eq!(sizes, vec![100, 50, 10]);

        let d = assign_ours(&g, 0.6, DemotionOrder::Decreasing, &[]).unwrap();
        assert_eq!(d.demoted, vec![0]);
        assert_eq!(lrt(&g, &d.assignment), 0.625);
    }

    #[test]
    fn forced_tensors_never_demoted() {
        let g = sized_groups();
        let forced = g.backward_weight_tensors();
        let d = assign_ours(&g, 1.0, DemotionOrder::Decreasing, &forced).unwrap();
        assert_eq!(d.demoted.len(), 3);
        for id in &forced {
            assert_eq!(d.assignment.level(*id), Level::Hi);
            assert!(d.assignment.is_forced(*id));
        }
        assert_eq!(lrt(&g, &d.assignment), 26.0 / 36.0);
    }

    #[test]
    fn random_order_is_seeded() {
        let g = three_gemm();
        let groups = group_tensors(&g);
        let a = demotion_sequence(&groups, DemotionOrder::Random { seed: 3 });
        let b = demotion_sequence(&groups, DemotionOrder::Random { seed: 3 });
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..groups.len()).collect::<Vec<_>>());
    }

    #[test]
    fn ties_keep_operator_order() {
        let groups: Vec<TensorGroup> = [5, 7, 5, 7]
            .iter()
            .map(|&s| TensorGroup { members: Vec::new(), total_size: s })
            .collect();
        assert_eq!(demotion_sequence(&groups, DemotionOrder::Decreasing), vec![1, 3, 0, 2]);
        assert_eq!(demotion_sequence(&groups, DemotionOrder::Increasing), vec![0, 2, 1, 3]);
    }
}
