use super::*;
use crate::assign::{candidate_hfp8, Level};
use crate::graph::{build_graph, LayerSpec};

fn mlp() -> Graph {
    build_graph(
        &[
            OpKind::Dense { out: 5 }.into(),
            OpKind::Relu.into(),
            OpKind::Dense { out: 3 }.into(),
            OpKind::SoftmaxCrossEntropy.into(),
        ],
        &[4],
    )
    .unwrap()
}

fn sample_batch() -> (Vec<f64>, Vec<usize>) {
    let x = vec![
        0.5, -1.0, 0.25, 2.0, //
        -0.75, 0.125, 1.5, -0.5, //
        1.0, 1.0, -1.0, 0.0,
    ];
    (x, vec![0, 2, 1])
}

fn classes<'a>(x: &'a [f64], y: &'a [usize]) -> Batch<'a> {
    Batch {
        inputs: x,
        targets: Targets::Classes(y),
    }
}

#[test]
fn dense_forward_is_the_exact_product() {
    let g = build_graph(
        &[OpKind::Dense { out: 2 }.into(), OpKind::SoftmaxCrossEntropy.into()],
        &[3],
    )
    .unwrap();
    let mut w = Weights::zeros(&g);
    w.param_mut(1).copy_from_slice(&[1.0, 2.0, 0.5, -1.0, 0.25, 4.0]);
    let x = [1.0, 2.0, -3.0];
    let c = candidate_hfp8(&g);
    let pi = PrecisionAssignment::all(&g, Level::Hi);
    let formats = TensorFormats::from_assignment(&c, &pi).unwrap();
    let trace = forward(&g, &formats, &w, classes(&x, &[0])).unwrap();
    // [1*1 + 2*0.5 - 3*0.25, 1*2 + 2*-1 - 3*4]
    assert_eq!(trace.activations[1], vec![1.25, -12.0]);
}

#[test]
fn gradients_match_central_differences() {
    let g = mlp();
    let w = Weights::init_uniform(&g, 7);
    let (x, y) = sample_batch();
    let fp32 = TensorFormats::uniform(&g, FpFormat::FP32);
    let grads = forward_backward(&g, &fp32, &w, classes(&x, &y), 1.0).unwrap();
    let h = 1e-6;
    for j in [1, 3] {
        for k in 0..w.param(j).len() {
            let mut plus = w.clone();
            plus.param_mut(j)[k] += h;
            let mut minus = w.clone();
            minus.param_mut(j)[k] -= h;
            let fd = (exact_loss(&g, &plus, classes(&x, &y)).unwrap()
                - exact_loss(&g, &minus, classes(&x, &y)).unwrap())
                / (2.0 * h);
            let got = grads.weight_grads[j - 1][k];
            assert!(
                (got - fd).abs() <= 1e-4 * fd.abs().max(1e-3),
                "op {j} elem {k}: {got} vs {fd}"
            );
        }
    }
}

#[test]
fn loss_scale_is_neutral_in_fp32() {
    let g = mlp();
    let w = Weights::init_uniform(&g, 3);
    let (x, y) = sample_batch();
    let fp32 = TensorFormats::uniform(&g, FpFormat::FP32);
    let a = forward_backward(&g, &fp32, &w, classes(&x, &y), 1.0).unwrap();
    let b = forward_backward(&g, &fp32, &w, classes(&x, &y), 65536.0).unwrap();
    for (ga, gb) in a.weight_grads.iter().flatten().zip(b.weight_grads.iter().flatten()) {
        assert!((ga - gb).abs() <= 1e-6 * ga.abs().max(1e-6), "{ga} vs {gb}");
    }
}

#[test]
fn one_rounding_per_tensor() {
    let g = mlp();
    let w = Weights::init_uniform(&g, 1);
    let (x, y) = sample_batch();
    let c = candidate_hfp8(&g);
    let formats = TensorFormats::from_assignment(&c, &PrecisionAssignment::all(&g, Level::Lo)).unwrap();
    let r = forward_backward(&g, &formats, &w, classes(&x, &y), 1.0).unwrap();
    assert_eq!(r.rounding_sites, g.num_tensors());
    let exact = forward_backward(&g, &TensorFormats::exact(&g), &w, classes(&x, &y), 1.0).unwrap();
    assert_eq!(exact.rounding_sites, 0);
}

#[test]
fn oversized_weight_reports_overflow() {
    let g = mlp();
    let mut w = Weights::init_uniform(&g, 1);
    let max = FpFormat::new(4, 3, 4).unwrap().max_magnitude();
    w.param_mut(1)[0] = 4.0 * max;
    let (x, y) = sample_batch();
    let c = candidate_hfp8(&g);
    let formats = TensorFormats::from_assignment(&c, &PrecisionAssignment::all(&g, Level::Lo)).unwrap();
    let r = forward_backward(&g, &formats, &w, classes(&x, &y), 1.0).unwrap();
    let theta1 = g.weight(1).unwrap();
    assert_eq!(r.stats[theta1.0].overflows, 1);
    assert_eq!(r.stats[theta1.0].elements, 20);
}

#[test]
fn seed_is_rounded_loss_scale() {
    let g = mlp();
    let w = Weights::init_uniform(&g, 1);
    let (x, y) = sample_batch();
    let mut formats = TensorFormats::exact(&g);
    let seed = g.activation_grad(g.num_ops() + 1);
    formats.set(seed, Some(FpFormat::new(5, 2, 0).unwrap()));
    let r = forward_backward(&g, &formats, &w, classes(&x, &y), 1.0e6).unwrap();
    // fp(5,2,0) saturates at 114688
    assert_eq!(r.activation_grads[g.num_ops()], vec![114688.0; 3]);
    assert!(r.backward_overflow);
}

#[test]
fn branches_accumulate_gradients() {
    // x2 = dense(x1); x3 = relu(x2); x4 = add(x2, x3)
    let g = build_graph(
        &[
            OpKind::Dense { out: 3 }.into(),
            OpKind::Relu.into(),
            LayerSpec::reading(OpKind::Add, vec![2, 3]),
            OpKind::SoftmaxCrossEntropy.into(),
        ],
        &[2],
    )
    .unwrap();
    let w = Weights::init_uniform(&g, 11);
    let x = [0.3, -0.7, 1.1, 0.4];
    let y = [1, 2];
    let exact = TensorFormats::exact(&g);
    let r = forward_backward(&g, &exact, &w, classes(&x, &y), 1.0).unwrap();
    let h = 1e-6;
    for k in 0..6 {
        let mut plus = w.clone();
        plus.param_mut(1)[k] += h;
        let mut minus = w.clone();
        minus.param_mut(1)[k] -= h;
        let fd = (exact_loss(&g, &plus, classes(&x, &y)).unwrap()
            - exact_loss(&g, &minus, classes(&x, &y)).unwrap())
            / (2.0 * h);
        assert!((r.weight_grads[0][k] - fd).abs() <= 1e-6, "{} vs {fd}", r.weight_grads[0][k]);
    }
}

#[test]
fn conv_gradients_match_central_differences() {
    let g = build_graph(
        &[
            OpKind::Conv2d {
                out_channels: 2,
                kernel: 3,
                stride: 2,
                padding: 1,
            }
            .into(),
            OpKind::Relu.into(),
            OpKind::GlobalAvgPool.into(),
            OpKind::Dense { out: 3 }.into(),
            OpKind::SoftmaxCrossEntropy.into(),
        ],
        &[2, 5, 5],
    )
    .unwrap();
    let w = Weights::init_uniform(&g, 5);
    let x: Vec<f64> = (0..100).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
    let y = [2, 0];
    let exact = TensorFormats::exact(&g);
    let r = forward_backward(&g, &exact, &w, classes(&x, &y), 1.0).unwrap();
    let h = 1e-6;
    for k in 0..w.param(1).len() {
        let mut plus = w.clone();
        plus.param_mut(1)[k] += h;
        let mut minus = w.clone();
        minus.param_mut(1)[k] -= h;
        let fd = (exact_loss(&g, &plus, classes(&x, &y)).unwrap()
            - exact_loss(&g, &minus, classes(&x, &y)).unwrap())
            / (2.0 * h);
        assert!((r.weight_grads[0][k] - fd).abs() <= 1e-6, "{} vs {fd}", r.weight_grads[0][k]);
    }
}

#[test]
fn sgd_update() {
    let g = build_graph(
        &[OpKind::Dense { out: 2 }.into(), OpKind::SoftmaxCrossEntropy.into()],
        &[1],
    )
    .unwrap();
    let mut w = Weights::zeros(&g);
    w.param_mut(1).copy_from_slice(&[1.0, 1.0]);
    sgd_step(&mut w, &[vec![0.5, 0.0], vec![]], 0.1, FpFormat::FP32).unwrap();
    assert_eq!(w.param(1), &[0.95f32 as f64, 1.0]);
    let before = w.clone();
    sgd_step(&mut w, &[vec![0.0, 0.0], vec![]], 0.1, FpFormat::FP32).unwrap();
    sgd_step(&mut w, &[vec![3.0, -2.0], vec![]], 0.0, FpFormat::FP32).unwrap();
    assert_eq!(w, before);
    assert!(sgd_step(&mut w, &[vec![0.0], vec![]], 0.1, FpFormat::FP32).is_err());
}

#[test]
fn batch_validation() {
    let g = mlp();
    let w = Weights::zeros(&g);
    let exact = TensorFormats::exact(&g);
    let x = [0.0; 8];
    assert!(matches!(
        forward(&g, &exact, &w, classes(&x, &[0, 3])),
        Err(EngineError::Label { label: 3, classes: 3 })
    ));
    assert!(matches!(
        forward(&g, &exact, &w, classes(&x, &[0])),
        Err(EngineError::Size { .. })
    ));
    let vals = [0.0, 0.0];
    let wrong = Batch {
        inputs: &x,
        targets: Targets::Values(&vals),
    };
    assert!(forward(&g, &exact, &w, wrong).is_err());
}

#[test]
fn promotion_is_strict_and_forward_only() {
    let g = mlp();
    let mut pi = PrecisionAssignment::all(&g, Level::Lo);
    let mut stats = vec![RoundStats::default(); g.num_tensors()];
    let x2 = g.activation(2);
    let x3 = g.activation(3);
    let dx2 = g.activation_grad(2);
    stats[x2.0] = RoundStats { overflows: 3, underflows: 0, elements: 100 };
    stats[x3.0] = RoundStats { overflows: 1, underflows: 0, elements: 100 };
    stats[dx2.0] = RoundStats { overflows: 50, underflows: 0, elements: 100 };
    let mut log = Vec::new();
    let n = promote_overflowing(&g, &mut pi, &stats, 0.01, 4, &mut log);
    assert_eq!(n, 1);
    assert_eq!(log, vec![Promotion { step: 4, tensor: x2 }]);
    assert_eq!(pi.level(x2), Level::Hi);
    assert_eq!(pi.level(x3), Level::Lo);
    assert_eq!(pi.level(dx2), Level::Lo);
    // already high: nothing new is logged
    assert_eq!(promote_overflowing(&g, &mut pi, &stats, 0.01, 5, &mut log), 0);
}

#[test]
fn skipped_step_keeps_weights_bit_identical() {
    let g = mlp();
    let (x, y) = sample_batch();
    let c = candidate_hfp8(&g);
    let plan = PrecisionPlan::Mixed {
        candidate: c,
        assignment: PrecisionAssignment::all(&g, Level::Lo),
    };
    let cfg = TrainConfig::default();
    let w = Weights::init_uniform(&g, 2);
    let mut state = TrainState::new(w.clone(), plan, LossScaler::new(65536.0 * 1024.0, 2.0, 0.5, 4));
    let report = state.step(&g, &cfg, classes(&x, &y)).unwrap();
    assert!(report.backward_overflow && report.skipped);
    assert_eq!(state.weights.to_bits(), w.to_bits());
    assert_eq!(state.scaler.scale(), 65536.0 * 512.0);
}
