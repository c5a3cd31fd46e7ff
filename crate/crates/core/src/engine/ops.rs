//! Forward and backward kernels for the primitive operators.
//!
//! Tensors are flat `f64` buffers of `batch * size` elements, example-major.
//! Weight gradients are averaged over the batch.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{OpKind, OpNode};

/// Supervision consumed by the loss operator.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn of(node: &OpNode) -> Self {
        let OpKind::Conv2d {
            kernel,
            stride,
            padding,
            ..
        } = node.kind
        else {
            unreachable!("conv geometry on {}", node.kind.name());
        };
        let s = &node.in_shapes[0];
        let o = &node.out_shape;
        ConvGeometry {
            cin: s[0],
            h: s[1],
            w: s[2],
            cout: o[0],
            oh: o[1],
            ow: o[2],
            k: kernel,
            stride,
            padding,
        }
    }

    /// Input coordinate read by output `(oy, ox)` at kernel tap `(ky, kx)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(z.iter().map(|&v| libm::exp(v - max)).sum::<f64>())
}

pub(crate) fn forward_op(
    node: &OpNode,
    inputs: &[&[f64]],
    weight: &[f64],
    targets: Targets<'_>,
    batch: usize,
) -> Vec<f64> {
    let in_size = numel(&node.in_shapes[0]);
    let out_size = numel(&node.out_shape);
    let x = inputs[0];
    let mut out = vec![0.0; batch * out_size];
    match node.kind {
        OpKind::Dense { out: n_out } => {
            for b in 0..batch {
                let xb = &x[b * in_size..(b + 1) * in_size];
                let yb = &mut out[b * n_out..(b + 1) * n_out];
                for (i, &xi) in xb.iter().enumerate() {
                    let row = &weight[i * n_out..(i + 1) * n_out];
                    for (y, &w) in yb.iter_mut().zip(row) {
                        *y += xi * w;
                    }
                }
            }
        }
        OpKind::Conv2d { .. } => {
            let c = ConvGeometry::of(node);
            for b in 0..batch {
                let xb = &x[b * in_size..];
                let yb = &mut out[b * out_size..(b + 1) * out_size];
                for co in 0..c.cout {
                    for oy in 0..c.oh {
                        for ox in 0..c.ow {
                            let mut acc = 0.0;
                            for ci in 0..c.cin {
                                for ky in 0..c.k {
                                    for kx in 0..c.k {
                                        if let Some((y, xx)) = c.source(oy, ox, ky, kx) {
                                            acc += weight[((co * c.cin + ci) * c.k + ky) * c.k + kx]
                                                * xb[(ci * c.h + y) * c.w + xx];
                                        }
                                    }
                                }
                            }
                            yb[(co * c.oh + oy) * c.ow + ox] = acc;
                        }
                    }
                }
            }
        }
        OpKind::Relu => {
            for (y, &v) in out.iter_mut().zip(x) {
                *y = if v > 0.0 { v } else { 0.0 };
            }
        }
        OpKind::Scale { factor } => {
            for (y, &v) in out.iter_mut().zip(x) {
                *y = factor * v;
            }
        }
        OpKind::GlobalAvgPool => {
            let plane = in_size / out_size;
            for (y, chunk) in out.iter_mut().zip(x.chunks(plane)) {
                *y = chunk.iter().sum::<f64>() / plane as f64;
            }
        }
        OpKind::SoftmaxCrossEntropy => {
            let Targets::Classes(labels) = targets else {
                unreachable!("checked by the engine");
            };
            for b in 0..batch {
                let z = &x[b * in_size..(b + 1) * in_size];
                out[b] = log_sum_exp(z) - z[labels[b]];
            }
        }
        OpKind::AbsLoss { scale } => {
            let Targets::Values(values) = targets else {
                unreachable!("checked by the engine");
            };
            for b in 0..batch {
                out[b] = scale * (x[b] - values[b]).abs();
            }
        }
        OpKind::Split { offset, len } => {
            for b in 0..batch {
                out[b * len..(b + 1) * len]
                    .copy_from_slice(&x[b * in_size + offset..b * in_size + offset + len]);
            }
        }
        OpKind::Add => {
            for input in inputs {
                for (y, &v) in out.iter_mut().zip(input.iter()) {
                    *y += v;
                }
            }
        }
        OpKind::ReduceSum => {
            for (input, shape) in inputs.iter().zip(&node.in_shapes) {
                let size = numel(shape);
                for (b, y) in out.iter_mut().enumerate() {
                    *y += input[b * size..(b + 1) * size].iter().sum::<f64>();
                }
            }
        }
    }
    out
}

/// Gradients with respect to each input and (when parameterized) the weights.
pub(crate) struct OpGrads {
    pub inputs: Vec<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
}

pub(crate) fn backward_op(
    node: &OpNode,
    inputs: &[&[f64]],
    weight: &[f64],
    dy: &[f64],
    targets: Targets<'_>,
    batch: usize,
) -> OpGrads {
    let in_size = numel(&node.in_shapes[0]);
    let out_size = numel(&node.out_shape);
    let x = inputs[0];
    let mut dx = vec![0.0; batch * in_size];
    let mut dw = None;
    match node.kind {
        OpKind::Dense { out: n_out } => {
            let mut g = vec![0.0; weight.len()];
            for b in 0..batch {
                let xb = &x[b * in_size..(b + 1) * in_size];
                let dyb = &dy[b * n_out..(b + 1) * n_out];
                for (i, &xi) in xb.iter().enumerate() {
                    let row = &weight[i * n_out..(i + 1) * n_out];
                    dx[b * in_size + i] = row.iter().zip(dyb).map(|(w, d)| w * d).sum();
                    for (gw, &d) in g[i * n_out..(i + 1) * n_out].iter_mut().zip(dyb) {
                        *gw += xi * d;
                    }
                }
            }
            g.iter_mut().for_each(|v| *v /= batch as f64);
            dw = Some(g);
        }
        OpKind::Conv2d { .. } => {
            let c = ConvGeometry::of(node);
            let mut g = vec![0.0; weight.len()];
            for b in 0..batch {
                let xb = &x[b * in_size..(b + 1) * in_size];
                let dxb = &mut dx[b * in_size..(b + 1) * in_size];
                let dyb = &dy[b * out_size..(b + 1) * out_size];
                for co in 0..c.cout {
                    for oy in 0..c.oh {
                        for ox in 0..c.ow {
                            let d = dyb[(co * c.oh + oy) * c.ow + ox];
                            for ci in 0..c.cin {
                                for ky in 0..c.k {
                                    for kx in 0..c.k {
                                        if let Some((y, xx)) = c.source(oy, ox, ky, kx) {
                                            let wi = ((co * c.cin + ci) * c.k + ky) * c.k + kx;
                                            let xi = (ci * c.h + y) * c.w + xx;
                                            g[wi] += d * xb[xi];
                                            dxb[xi] += d * weight[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            g.iter_mut().for_each(|v| *v /= batch as f64);
            dw = Some(g);
        }
        OpKind::Relu => {
            for ((g, &v), &d) in dx.iter_mut().zip(x).zip(dy) {
                *g = if v > 0.0 { d } else { 0.0 };
            }
        }
        OpKind::Scale { factor } => {
            for (g, &d) in dx.iter_mut().zip(dy) {
                *g = factor * d;
            }
        }
        OpKind::GlobalAvgPool => {
            let plane = in_size / out_size;
            for (chunk, &d) in dx.chunks_mut(plane).zip(dy) {
                chunk.iter_mut().for_each(|g| *g = d / plane as f64);
            }
        }
        OpKind::SoftmaxCrossEntropy => {
            let Targets::Classes(labels) = targets else {
                unreachable!("checked by the engine");
            };
            for b in 0..batch {
                let z = &x[b * in_size..(b + 1) * in_size];
                let lse = log_sum_exp(z);
                for (c, g) in dx[b * in_size..(b + 1) * in_size].iter_mut().enumerate() {
                    let p = libm::exp(z[c] - lse);
                    let onehot = if c == labels[b] { 1.0 } else { 0.0 };
                    *g = dy[b] * (p - onehot);
                }
            }
        }
        OpKind::AbsLoss { scale } => {
            let Targets::Values(values) = targets else {
                unreachable!("checked by the engine");
            };
            for b in 0..batch {
                let diff = x[b] - values[b];
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dx[b] = scale * sign * dy[b];
            }
        }
        OpKind::Split { offset, len } => {
            for b in 0..batch {
                dx[b * in_size + offset..b * in_size + offset + len]
                    .copy_from_slice(&dy[b * len..(b + 1) * len]);
            }
        }
        OpKind::Add => {
            return OpGrads {
                inputs: inputs.iter().map(|_| dy.to_vec()).collect(),
                weight: None,
            };
        }
        OpKind::ReduceSum => {
            let grads = node
                .in_shapes
                .iter()
                .map(|shape| {
                    let size = numel(shape);
                    (0..batch * size).map(|e| dy[e / size]).collect()
                })
                .collect();
            return OpGrads {
                inputs: grads,
                weight: None,
            };
        }
    }
    OpGrads {
        inputs: vec![dx],
        weight: dw,
    }
}
