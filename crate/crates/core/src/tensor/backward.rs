//! Reverse-mode pass: reverse topological walk over the recorded DAG.
//!
//! Per-node gradient buffers are allocated once and accumulated into in
//! place; scatter-style ops (gather, slice, concat) write straight into
//! their input's buffer instead of materializing full-size temporaries.

use std::collections::{HashMap, HashSet};

use super::conv::{self, ConvDims};
use super::{Op, Tensor, BCE_CLAMP};
use crate::error::{Error, Result};

pub(crate) fn run(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        // No grad-requiring tensor is reachable; nothing to do.
        return Ok(());
    }

    // Collect the grad-requiring subgraph. Node ids increase with creation
    // order, so descending id order is a valid reverse topological order.
    let mut nodes: Vec<Tensor> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![loss.clone()];
    seen.insert(loss.id());
    while let Some(t) = stack.pop() {
        for input in op_inputs(t.op()) {
            if input.requires_grad() && seen.insert(input.id()) {
                stack.push(input.clone());
            }
        }
        nodes.push(t);
    }
    nodes.sort_by(|a, b| b.id().cmp(&a.id()));

    let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
    pending.insert(loss.id(), vec![1.0]);

    for node in &nodes {
        let upstream = match pending.remove(&node.id()) {
            Some(g) => g,
            None => continue,
        };
        propagate(node, &upstream, &mut pending)?;
        // Deposit by move; accumulate when an earlier backward left a grad.
        node.deposit_grad(upstream);
    }
    Ok(())
}

fn op_inputs(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { input, kernel, .. } => vec![input, kernel],
        Op::ChannelL2Normalize { input, .. }
        | Op::LogSoftmaxAt { input, .. }
        | Op::ScalarMul { input, .. }
        | Op::LeakyRelu { input, .. }
        | Op::AvgPool2 { input }
        | Op::Upsample2 { input }
        | Op::InstanceNorm { input, .. }
        | Op::SoftmaxScaled { input, .. }
        | Op::SumAll { input }
        | Op::GatherPixel { input, .. }
        | Op::SliceChannel { input, .. }
        | Op::Reshape { input }
        | Op::BceMean { input, .. } => vec![input],
        Op::Add { a, b } | Op::Mul { a, b } | Op::ConcatChannels { a, b } => vec![a, b],
        Op::SumScalars { inputs } | Op::StackRows { inputs } => inputs.iter().collect(),
    }
}

/// Zero-initialized accumulation buffer for a tensor's gradient.
fn buffer<'a>(pending: &'a mut HashMap<u64, Vec<f64>>, target: &Tensor) -> &'a mut [f64] {
    pending
        .entry(target.id())
        .or_insert_with(|| vec![0.0; target.numel()])
}

/// Accumulate an owned gradient, moving it in when no buffer exists yet.
fn add_owned(pending: &mut HashMap<u64, Vec<f64>>, target: &Tensor, grad: Vec<f64>) {
    debug_assert_eq!(grad.len(), target.numel());
    match pending.entry(target.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (dst, src) in e.get_mut().iter_mut().zip(&grad) {
                *dst += src;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(grad);
        }
    }
}

fn add_slice(pending: &mut HashMap<u64, Vec<f64>>, target: &Tensor, grad: &[f64]) {
    for (dst, src) in buffer(pending, target).iter_mut().zip(grad) {
        *dst += src;
    }
}

fn propagate(node: &Tensor, g: &[f64], pending: &mut HashMap<u64, Vec<f64>>) -> Result<()> {
    match node.op() {
        Op::Leaf => {}

        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
            let dims = ConvDims::new(cin, h, w, cout, kh, kw, *stride, *padding)
                .expect("conv dims validated at forward time");
            if kernel.requires_grad() {
                add_owned(pending, kernel, conv::backward_kernel(input.data(), g, &dims));
            }
            if input.requires_grad() {
                add_owned(pending, input, conv::backward_input(kernel.data(), g, &dims));
            }
        }

        Op::ChannelL2Normalize { input, eps } => {
            if input.requires_grad() {
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let plane = h * w;
                let x = input.data();
                let y = node.data();
                // channel-major passes: per-pixel squared norms and (g . y)
                let mut sq = vec![0.0; plane];
                let mut dot = vec![0.0; plane];
                for ch in 0..c {
                    let xs = &x[ch * plane..(ch + 1) * plane];
                    let ys = &y[ch * plane..(ch + 1) * plane];
                    let gs = &g[ch * plane..(ch + 1) * plane];
                    for i in 0..plane {
                        sq[i] += xs[i] * xs[i];
                        dot[i] += gs[i] * ys[i];
                    }
                }
                let dx = buffer(pending, input);
                for ch in 0..c {
                    let ys = &y[ch * plane..(ch + 1) * plane];
                    let gs = &g[ch * plane..(ch + 1) * plane];
                    let ds = &mut dx[ch * plane..(ch + 1) * plane];
                    for i in 0..plane {
                        let norm = sq[i].sqrt();
                        if norm > *eps {
                            ds[i] += (gs[i] - ys[i] * dot[i]) / norm;
                        } else {
                            ds[i] += gs[i] / eps;
                        }
                    }
                }
            }
        }

        Op::LogSoftmaxAt { input, index } => {
            if input.requires_grad() {
                let x = input.data();
                let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let up = g[0];
                let dx = buffer(pending, input);
                for (dst, &e) in dx.iter_mut().zip(&exps) {
                    *dst -= up * e / sum;
                }
                dx[*index] += up;
            }
        }

        Op::Add { a, b } => {
            if a.requires_grad() {
                add_slice(pending, a, g);
            }
            if b.requires_grad() {
                add_slice(pending, b, g);
            }
        }

        Op::Mul { a, b } => {
            if a.requires_grad() {
                let da = buffer(pending, a);
                for ((dst, gi), bi) in da.iter_mut().zip(g).zip(b.data()) {
                    *dst += gi * bi;
                }
            }
            if b.requires_grad() {
                let db = buffer(pending, b);
                for ((dst, gi), ai) in db.iter_mut().zip(g).zip(a.data()) {
                    *dst += gi * ai;
                }
            }
        }

        Op::ScalarMul { input, factor } => {
            if input.requires_grad() {
                let dx = buffer(pending, input);
                for (dst, gi) in dx.iter_mut().zip(g) {
                    *dst += gi * factor;
                }
            }
        }

        Op::LeakyRelu { input, slope } => {
            if input.requires_grad() {
                let dx = buffer(pending, input);
                for ((dst, gi), &x) in dx.iter_mut().zip(g).zip(input.data()) {
                    *dst += if x > 0.0 { *gi } else { gi * slope };
                }
            }
        }

        Op::AvgPool2 { input } => {
            if input.requires_grad() {
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (ho, wo) = (h / 2, w / 2);
                let dx = buffer(pending, input);
                for ch in 0..c {
                    for r in 0..ho {
                        for col in 0..wo {
                            let quarter = 0.25 * g[ch * ho * wo + r * wo + col];
                            let base = ch * h * w + 2 * r * w + 2 * col;
                            dx[base] += quarter;
                            dx[base + 1] += quarter;
                            dx[base + w] += quarter;
                            dx[base + w + 1] += quarter;
                        }
                    }
                }
            }
        }

        Op::Upsample2 { input } => {
            if input.requires_grad() {
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (ho, wo) = (h * 2, w * 2);
                let dx = buffer(pending, input);
                for ch in 0..c {
                    for r in 0..ho {
                        for col in 0..wo {
                            dx[ch * h * w + (r / 2) * w + col / 2] +=
                                g[ch * ho * wo + r * wo + col];
                        }
                    }
                }
            }
        }

        Op::ConcatChannels { a, b } => {
            let na = a.numel();
            if a.requires_grad() {
                add_slice(pending, a, &g[..na]);
            }
            if b.requires_grad() {
                add_slice(pending, b, &g[na..]);
            }
        }

        Op::InstanceNorm { input, eps } => {
            if input.requires_grad() {
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let plane = h * w;
                let n = plane as f64;
                let x = input.data();
                let y = node.data();
                let dx = buffer(pending, input);
                for ch in 0..c {
                    let xs = &x[ch * plane..(ch + 1) * plane];
                    let ys = &y[ch * plane..(ch + 1) * plane];
                    let gs = &g[ch * plane..(ch + 1) * plane];
                    let mean = xs.iter().sum::<f64>() / n;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let g_sum: f64 = gs.iter().sum();
                    let gy_sum: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                    for ((dst, &gi), &yi) in dx[ch * plane..(ch + 1) * plane]
                        .iter_mut()
                        .zip(gs)
                        .zip(ys)
                    {
                        *dst += inv_std / n * (n * gi - g_sum - yi * gy_sum);
                    }
                }
            }
        }

        Op::SoftmaxScaled { input, scale } => {
            if input.requires_grad() {
                let p = node.data();
                let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                let dx = buffer(pending, input);
                for ((dst, gi), pi) in dx.iter_mut().zip(g).zip(p) {
                    *dst += scale * pi * (gi - dot);
                }
            }
        }

        Op::SumAll { input } => {
            if input.requires_grad() {
                let up = g[0];
                for dst in buffer(pending, input).iter_mut() {
                    *dst += up;
                }
            }
        }

        Op::SumScalars { inputs } => {
            for t in inputs {
                if t.requires_grad() {
                    buffer(pending, t)[0] += g[0];
                }
            }
        }

        Op::GatherPixel { input, row, col } => {
            if input.requires_grad() {
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let plane = h * w;
                let dx = buffer(pending, input);
                for ch in 0..c {
                    dx[ch * plane + row * w + col] += g[ch];
                }
            }
        }

        Op::StackRows { inputs } => {
            let c = inputs[0].numel();
            for (i, t) in inputs.iter().enumerate() {
                if t.requires_grad() {
                    add_slice(pending, t, &g[i * c..(i + 1) * c]);
                }
            }
        }

        Op::SliceChannel { input, index } => {
            if input.requires_grad() {
                let plane = g.len();
                let dx = buffer(pending, input);
                for (dst, src) in dx[index * plane..(index + 1) * plane].iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }

        Op::Reshape { input } => {
            if input.requires_grad() {
                add_slice(pending, input, g);
            }
        }

        Op::BceMean { input, target } => {
            if input.requires_grad() {
                let lo = BCE_CLAMP;
                let hi = 1.0 - BCE_CLAMP;
                let n = input.numel() as f64;
                let up = g[0];
                let dx = buffer(pending, input);
                for ((dst, &q), &t) in dx.iter_mut().zip(input.data()).zip(target) {
                    if q > lo && q < hi {
                        let t = t.clamp(lo, hi);
                        *dst += up * (-t / q + (1.0 - t) / (1.0 - q)) / n;
                    }
                }
            }
        }
    }
    Ok(())
}
