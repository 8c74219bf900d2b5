//! Dense tensors with reverse-mode differentiation.
//!
//! Every operation returns a fresh immutable [`Tensor`] that records its
//! inputs, forming an implicit DAG. [`Tensor::backward`] walks that DAG in
//! reverse topological order and accumulates gradients into every
//! grad-requiring node it can reach. Gradients accumulate across repeated
//! backward calls until cleared.
//!
//! Data is `f64` in row-major order. Feature maps use `[C, H, W]`,
//! convolution kernels `[Cout, Cin, kh, kw]`.

mod backward;
mod conv;
mod finite_diff;

pub use finite_diff::finite_diff_grad;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of the computation graph. Cloning is cheap (`Arc`).
#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Op,
}

pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Tensor,
        kernel: Tensor,
        stride: usize,
        padding: usize,
    },
    ChannelL2Normalize {
        input: Tensor,
        eps: f64,
    },
    LogSoftmaxAt {
        input: Tensor,
        index: usize,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    ScalarMul {
        input: Tensor,
        factor: f64,
    },
    LeakyRelu {
        input: Tensor,
        slope: f64,
    },
    AvgPool2 {
        input: Tensor,
    },
    Upsample2 {
        input: Tensor,
    },
    ConcatChannels {
        a: Tensor,
        b: Tensor,
    },
    InstanceNorm {
        input: Tensor,
        eps: f64,
    },
    SoftmaxScaled {
        input: Tensor,
        scale: f64,
    },
    SumAll {
        input: Tensor,
    },
    SumScalars {
        inputs: Vec<Tensor>,
    },
    GatherPixel {
        input: Tensor,
        row: usize,
        col: usize,
    },
    StackRows {
        inputs: Vec<Tensor>,
    },
    SliceChannel {
        input: Tensor,
        index: usize,
    },
    Reshape {
        input: Tensor,
    },
    /// Mean binary cross-entropy of `input` (probabilities) against a fixed
    /// target distribution, both clamped to [`BCE_CLAMP`, 1 - `BCE_CLAMP`].
    BceMean {
        input: Tensor,
        target: Vec<f64>,
    },
}

/// Probability clamp applied on both sides of the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    /// Leaf tensor from raw data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} has {} elements but data has {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::from_node(
            shape.to_vec(),
            data,
            requires_grad,
            Op::Leaf,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_node(shape.to_vec(), vec![0.0; numel_of(shape)], false, Op::Leaf)
    }

    /// Constant scalar, shape `[1]`.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_node(vec![1], vec![value], false, Op::Leaf)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.node.id
    }

    pub(crate) fn op(&self) -> &Op {
        &self.node.op
    }

    /// Value of a scalar tensor. Panics when the tensor is not one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar shape {:?}", self.shape());
        self.node.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass deposited one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.lock().unwrap().clone()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.lock().unwrap() = None;
    }

    /// Overwrite the gradient buffer. Mainly for optimizer tests.
    pub fn set_grad(&self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "gradient length {} does not match tensor with {} elements",
                grad.len(),
                self.numel()
            )));
        }
        *self.node.grad.lock().unwrap() = Some(grad);
        Ok(())
    }

    /// Move a finished gradient buffer into this tensor, adding when an
    /// earlier backward pass already left one.
    pub(crate) fn deposit_grad(&self, contribution: Vec<f64>) {
        let mut guard = self.node.grad.lock().unwrap();
        match guard.as_mut() {
            Some(existing) => {
                for (dst, src) in existing.iter_mut().zip(&contribution) {
                    *dst += src;
                }
            }
            None => *guard = Some(contribution),
        }
    }

    fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape() {
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(Error::ShapeMismatch(format!(
                "expected a [C,H,W] tensor, got {:?}",
                other
            ))),
        }
    }

    fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            other => Err(Error::ShapeMismatch(format!(
                "expected a [N,C,kh,kw] tensor, got {:?}",
                other
            ))),
        }
    }

    /// 2D cross-correlation of a `[Cin,H,W]` input with a `[Cout,Cin,kh,kw]`
    /// kernel. Odd kernel extents only; `padding = (k-1)/2` with stride 1
    /// preserves resolution.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (cin, h, w) = self.dims3()?;
        let (cout, kcin, kh, kw) = kernel.dims4()?;
        if kcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {} channels but kernel {:?} expects {}",
                cin,
                kernel.shape(),
                kcin
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel extents must be odd, got {}x{}",
                kh, kw
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let dims = conv::ConvDims::new(cin, h, w, cout, kh, kw, stride, padding).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "conv2d: kernel {}x{} with padding {} does not fit input {}x{}",
                kh, kw, padding, h, w
            ))
        })?;
        let data = conv::forward(self.data(), kernel.data(), &dims);
        Ok(Tensor::from_node(
            vec![cout, dims.ho, dims.wo],
            data,
            self.requires_grad() || kernel.requires_grad(),
            Op::Conv2d {
                input: self.clone(),
                kernel: kernel.clone(),
                stride,
                padding,
            },
        ))
    }

    /// Rescale every pixel's channel vector to unit L2 norm. Vectors with
    /// norm below `eps` are divided by `eps` instead, so zeros stay zero.
    pub fn channel_l2_normalize(&self, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "channel_l2_normalize: eps must be > 0, got {}",
                eps
            )));
        }
        let (c, h, w) = self.dims3()?;
        let plane = h * w;
        let input = self.data();
        // channel-major passes keep the memory access streaming
        let mut inv_norm = vec![0.0; plane];
        for ch in 0..c {
            for (acc, &v) in inv_norm.iter_mut().zip(&input[ch * plane..(ch + 1) * plane]) {
                *acc += v * v;
            }
        }
        for acc in inv_norm.iter_mut() {
            *acc = 1.0 / acc.sqrt().max(eps);
        }
        let mut out = vec![0.0; input.len()];
        for ch in 0..c {
            for ((dst, &v), &inv) in out[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .zip(&input[ch * plane..(ch + 1) * plane])
                .zip(&inv_norm)
            {
                *dst = v * inv;
            }
        }
        Ok(Tensor::from_node(
            self.shape().to_vec(),
            out,
            self.requires_grad(),
            Op::ChannelL2Normalize {
                input: self.clone(),
                eps,
            },
        ))
    }

    /// `values[index] - logsumexp(values)` over the flattened tensor,
    /// computed with max subtraction.
    pub fn log_softmax_at(&self, index: usize) -> Result<Tensor> {
        if index >= self.numel() {
            return Err(Error::OutOfBounds(format!(
                "log_softmax_at: index {} out of range for {} values",
                index,
                self.numel()
            )));
        }
        let values = self.data();
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = values.iter().map(|&v| (v - max).exp()).sum();
        let out = values[index] - max - sum_exp.ln();
        Ok(Tensor::from_node(
            vec![1],
            vec![out],
            self.requires_grad(),
            Op::LogSoftmaxAt {
                input: self.clone(),
                index,
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_node(
            self.shape().to_vec(),
            data,
            self.requires_grad() || other.requires_grad(),
            Op::Add {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_node(
            self.shape().to_vec(),
            data,
            self.requires_grad() || other.requires_grad(),
            Op::Mul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn scalar_mul(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::ScalarMul {
                input: self.clone(),
                factor,
            },
        )
    }

    /// Rectifier with configurable negative slope (0 = plain rectifier).
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        Tensor::from_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::LeakyRelu {
                input: self.clone(),
                slope,
            },
        )
    }

    /// Factor-2 downsample by 2x2 mean. Requires even spatial extents.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "avg_pool2: spatial extents must be even, got {}x{}",
                h, w
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let input = self.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for r in 0..ho {
                for col in 0..wo {
                    let base = ch * h * w + 2 * r * w + 2 * col;
                    out[ch * ho * wo + r * wo + col] =
                        0.25 * (input[base] + input[base + 1] + input[base + w] + input[base + w + 1]);
                }
            }
        }
        Ok(Tensor::from_node(
            vec![c, ho, wo],
            out,
            self.requires_grad(),
            Op::AvgPool2 {
                input: self.clone(),
            },
        ))
    }

    /// Factor-2 nearest-neighbor upsample.
    pub fn upsample2_nearest(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let (ho, wo) = (h * 2, w * 2);
        let input = self.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for r in 0..ho {
                let src_row = &input[ch * h * w + (r / 2) * w..][..w];
                let dst_row = &mut out[ch * ho * wo + r * wo..][..wo];
                for (col, dst) in dst_row.iter_mut().enumerate() {
                    *dst = src_row[col / 2];
                }
            }
        }
        Ok(Tensor::from_node(
            vec![c, ho, wo],
            out,
            self.requires_grad(),
            Op::Upsample2 {
                input: self.clone(),
            },
        ))
    }

    /// Stack `self` (first) and `other` along the channel dimension.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (ca, ha, wa) = self.dims3()?;
        let (cb, hb, wb) = other.dims3()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels: spatial dims {}x{} vs {}x{}",
                ha, wa, hb, wb
            )));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.data());
        data.extend_from_slice(other.data());
        Ok(Tensor::from_node(
            vec![ca + cb, ha, wa],
            data,
            self.requires_grad() || other.requires_grad(),
            Op::ConcatChannels {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Standardize each channel to zero mean / unit variance over its
    /// spatial extent (per-sample statistics, no learned affine).
    pub fn instance_norm(&self, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "instance_norm: eps must be > 0, got {}",
                eps
            )));
        }
        let (c, h, w) = self.dims3()?;
        let plane = h * w;
        let input = self.data();
        let mut out = vec![0.0; input.len()];
        for ch in 0..c {
            let slice = &input[ch * plane..(ch + 1) * plane];
            let mean = slice.iter().sum::<f64>() / plane as f64;
            let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (dst, &v) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(slice) {
                *dst = (v - mean) * inv_std;
            }
        }
        Ok(Tensor::from_node(
            self.shape().to_vec(),
            out,
            self.requires_grad(),
            Op::InstanceNorm {
                input: self.clone(),
                eps,
            },
        ))
    }

    /// Softmax of `scale * self` over all elements (flattened), with max
    /// subtraction. Output keeps the input shape.
    pub fn softmax_scaled(&self, scale: f64) -> Tensor {
        let input = self.data();
        let max = input
            .iter()
            .map(|&v| scale * v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = input.iter().map(|&v| (scale * v - max).exp()).collect();
        let sum: f64 = out.iter().sum();
        for v in out.iter_mut() {
            *v /= sum;
        }
        Tensor::from_node(
            self.shape().to_vec(),
            out,
            self.requires_grad(),
            Op::SoftmaxScaled {
                input: self.clone(),
                scale,
            },
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&self) -> Tensor {
        let sum = self.data().iter().sum();
        Tensor::from_node(
            vec![1],
            vec![sum],
            self.requires_grad(),
            Op::SumAll {
                input: self.clone(),
            },
        )
    }

    /// Channel vector at one pixel of a `[C,H,W]` map, shape `[C]`.
    pub fn gather_pixel(&self, row: usize, col: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if row >= h || col >= w {
            return Err(Error::OutOfBounds(format!(
                "gather_pixel: ({}, {}) outside {}x{} map",
                row, col, h, w
            )));
        }
        let plane = h * w;
        let data = (0..c)
            .map(|ch| self.data()[ch * plane + row * w + col])
            .collect();
        Ok(Tensor::from_node(
            vec![c],
            data,
            self.requires_grad(),
            Op::GatherPixel {
                input: self.clone(),
                row,
                col,
            },
        ))
    }

    /// Plane `index` of a `[N,H,W]` tensor, shape `[H,W]`.
    pub fn slice_channel(&self, index: usize) -> Result<Tensor> {
        let (n, h, w) = self.dims3()?;
        if index >= n {
            return Err(Error::OutOfBounds(format!(
                "slice_channel: index {} out of {} planes",
                index, n
            )));
        }
        let plane = h * w;
        let data = self.data()[index * plane..(index + 1) * plane].to_vec();
        Ok(Tensor::from_node(
            vec![h, w],
            data,
            self.requires_grad(),
            Op::SliceChannel {
                input: self.clone(),
                index,
            },
        ))
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {:?} ({} elements) to {:?} ({} elements)",
                self.shape(),
                self.numel(),
                shape,
                numel_of(shape)
            )));
        }
        Ok(Tensor::from_node(
            shape.to_vec(),
            self.data().to_vec(),
            self.requires_grad(),
            Op::Reshape {
                input: self.clone(),
            },
        ))
    }

    /// Mean binary cross-entropy of `self` (probabilities) against a fixed
    /// target distribution; both sides clamped to [`BCE_CLAMP`, 1-`BCE_CLAMP`].
    pub fn bce_mean(&self, target: &[f64]) -> Result<Tensor> {
        if target.len() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "bce_mean: target has {} values, input {}",
                target.len(),
                self.numel()
            )));
        }
        let lo = BCE_CLAMP;
        let hi = 1.0 - BCE_CLAMP;
        let n = self.numel() as f64;
        let mut total = 0.0;
        for (&q, &t) in self.data().iter().zip(target) {
            let q = q.clamp(lo, hi);
            let t = t.clamp(lo, hi);
            total -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        }
        Ok(Tensor::from_node(
            vec![1],
            vec![total / n],
            self.requires_grad(),
            Op::BceMean {
                input: self.clone(),
                target: target.to_vec(),
            },
        ))
    }

    /// Reverse-mode pass from a scalar loss. Accumulates gradients into
    /// every grad-requiring tensor reachable from the loss.
    pub fn backward(&self) -> Result<()> {
        backward::run(self)
    }
}

/// Sum of scalar tensors in slice order, shape `[1]`.
pub fn sum_scalars(terms: &[Tensor]) -> Result<Tensor> {
    if terms.is_empty() {
        return Err(Error::InvalidArgument("sum_scalars: empty term list".into()));
    }
    let mut total = 0.0;
    for t in terms {
        if t.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "sum_scalars: term has shape {:?}, expected scalar",
                t.shape()
            )));
        }
        total += t.data()[0];
    }
    Ok(Tensor::from_node(
        vec![1],
        vec![total],
        terms.iter().any(|t| t.requires_grad()),
        Op::SumScalars {
            inputs: terms.to_vec(),
        },
    ))
}

/// Stack `[C]` vectors into an `[N,C]` matrix, row i from input i.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("stack_rows: empty input list".into()));
    }
    let c = rows[0].numel();
    let mut data = Vec::with_capacity(rows.len() * c);
    for r in rows {
        if r.shape().len() != 1 || r.numel() != c {
            return Err(Error::ShapeMismatch(format!(
                "stack_rows: expected [{}] vectors, got {:?}",
                c,
                r.shape()
            )));
        }
        data.extend_from_slice(r.data());
    }
    Ok(Tensor::from_node(
        vec![rows.len(), c],
        data,
        rows.iter().any(|t| t.requires_grad()),
        Op::StackRows {
            inputs: rows.to_vec(),
        },
    ))
}

#[cfg(test)]
mod tests;
