//! Tape-style computation graph.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::{Scalar, Tensor};
use crate::error::{config_err, input_err, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![T::zero(); features],
            var: vec![T::one(); features],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

pub enum BnMode<'a, T> {
    /// Normalize with batch statistics and fold them into the running stats.
    Train(&'a mut BnStats<T>),
    /// Normalize with the running stats.
    Eval(&'a BnStats<T>),
}

/// Anchor/positive/negative row indices into an embedding matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ChannelBias,
    MatMul,
    Linear,
    BatchNorm,
    Relu,
    Tanh,
    Sigmoid,
    GlobalAvgPool,
    WeightedAvgPool,
    SoftmaxCrossEntropy,
    Concat,
    Add,
    Mul,
    Scale,
    Sum,
    Mean,
    TripletLoss,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::ChannelBias => "channel_bias",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::GlobalAvgPool => "global_average_pool",
            OpKind::WeightedAvgPool => "weighted_average_pool",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Concat => "concat",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::TripletLoss => "triplet_loss",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<T> {
    Leaf,
    Conv2d { geom: ConvGeom, cols: Vec<T> },
    ChannelBias,
    MatMul,
    Linear,
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Act(Activation),
    GlobalAvgPool,
    WeightedAvgPool,
    SoftmaxCe { probs: Vec<T>, targets: Vec<usize> },
    Concat { widths: Vec<usize> },
    Add,
    Mul,
    Scale(T),
    Sum,
    Mean,
    Triplet { triplets: Vec<Triplet>, margin: T },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ChannelBias => OpKind::ChannelBias,
            Op::MatMul => OpKind::MatMul,
            Op::Linear => OpKind::Linear,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Act(Activation::Relu) => OpKind::Relu,
            Op::Act(Activation::Tanh) => OpKind::Tanh,
            Op::Act(Activation::Sigmoid) => OpKind::Sigmoid,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::WeightedAvgPool => OpKind::WeightedAvgPool,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Concat { .. } => OpKind::Concat,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Triplet { .. } => OpKind::TripletLoss,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
    label: Option<String>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: Vec<Var>) -> Var {
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            inputs,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input tensor. Gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>, requires_grad: bool) -> Var {
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            inputs: Vec::new(),
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn named_leaf(&mut self, tensor: Tensor<T>, requires_grad: bool, name: &str) -> Var {
        let v = self.leaf(tensor, requires_grad);
        self.nodes[v.0].label = Some(name.to_string());
        v
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn count_ops(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// First node, in evaluation order, holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, node)| {
            if node.value.all_finite() {
                return None;
            }
            let desc = match &node.label {
                Some(name) => format!("tensor '{name}' (node {i})"),
                None => {
                    let srcs: Vec<String> = node
                        .inputs
                        .iter()
                        .map(|v| match &self.nodes[v.0].label {
                            Some(name) => name.clone(),
                            None => format!("#{}", v.0),
                        })
                        .collect();
                    format!(
                        "{} output (node {i}, inputs [{}])",
                        node.op.kind(),
                        srcs.join(", ")
                    )
                }
            };
            Some(desc)
        })
    }

    // ---- ops ------------------------------------------------------------

    /// 2-d convolution of an NCHW input with an OIKhKw kernel, no bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        if xs.len() != 4 || ks.len() != 4 {
            return Err(config_err!(
                "conv2d expects NCHW input and OIKhKw kernel, got {xs:?} and {ks:?}"
            ));
        }
        if xs[1] != ks[1] {
            return Err(config_err!(
                "conv2d channel mismatch: input has {} channels, kernel expects {} (input {xs:?}, kernel {ks:?})",
                xs[1],
                ks[1]
            ));
        }
        if stride == 0 {
            return Err(config_err!("conv2d stride must be at least 1"));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(config_err!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let x = self.value(input).data();
        let cols = im2col(x, &geom);
        let np = n * geom.positions();
        let mut tmp = vec![T::zero(); cout * np];
        gemm(
            false,
            false,
            cout,
            np,
            geom.patch(),
            T::one(),
            self.value(kernel).data(),
            &cols,
            T::zero(),
            &mut tmp,
        );
        // [cout, n, p] -> [n, cout, p]
        let p = geom.positions();
        let mut out = vec![T::zero(); n * cout * p];
        for o in 0..cout {
            for b in 0..n {
                let src = &tmp[o * np + b * p..o * np + (b + 1) * p];
                out[(b * cout + o) * p..(b * cout + o + 1) * p].copy_from_slice(src);
            }
        }
        let value = Tensor::from_parts(vec![n, cout, ho, wo], out);
        Ok(self.push(value, Op::Conv2d { geom, cols }, vec![input, kernel]))
    }

    /// Adds a per-channel bias to an NCHW tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let bs = self.shape(bias);
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(config_err!(
                "channel_bias expects NCHW input and a C-vector, got {xs:?} and {bs:?}"
            ));
        }
        let p = xs[2] * xs[3];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(input).data().to_vec();
        for (i, chunk) in out.chunks_mut(p).enumerate() {
            let c = i % xs[1];
            for v in chunk {
                *v += b[c];
            }
        }
        let value = Tensor::from_parts(xs, out);
        Ok(self.push(value, Op::ChannelBias, vec![input, bias]))
    }

    /// `input (N x D) . weight (D x E)`.
    pub fn matmul(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (n, d, e) = self.matmul_dims(input, weight, "matmul")?;
        let mut out = vec![T::zero(); n * e];
        gemm(
            false,
            false,
            n,
            e,
            d,
            T::one(),
            self.value(input).data(),
            self.value(weight).data(),
            T::zero(),
            &mut out,
        );
        let value = Tensor::from_parts(vec![n, e], out);
        Ok(self.push(value, Op::MatMul, vec![input, weight]))
    }

    /// `input (N x D) . weight (D x E) + bias (E)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d, e) = self.matmul_dims(input, weight, "linear")?;
        let bs = self.shape(bias);
        if bs != [e] {
            return Err(config_err!("linear bias must have shape [{e}], got {bs:?}"));
        }
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(n * e);
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        gemm(
            false,
            false,
            n,
            e,
            d,
            T::one(),
            self.value(input).data(),
            self.value(weight).data(),
            T::one(),
            &mut out,
        );
        let value = Tensor::from_parts(vec![n, e], out);
        Ok(self.push(value, Op::Linear, vec![input, weight, bias]))
    }

    fn matmul_dims(&self, input: Var, weight: Var, op: &str) -> Result<(usize, usize, usize)> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 2 || ws.len() != 2 {
            return Err(config_err!("{op} expects 2-d operands, got {xs:?} and {ws:?}"));
        }
        if xs[1] != ws[0] {
            return Err(config_err!(
                "{op} inner dimension mismatch: input {xs:?}, weight {ws:?}"
            ));
        }
        Ok((xs[0], xs[1], ws[1]))
    }

    /// Batch normalization over the batch axis of an `N x D` tensor, or over
    /// batch and spatial axes (per channel) of an NCHW tensor.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let (n, c, p) = match xs.len() {
            2 => (xs[0], xs[1], 1),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => return Err(config_err!("batch_norm expects N x D or NCHW input, got {xs:?}")),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(config_err!(
                "batch_norm affine parameters must have shape [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let x = self.value(input).data();
        let eps = T::of_f64(BN_EPS);
        let m = n * p;
        let mut inv_std = vec![T::zero(); c];
        let mut mean = vec![T::zero(); c];
        let train = matches!(mode, BnMode::Train(_));
        match mode {
            BnMode::Train(stats) => {
                if n < 2 {
                    return Err(input_err!(
                        "batch_norm in train mode needs at least 2 samples, got {n}"
                    ));
                }
                if stats.len() != c {
                    return Err(config_err!("running stats hold {} features, input has {c}", stats.len()));
                }
                let mut var = vec![T::zero(); c];
                let inv_m = T::one() / T::of_f64(m as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * p;
                        mean[ch] += x[base..base + p].iter().copied().sum::<T>();
                    }
                }
                for v in mean.iter_mut() {
                    *v *= inv_m;
                }
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * p;
                        let mu = mean[ch];
                        var[ch] += x[base..base + p].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                }
                let mom = T::of_f64(BN_MOMENTUM);
                let unbias = T::of_f64(m as f64 / (m as f64 - 1.0));
                for ch in 0..c {
                    var[ch] *= inv_m;
                    inv_std[ch] = T::one() / (var[ch] + eps).sqrt();
                    stats.mean[ch] = mom * stats.mean[ch] + (T::one() - mom) * mean[ch];
                    stats.var[ch] = mom * stats.var[ch] + (T::one() - mom) * var[ch] * unbias;
                }
            }
            BnMode::Eval(stats) => {
                if stats.len() != c {
                    return Err(config_err!("running stats hold {} features, input has {c}", stats.len()));
                }
                mean.copy_from_slice(&stats.mean);
                for ch in 0..c {
                    inv_std[ch] = T::one() / (stats.var[ch] + eps).sqrt();
                }
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * p;
                for i in base..base + p {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let value = Tensor::from_parts(xs, out);
        Ok(self.push(
            value,
            Op::BatchNorm {
                xhat,
                inv_std,
                train,
            },
            vec![input, gamma, beta],
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        // Saturated outputs are pulled back inside the open interval so the
        // range contract holds in single precision too.
        // `max`/`min` would swallow NaN, so the clamps go through `clamp_nan`.
        let hi = T::one() - T::epsilon() / T::of_f64(2.0);
        let lo = T::min_positive_value();
        let out: Vec<T> = match kind {
            Activation::Relu => x
                .data()
                .iter()
                .map(|&v| if v < T::zero() { T::zero() } else { v })
                .collect(),
            Activation::Tanh => x.data().iter().map(|&v| clamp_nan(v.tanh(), -hi, hi)).collect(),
            Activation::Sigmoid => x
                .data()
                .iter()
                .map(|&v| {
                    let s = if v >= T::zero() {
                        T::one() / (T::one() + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (T::one() + e)
                    };
                    clamp_nan(s, lo, hi)
                })
                .collect(),
        };
        let value = Tensor::from_parts(shape, out);
        self.push(value, Op::Act(kind), vec![input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// Mean over all spatial locations: NCHW -> N x C.
    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(config_err!("global_average_pool expects NCHW input, got {xs:?}"));
        }
        let p = xs[2] * xs[3];
        let inv = T::one() / T::of_f64(p as f64);
        let out: Vec<T> = self
            .value(input)
            .data()
            .chunks(p)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_parts(vec![xs[0], xs[1]], out);
        Ok(self.push(value, Op::GlobalAvgPool, vec![input]))
    }

    /// Mask-weighted spatial sum divided by `H * W` (not by the mask mass).
    pub fn weighted_average_pool(&mut self, featmap: Var, mask: Var) -> Result<Var> {
        let fs = self.shape(featmap).to_vec();
        let ms = self.shape(mask);
        if fs.len() != 4 || ms.len() != 4 {
            return Err(config_err!(
                "weighted_average_pool expects NCHW featmap and N1HW mask, got {fs:?} and {ms:?}"
            ));
        }
        if ms[0] != fs[0] || ms[1] != 1 || ms[2] != fs[2] || ms[3] != fs[3] {
            return Err(config_err!(
                "weighted_average_pool spatial mismatch: featmap {fs:?}, mask {ms:?}"
            ));
        }
        let (n, c, p) = (fs[0], fs[1], fs[2] * fs[3]);
        let inv = T::one() / T::of_f64(p as f64);
        let f = self.value(featmap).data();
        let m = self.value(mask).data();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let mrow = &m[b * p..(b + 1) * p];
            for ch in 0..c {
                let frow = &f[(b * c + ch) * p..(b * c + ch + 1) * p];
                let s: T = frow.iter().zip(mrow).map(|(&a, &w)| a * w).sum();
                out[b * c + ch] = s * inv;
            }
        }
        let value = Tensor::from_parts(vec![n, c], out);
        Ok(self.push(value, Op::WeightedAvgPool, vec![featmap, mask]))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 {
            return Err(config_err!("softmax_cross_entropy expects N x C logits, got {ls:?}"));
        }
        let (n, c) = (ls[0], ls[1]);
        if targets.len() != n {
            return Err(input_err!(
                "softmax_cross_entropy got {} targets for {n} rows",
                targets.len()
            ));
        }
        if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(input_err!("target {t} at row {i} is out of range for {c} classes"));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for b in 0..n {
            let row = &x[b * c..(b + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[b * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[b * c + j] /= z;
            }
            loss += z.ln() + mx - row[targets[b]];
        }
        loss /= T::of_f64(n as f64);
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                probs,
                targets: targets.to_vec(),
            },
            vec![logits],
        ))
    }

    /// Concatenate `N x D_i` tensors along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(config_err!("concat needs at least one part"));
        }
        let n = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &v in parts {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != n {
                return Err(config_err!(
                    "concat parts must be 2-d with {n} rows, got {s:?}"
                ));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for b in 0..n {
            for (&v, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[b * w..(b + 1) * w]);
            }
        }
        let value = Tensor::from_parts(vec![n, total], out);
        Ok(self.push(value, Op::Concat { widths }, parts.to_vec()))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err!(
                "{op} operands differ in shape: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, Op::Add, vec![a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, Op::Mul, vec![a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push(value, Op::Scale(factor), vec![a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::of_f64(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean, vec![a])
    }

    /// Mean hinge `max(d_ap - d_an + margin, 0)` over the given triplets, with
    /// squared Euclidean distances between rows of `embeddings`. An empty
    /// triplet list yields a constant zero.
    pub fn triplet_loss(&mut self, embeddings: Var, triplets: &[Triplet], margin: T) -> Result<Var> {
        let es = self.shape(embeddings).to_vec();
        if es.len() != 2 {
            return Err(config_err!("triplet_loss expects N x D embeddings, got {es:?}"));
        }
        let n = es[0];
        if let Some(t) = triplets
            .iter()
            .find(|t| t.anchor >= n || t.positive >= n || t.negative >= n)
        {
            return Err(input_err!("triplet {t:?} indexes past {n} embeddings"));
        }
        let e = self.value(embeddings);
        let mut loss = T::zero();
        for t in triplets {
            let h = sq_dist(e.row(t.anchor), e.row(t.positive)) - sq_dist(e.row(t.anchor), e.row(t.negative))
                + margin;
            if h > T::zero() || h.is_nan() {
                loss += h;
            }
        }
        if !triplets.is_empty() {
            loss /= T::of_f64(triplets.len() as f64);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Triplet {
                triplets: triplets.to_vec(),
                margin,
            },
            vec![embeddings],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every node that requires a gradient
    /// ends up with one (zeros when the loss does not depend on it); uses of a
    /// tensor in several places sum their contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(input_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        for node in self.nodes.iter_mut() {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let input_grads = self.node_backward(i, &g);
            for (input, delta) in self.nodes[i].inputs.iter().zip(input_grads) {
                if let Some(delta) = delta {
                    accumulate(&mut grads[input.0], delta);
                }
            }
            self.nodes[i].value.grad = Some(g);
        }
        // Tracked nodes the loss does not reach get explicit zeros.
        for node in self.nodes.iter_mut() {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let val = |k: usize| self.nodes[ins[k].0].value.data();
        let want = |k: usize| self.wants(ins[k]);
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { geom, cols } => {
                let geom = *geom;
                let p = geom.positions();
                let np = geom.n * p;
                let mut dtmp = vec![T::zero(); geom.cout * np];
                for b in 0..geom.n {
                    for o in 0..geom.cout {
                        let src = &g[(b * geom.cout + o) * p..(b * geom.cout + o + 1) * p];
                        dtmp[o * np + b * p..o * np + (b + 1) * p].copy_from_slice(src);
                    }
                }
                let dx = want(0).then(|| {
                    let mut dcols = vec![T::zero(); geom.patch() * np];
                    gemm(
                        true,
                        false,
                        geom.patch(),
                        np,
                        geom.cout,
                        T::one(),
                        val(1),
                        &dtmp,
                        T::zero(),
                        &mut dcols,
                    );
                    col2im(&dcols, &geom)
                });
                let dk = want(1).then(|| {
                    let mut dk = vec![T::zero(); geom.cout * geom.patch()];
                    gemm(
                        false,
                        true,
                        geom.cout,
                        geom.patch(),
                        np,
                        T::one(),
                        &dtmp,
                        cols,
                        T::zero(),
                        &mut dk,
                    );
                    dk
                });
                vec![dx, dk]
            }
            Op::ChannelBias => {
                let xs = self.nodes[ins[0].0].value.shape();
                let (c, p) = (xs[1], xs[2] * xs[3]);
                let dx = want(0).then(|| g.to_vec());
                let db = want(1).then(|| {
                    let mut db = vec![T::zero(); c];
                    for (k, chunk) in g.chunks(p).enumerate() {
                        db[k % c] += chunk.iter().copied().sum::<T>();
                    }
                    db
                });
                vec![dx, db]
            }
            Op::MatMul | Op::Linear => {
                let xs = self.nodes[ins[0].0].value.shape();
                let ws = self.nodes[ins[1].0].value.shape();
                let (n, d, e) = (xs[0], xs[1], ws[1]);
                let dx = want(0).then(|| {
                    let mut dx = vec![T::zero(); n * d];
                    gemm(false, true, n, d, e, T::one(), g, val(1), T::zero(), &mut dx);
                    dx
                });
                let dw = want(1).then(|| {
                    let mut dw = vec![T::zero(); d * e];
                    gemm(true, false, d, e, n, T::one(), val(0), g, T::zero(), &mut dw);
                    dw
                });
                let mut out = vec![dx, dw];
                if matches!(node.op, Op::Linear) {
                    out.push(want(2).then(|| {
                        let mut db = vec![T::zero(); e];
                        for row in g.chunks(e) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        db
                    }));
                }
                out
            }
            Op::BatchNorm {
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.nodes[ins[0].0].value.shape();
                let (n, c, p) = if xs.len() == 2 {
                    (xs[0], xs[1], 1)
                } else {
                    (xs[0], xs[1], xs[2] * xs[3])
                };
                let gamma = val(1);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * p;
                        for k in base..base + p {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                let dx = want(0).then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::of_f64((n * p) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * p;
                            let s = gamma[ch] * inv_std[ch];
                            for k in base..base + p {
                                dx[k] = if *train {
                                    s / m * (m * g[k] - sum_g[ch] - xhat[k] * sum_gx[ch])
                                } else {
                                    s * g[k]
                                };
                            }
                        }
                    }
                    dx
                });
                vec![dx, want(1).then(|| sum_gx.clone()), want(2).then(|| sum_g.clone())]
            }
            Op::Act(kind) => {
                let y = node.value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| match kind {
                        Activation::Relu => {
                            if yv > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        }
                        Activation::Tanh => gv * (T::one() - yv * yv),
                        Activation::Sigmoid => gv * yv * (T::one() - yv),
                    })
                    .collect();
                vec![Some(dx)]
            }
            Op::GlobalAvgPool => {
                let xs = self.nodes[ins[0].0].value.shape();
                let p = xs[2] * xs[3];
                let inv = T::one() / T::of_f64(p as f64);
                let mut dx = Vec::with_capacity(g.len() * p);
                for &gv in g {
                    dx.extend(std::iter::repeat(gv * inv).take(p));
                }
                vec![Some(dx)]
            }
            Op::WeightedAvgPool => {
                let fs = self.nodes[ins[0].0].value.shape();
                let (n, c, p) = (fs[0], fs[1], fs[2] * fs[3]);
                let inv = T::one() / T::of_f64(p as f64);
                let f = val(0);
                let m = val(1);
                let df = want(0).then(|| {
                    let mut df = vec![T::zero(); f.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let gv = g[b * c + ch] * inv;
                            let base = (b * c + ch) * p;
                            for k in 0..p {
                                df[base + k] = gv * m[b * p + k];
                            }
                        }
                    }
                    df
                });
                let dm = want(1).then(|| {
                    let mut dm = vec![T::zero(); m.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let gv = g[b * c + ch] * inv;
                            let base = (b * c + ch) * p;
                            for k in 0..p {
                                dm[b * p + k] += gv * f[base + k];
                            }
                        }
                    }
                    dm
                });
                vec![df, dm]
            }
            Op::SoftmaxCe { probs, targets } => {
                let n = targets.len();
                let c = probs.len() / n;
                let s = g[0] / T::of_f64(n as f64);
                let mut dx: Vec<T> = probs.iter().map(|&q| q * s).collect();
                for (b, &t) in targets.iter().enumerate() {
                    dx[b * c + t] -= s;
                }
                vec![Some(dx)]
            }
            Op::Concat { widths } => {
                let total: usize = widths.iter().sum();
                let n = g.len() / total;
                let mut offset = 0;
                let mut out = Vec::with_capacity(widths.len());
                for (k, &w) in widths.iter().enumerate() {
                    out.push(want(k).then(|| {
                        let mut d = Vec::with_capacity(n * w);
                        for b in 0..n {
                            d.extend_from_slice(&g[b * total + offset..b * total + offset + w]);
                        }
                        d
                    }));
                    offset += w;
                }
                out
            }
            Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                vec![
                    want(0).then(|| g.iter().zip(b).map(|(&x, &y)| x * y).collect()),
                    want(1).then(|| g.iter().zip(a).map(|(&x, &y)| x * y).collect()),
                ]
            }
            Op::Scale(f) => vec![Some(g.iter().map(|&x| x * *f).collect())],
            Op::Sum => {
                let n = self.nodes[ins[0].0].value.numel();
                vec![Some(vec![g[0]; n])]
            }
            Op::Mean => {
                let n = self.nodes[ins[0].0].value.numel();
                vec![Some(vec![g[0] / T::of_f64(n as f64); n])]
            }
            Op::Triplet { triplets, margin } => {
                let e = &self.nodes[ins[0].0].value;
                let d = e.shape()[1];
                let mut de = vec![T::zero(); e.numel()];
                if !triplets.is_empty() {
                    let s = g[0] / T::of_f64(triplets.len() as f64);
                    let two = T::of_f64(2.0);
                    for t in triplets {
                        let (a, p, ng) = (e.row(t.anchor), e.row(t.positive), e.row(t.negative));
                        let h = sq_dist(a, p) - sq_dist(a, ng) + *margin;
                        if h <= T::zero() {
                            continue;
                        }
                        for k in 0..d {
                            de[t.anchor * d + k] += s * two * (ng[k] - p[k]);
                            de[t.positive * d + k] -= s * two * (a[k] - p[k]);
                            de[t.negative * d + k] += s * two * (a[k] - ng[k]);
                        }
                    }
                }
                vec![Some(de)]
            }
        }
    }
}

/// Clamps to `[lo, hi]`, passing NaN through.
fn clamp_nan<T: Scalar>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

pub(crate) fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let np = g.n * p;
    let mut cols = vec![T::zero(); g.patch() * np];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for b in 0..g.n {
                    let src = &x[(b * g.cin + ci) * g.h * g.w..(b * g.cin + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut dst[b * p + oy * g.wo..b * p + (oy + 1) * g.wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let np = g.n * p;
    let mut x = vec![T::zero(); g.n * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * np..(row + 1) * np];
                for b in 0..g.n {
                    let dst = &mut x[(b * g.cin + ci) * g.h * g.w..(b * g.cin + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[b * p + oy * g.wo..b * p + (oy + 1) * g.wo];
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
