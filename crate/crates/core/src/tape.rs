//! Reverse-mode autodiff on an append-only tape.
//!
//! Every op records its inputs and whatever it needs for the backward pass.
//! Node ids are handed out in insertion order, so they are already
//! topologically sorted and the backward pass is a single reverse sweep that
//! visits each node exactly once, accumulating fan-out gradients by sum.
//!
//! A tape is driven by one logical thread; kernels may still parallelize
//! internally over output elements (see `kernels`), which keeps results
//! bit-identical for a fixed precision.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec, PoolSpec};
use crate::tensor::{Scalar, Tensor};

/// Batch-statistics defaults shared by every batchnorm in the model.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Gelu,
}

/// Running batch-norm statistics for one layer.
#[derive(Clone, Debug)]
pub struct BnStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    /// Eval mode is rejected until statistics exist, unless they were
    /// explicitly initialized to (mean 0, var 1).
    pub initialized: bool,
}

impl<T: Scalar> BnStats<T> {
    /// Explicit (0, 1) initialization; valid for eval mode immediately.
    pub fn identity(channels: usize) -> Self {
        BnStats {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
            initialized: true,
        }
    }

    pub fn uninitialized(channels: usize) -> Self {
        BnStats {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
            initialized: false,
        }
    }
}

#[derive(Clone, Debug)]
struct MatMulMeta {
    batch: Vec<usize>,
    a_stride: Vec<usize>,
    b_stride: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

enum Rule<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        scale: Vec<T>,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2x {
        x: NodeId,
    },
    ConcatChannels {
        xs: Vec<NodeId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        meta: MatMulMeta,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    AddBroadcast {
        a: NodeId,
        b: NodeId,
    },
    Affine {
        x: NodeId,
        scale: T,
    },
    Ln {
        x: NodeId,
    },
    Clamp {
        x: NodeId,
        lo: T,
        hi: T,
    },
    SumAll {
        x: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    SwapAxes {
        x: NodeId,
        a: usize,
        b: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    rule: Rule<T>,
    param: bool,
}

/// Gradients of every reachable node after a backward pass, indexed by
/// [`NodeId`]. Leaves the loss cannot reach read back as zeros.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros of its value shape when unreachable.
    pub fn get_or_zeros(&self, tape: &Tape<T>, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape().to_vec()),
        }
    }
}

/// The autodiff graph: a tape of primitive-op records.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_assign<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].param
    }

    fn push(&mut self, value: Tensor<T>, rule: Rule<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            rule,
            param: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable input node.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Rule::Leaf)
    }

    /// Trainable-parameter leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(value, Rule::Leaf);
        self.nodes[id.0].param = true;
        id
    }

    // ---- convolution / pooling / resampling --------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv2d wants rank-4 input/weight, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let xs = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let ws = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
        let bias = match b {
            Some(bid) => {
                let bv = self.value(bid);
                if bv.shape() != [ws[0]] {
                    return Err(Error::Shape(format!(
                        "conv2d bias shape {:?} does not match Cout={}",
                        bv.shape(),
                        ws[0]
                    )));
                }
                Some(bv.data().to_vec())
            }
            None => None,
        };
        let (out, oshape) = kernels::conv2d_forward(
            self.value(x).data(),
            xs,
            self.value(w).data(),
            ws,
            bias.as_deref(),
            spec,
        )?;
        let value = Tensor::new(oshape.to_vec(), out)?;
        Ok(self.push(value, Rule::Conv2d { x, w, b, spec: *spec }))
    }

    /// Batch normalization over the (N, H, W) axes of an `[N,C,H,W]` input.
    /// Train mode normalizes by batch statistics and folds them into `stats`
    /// with the fixed momentum; eval mode uses `stats` as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut BnStats<T>,
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("batchnorm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::Shape(format!(
                "batchnorm2d wants rank-4 input, got {:?}",
                xv.shape()
            )));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::Shape(format!(
                    "batchnorm2d {name} shape {:?} does not match C={c}",
                    self.value(id).shape()
                )));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Shape(format!(
                "batchnorm2d running stats have {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let eps_t = T::from_f64(eps);
        let plane = h * w;
        let m = n * plane;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();

        match mode {
            Mode::Train => {
                let m_t = T::from_f64(m as f64);
                let mut mean = vec![T::ZERO; c];
                let mut var = vec![T::ZERO; c];
                for ch in 0..c {
                    let mut acc = T::ZERO;
                    for img in 0..n {
                        let base = (img * c + ch) * plane;
                        for &v in &xd[base..base + plane] {
                            acc += v;
                        }
                    }
                    mean[ch] = acc / m_t;
                    let mut vacc = T::ZERO;
                    for img in 0..n {
                        let base = (img * c + ch) * plane;
                        for &v in &xd[base..base + plane] {
                            let d = v - mean[ch];
                            vacc += d * d;
                        }
                    }
                    var[ch] = vacc / m_t;
                }
                let inv_std: Vec<T> =
                    var.iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
                let mut xhat = vec![T::ZERO; xd.len()];
                let mut out = vec![T::ZERO; xd.len()];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * plane;
                        let (mu, inv, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                        for i in base..base + plane {
                            let xh = (xd[i] - mu) * inv;
                            xhat[i] = xh;
                            out[i] = g * xh + b;
                        }
                    }
                }
                // running update: biased batch variance is rescaled to the
                // unbiased estimate when more than one element contributed
                let mom = T::from_f64(momentum);
                let keep = T::ONE - mom;
                let var_scale = if m > 1 {
                    T::from_f64(m as f64 / (m as f64 - 1.0))
                } else {
                    T::ONE
                };
                for ch in 0..c {
                    stats.mean.data_mut()[ch] = keep * stats.mean.data()[ch] + mom * mean[ch];
                    stats.var.data_mut()[ch] =
                        keep * stats.var.data()[ch] + mom * var[ch] * var_scale;
                }
                stats.initialized = true;
                let shape = self.value(x).shape().to_vec();
                let xhat = Tensor::new(shape.clone(), xhat)?;
                let value = Tensor::new(shape, out)?;
                Ok(self.push(
                    value,
                    Rule::BatchNormTrain {
                        x,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                ))
            }
            Mode::Eval => {
                if !stats.initialized {
                    return Err(Error::Config(
                        "batchnorm eval mode before any statistics exist".into(),
                    ));
                }
                let inv_std: Vec<T> = stats
                    .var
                    .data()
                    .iter()
                    .map(|&v| T::ONE / (v + eps_t).sqrt())
                    .collect();
                let scale: Vec<T> = (0..c).map(|ch| gd[ch] * inv_std[ch]).collect();
                let mean: Vec<T> = stats.mean.data().to_vec();
                let mut out = vec![T::ZERO; xd.len()];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * plane;
                        let (s, mu, b) = (scale[ch], mean[ch], bd[ch]);
                        for i in base..base + plane {
                            out[i] = s * (xd[i] - mu) + b;
                        }
                    }
                }
                let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
                Ok(self.push(
                    value,
                    Rule::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        scale,
                        mean,
                        inv_std,
                    },
                ))
            }
        }
    }

    pub fn maxpool2d(&mut self, x: NodeId, spec: &PoolSpec) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::Shape(format!(
                "maxpool2d wants rank-4 input, got {:?}",
                xv.shape()
            )));
        }
        let xs = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let (out, oshape, argmax) = kernels::maxpool2d_forward(xv.data(), xs, spec)?;
        let value = Tensor::new(oshape.to_vec(), out)?;
        Ok(self.push(value, Rule::MaxPool { x, argmax }))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::Shape(format!(
                "upsample2x wants rank-4 input, got {:?}",
                xv.shape()
            )));
        }
        let xs = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let (out, oshape) = kernels::upsample2x_forward(xv.data(), xs);
        let value = Tensor::new(oshape.to_vec(), out)?;
        Ok(self.push(value, Rule::Upsample2x { x }))
    }

    /// Channel-axis concatenation of `[N,Ci,H,W]` tensors in argument order.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape("concat_channels: empty input list".into()));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if first.len() != 4 {
            return Err(Error::Shape(format!(
                "concat_channels wants rank-4 inputs, got {first:?}"
            )));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for &id in xs {
            let s = self.value(id).shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Shape(format!(
                    "concat_channels: {s:?} incompatible with {first:?}"
                )));
            }
            c_total += s[1];
        }
        let plane = h * w;
        let mut out = vec![T::ZERO; n * c_total * plane];
        for img in 0..n {
            let mut c_off = 0;
            for &id in xs {
                let v = self.value(id);
                let ci = v.shape()[1];
                let src = &v.data()[img * ci * plane..(img + 1) * ci * plane];
                let dst_base = (img * c_total + c_off) * plane;
                out[dst_base..dst_base + ci * plane].copy_from_slice(src);
                c_off += ci;
            }
        }
        let value = Tensor::new(vec![n, c_total, h, w], out)?;
        Ok(self.push(value, Rule::ConcatChannels { xs: xs.to_vec() }))
    }

    // ---- dense algebra ------------------------------------------------------

    /// Batched matrix product `[..., m, k] @ [..., k, n]`; leading batch axes
    /// broadcast when one side has extent 1 (or is missing the axis).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() < 2 || bv.rank() < 2 {
            return Err(Error::Shape(format!(
                "matmul wants rank >= 2, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (ra, rb) = (av.rank(), bv.rank());
        let m = av.shape()[ra - 2];
        let k = av.shape()[ra - 1];
        let kb = bv.shape()[rb - 2];
        let n = bv.shape()[rb - 1];
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let l = ra.max(rb) - 2;
        let mut batch = vec![1usize; l];
        let mut a_dims = vec![1usize; l];
        let mut b_dims = vec![1usize; l];
        for d in 0..l {
            if d >= l - (ra - 2) {
                a_dims[d] = av.shape()[d - (l - (ra - 2))];
            }
            if d >= l - (rb - 2) {
                b_dims[d] = bv.shape()[d - (l - (rb - 2))];
            }
            if a_dims[d] != b_dims[d] && a_dims[d] != 1 && b_dims[d] != 1 {
                return Err(Error::Shape(format!(
                    "matmul batch axes incompatible: {:?} vs {:?}",
                    av.shape(),
                    bv.shape()
                )));
            }
            batch[d] = a_dims[d].max(b_dims[d]);
        }
        // strides in units of one [m,k] / [k,n] matrix, 0 where broadcast
        let stride_of = |dims: &[usize]| {
            let mut s = vec![0usize; l];
            let mut acc = 1usize;
            for d in (0..l).rev() {
                s[d] = if dims[d] == 1 { 0 } else { acc };
                if dims[d] != 1 {
                    acc *= dims[d];
                }
            }
            s
        };
        let meta = MatMulMeta {
            batch: batch.clone(),
            a_stride: stride_of(&a_dims),
            b_stride: stride_of(&b_dims),
            m,
            k,
            n,
        };
        let batch_total: usize = batch.iter().product();
        let mut out = vec![T::ZERO; batch_total * m * n];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        for flat in 0..batch_total {
            let (ai, bi) = decode_batch(flat, &meta);
            let y = kernels::gemm_nn(
                m,
                k,
                n,
                &ad[ai * m * k..(ai + 1) * m * k],
                &bd[bi * k * n..(bi + 1) * k * n],
            );
            out[flat * m * n..(flat + 1) * m * n].copy_from_slice(&y);
        }
        let mut oshape = batch;
        oshape.push(m);
        oshape.push(n);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Rule::MatMul { a, b, meta }))
    }

    /// Numerically stable softmax along `axis` (max-subtraction per row).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {:?}",
                xv.shape()
            )));
        }
        let shape = xv.shape().to_vec();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = xv.data();
        let mut out = vec![T::ZERO; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * axis_len + j) * inner + i;
                let mut mx = xd[at(0)];
                for j in 1..axis_len {
                    mx = mx.maximum(xd[at(j)]);
                }
                let mut denom = T::ZERO;
                for j in 0..axis_len {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..axis_len {
                    out[at(j)] /= denom;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Rule::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis with affine (gamma, beta).
    pub fn layernorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layernorm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let d = *xv.shape().last().expect("rank >= 1");
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [d] {
                return Err(Error::Shape(format!(
                    "layernorm {name} shape {:?} does not match last axis {d}",
                    self.value(id).shape()
                )));
            }
        }
        let rows = xv.len() / d;
        let xd = xv.data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let eps_t = T::from_f64(eps);
        let d_t = T::from_f64(d as f64);
        let mut out = vec![T::ZERO; xd.len()];
        let mut xhat = vec![T::ZERO; xd.len()];
        let mut inv_std = vec![T::ZERO; rows];
        for (r, inv_slot) in inv_std.iter_mut().enumerate() {
            let row = &xd[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean /= d_t;
            let mut var = T::ZERO;
            for &v in row {
                let dv = v - mean;
                var += dv * dv;
            }
            var /= d_t;
            let inv = T::ONE / (var + eps_t).sqrt();
            *inv_slot = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        let shape = xv.shape().to_vec();
        let xhat = Tensor::new(shape.clone(), xhat)?;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Rule::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- elementwise --------------------------------------------------------

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Gelu => self.gelu(x),
        }
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v.maximum(T::ZERO));
        Ok(self.push(value, Rule::Relu { x }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(sigmoid_scalar);
        Ok(self.push(value, Rule::Sigmoid { x }))
    }

    /// GELU in its tanh form.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(gelu_scalar);
        Ok(self.push(value, Rule::Gelu { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(value, Rule::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(value, Rule::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(value, Rule::Mul { a, b }))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("div", self.value(a), self.value(b))?;
        let value = zip(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(value, Rule::Div { a, b }))
    }

    /// `a + b` where the shape of `b` is a trailing suffix of the shape of
    /// `a` (bias over the last axis, positional tables over the last two).
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(Error::Shape(format!(
                "add_broadcast: {sb:?} is not a trailing suffix of {sa:?}"
            )));
        }
        let blen = bv.len();
        let bd = bv.data();
        let mut out = av.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o += bd[i % blen];
        }
        let value = Tensor::new(sa.to_vec(), out)?;
        Ok(self.push(value, Rule::AddBroadcast { a, b }))
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let (s, c) = (T::from_f64(scale), T::from_f64(shift));
        let value = self.value(x).map(|v| s * v + c);
        Ok(self.push(value, Rule::Affine { x, scale: s }))
    }

    /// Natural log; the whole input must be strictly positive.
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|&v| v <= T::ZERO) {
            return Err(Error::Numerical(
                "ln of a non-positive element; clamp the input first".into(),
            ));
        }
        let value = self.value(x).map(|v| v.ln());
        Ok(self.push(value, Rule::Ln { x }))
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the band.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::Config(format!("clamp wants lo < hi, got [{lo}, {hi}]")));
        }
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let value = self.value(x).map(|v| v.maximum(lo).minimum(hi));
        Ok(self.push(value, Rule::Clamp { x, lo, hi }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        Ok(self.push(Tensor::scalar(acc), Rule::SumAll { x }))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let len = self.value(x).len();
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let value = Tensor::scalar(acc / T::from_f64(len as f64));
        Ok(self.push(value, Rule::MeanAll { x }))
    }

    // ---- shape --------------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Rule::Reshape { x }))
    }

    /// Physically transposes two axes.
    pub fn swap_axes(&mut self, x: NodeId, a: usize, b: usize) -> Result<NodeId> {
        let value = swap_axes_data(self.value(x), a, b)?;
        Ok(self.push(value, Rule::SwapAxes { x, a, b }))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss node. Fan-out gradients
    /// accumulate by sum; every gradient has the shape of its node's value.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            match &self.nodes[idx].rule {
                Rule::Leaf => {}
                Rule::Conv2d { x, w, b, spec } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let xs = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
                    let ws = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
                    let (dx, dw, db) = kernels::conv2d_backward(
                        xv.data(),
                        xs,
                        wv.data(),
                        ws,
                        spec,
                        g.data(),
                        b.is_some(),
                    );
                    self.acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                    self.acc(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    if let (Some(bid), Some(db)) = (b, db) {
                        self.acc(&mut grads, *bid, Tensor::new(vec![ws[0]], db)?);
                    }
                }
                Rule::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let shape = xhat.shape();
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let plane = h * w;
                    let m = n * plane;
                    let m_t = T::from_f64(m as f64);
                    let gd = self.value(*gamma).data();
                    let gdat = g.data();
                    let xh = xhat.data();
                    let mut dgamma = vec![T::ZERO; c];
                    let mut dbeta = vec![T::ZERO; c];
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * plane;
                            for i in base..base + plane {
                                dbeta[ch] += gdat[i];
                                dgamma[ch] += gdat[i] * xh[i];
                            }
                        }
                    }
                    let mut dx = vec![T::ZERO; xh.len()];
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * plane;
                            let coeff = gd[ch] * inv_std[ch];
                            let mean_dy = dbeta[ch] / m_t;
                            let mean_dyxh = dgamma[ch] / m_t;
                            for i in base..base + plane {
                                dx[i] = coeff * (gdat[i] - mean_dy - xh[i] * mean_dyxh);
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(shape.to_vec(), dx)?);
                    self.acc(&mut grads, *gamma, Tensor::new(vec![c], dgamma)?);
                    self.acc(&mut grads, *beta, Tensor::new(vec![c], dbeta)?);
                }
                Rule::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    scale,
                    mean,
                    inv_std,
                } => {
                    let xv = self.value(*x);
                    let shape = xv.shape();
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let plane = h * w;
                    let xd = xv.data();
                    let gdat = g.data();
                    let mut dx = vec![T::ZERO; xd.len()];
                    let mut dgamma = vec![T::ZERO; c];
                    let mut dbeta = vec![T::ZERO; c];
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] = gdat[i] * scale[ch];
                                dgamma[ch] += gdat[i] * (xd[i] - mean[ch]) * inv_std[ch];
                                dbeta[ch] += gdat[i];
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(shape.to_vec(), dx)?);
                    self.acc(&mut grads, *gamma, Tensor::new(vec![c], dgamma)?);
                    self.acc(&mut grads, *beta, Tensor::new(vec![c], dbeta)?);
                }
                Rule::Relu { x } => {
                    let d = zip(&g, self.value(*x), |gv, xv| {
                        if xv > T::ZERO {
                            gv
                        } else {
                            T::ZERO
                        }
                    });
                    self.acc(&mut grads, *x, d);
                }
                Rule::Sigmoid { x } => {
                    let y = &self.nodes[idx].value;
                    let d = zip(&g, y, |gv, yv| gv * yv * (T::ONE - yv));
                    self.acc(&mut grads, *x, d);
                }
                Rule::Gelu { x } => {
                    let d = zip(&g, self.value(*x), |gv, xv| gv * gelu_derivative(xv));
                    self.acc(&mut grads, *x, d);
                }
                Rule::MaxPool { x, argmax } => {
                    let dx =
                        kernels::maxpool2d_backward(argmax, g.data(), self.value(*x).len());
                    self.acc(
                        &mut grads,
                        *x,
                        Tensor::new(self.value(*x).shape().to_vec(), dx)?,
                    );
                }
                Rule::Upsample2x { x } => {
                    let xv = self.value(*x);
                    let xs = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
                    let dx = kernels::upsample2x_backward(g.data(), xs);
                    self.acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Rule::ConcatChannels { xs } => {
                    let mut lo = 0;
                    for &id in xs {
                        let ci = self.value(id).shape()[1];
                        let slice = g.slice_channels(lo, lo + ci)?;
                        self.acc(&mut grads, id, slice);
                        lo += ci;
                    }
                }
                Rule::MatMul { a, b, meta } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k, n) = (meta.m, meta.k, meta.n);
                    let batch_total: usize = meta.batch.iter().product();
                    let mut da = vec![T::ZERO; av.len()];
                    let mut db = vec![T::ZERO; bv.len()];
                    let gd = g.data();
                    for flat in 0..batch_total {
                        let (ai, bi) = decode_batch(flat, meta);
                        let dy = &gd[flat * m * n..(flat + 1) * m * n];
                        kernels::gemm_abt_acc(
                            m,
                            n,
                            k,
                            dy,
                            &bv.data()[bi * k * n..(bi + 1) * k * n],
                            &mut da[ai * m * k..(ai + 1) * m * k],
                        );
                        kernels::gemm_atb_acc(
                            m,
                            k,
                            n,
                            &av.data()[ai * m * k..(ai + 1) * m * k],
                            dy,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    self.acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                    self.acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                Rule::Softmax { x, axis } => {
                    let y = &self.nodes[idx].value;
                    let shape = y.shape();
                    let axis_len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let yd = y.data();
                    let gd = g.data();
                    let mut dx = vec![T::ZERO; yd.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * axis_len + j) * inner + i;
                            let mut dot = T::ZERO;
                            for j in 0..axis_len {
                                dot += gd[at(j)] * yd[at(j)];
                            }
                            for j in 0..axis_len {
                                dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(shape.to_vec(), dx)?);
                }
                Rule::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = *xhat.shape().last().unwrap();
                    let rows = xhat.len() / d;
                    let d_t = T::from_f64(d as f64);
                    let gd = self.value(*gamma).data();
                    let xh = xhat.data();
                    let gdat = g.data();
                    let mut dgamma = vec![T::ZERO; d];
                    let mut dbeta = vec![T::ZERO; d];
                    let mut dx = vec![T::ZERO; xh.len()];
                    debug_assert_eq!(inv_std.len(), rows);
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let base = r * d;
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for j in 0..d {
                            let gg = gdat[base + j] * gd[j];
                            m1 += gg;
                            m2 += gg * xh[base + j];
                        }
                        m1 /= d_t;
                        m2 /= d_t;
                        for j in 0..d {
                            let gg = gdat[base + j] * gd[j];
                            dx[base + j] = inv * (gg - m1 - xh[base + j] * m2);
                            dgamma[j] += gdat[base + j] * xh[base + j];
                            dbeta[j] += gdat[base + j];
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(xhat.shape().to_vec(), dx)?);
                    self.acc(&mut grads, *gamma, Tensor::new(vec![d], dgamma)?);
                    self.acc(&mut grads, *beta, Tensor::new(vec![d], dbeta)?);
                }
                Rule::Add { a, b } => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g.clone());
                }
                Rule::Sub { a, b } => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g.map(|v| -v));
                }
                Rule::Mul { a, b } => {
                    let da = zip(&g, self.value(*b), |gv, bv| gv * bv);
                    let db = zip(&g, self.value(*a), |gv, av| gv * av);
                    self.acc(&mut grads, *a, da);
                    self.acc(&mut grads, *b, db);
                }
                Rule::Div { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = zip(&g, bv, |gv, b_| gv / b_);
                    let mut db = g.clone();
                    for ((dv, &a_), &b_) in
                        db.data_mut().iter_mut().zip(av.data()).zip(bv.data())
                    {
                        *dv = -*dv * a_ / (b_ * b_);
                    }
                    self.acc(&mut grads, *a, da);
                    self.acc(&mut grads, *b, db);
                }
                Rule::AddBroadcast { a, b } => {
                    let blen = self.value(*b).len();
                    let mut db = vec![T::ZERO; blen];
                    for (i, &gv) in g.data().iter().enumerate() {
                        db[i % blen] += gv;
                    }
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(
                        &mut grads,
                        *b,
                        Tensor::new(self.value(*b).shape().to_vec(), db)?,
                    );
                }
                Rule::Affine { x, scale } => {
                    let s = *scale;
                    self.acc(&mut grads, *x, g.map(|v| v * s));
                }
                Rule::Ln { x } => {
                    let d = zip(&g, self.value(*x), |gv, xv| gv / xv);
                    self.acc(&mut grads, *x, d);
                }
                Rule::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let d = zip(&g, self.value(*x), |gv, xv| {
                        if xv > lo && xv < hi {
                            gv
                        } else {
                            T::ZERO
                        }
                    });
                    self.acc(&mut grads, *x, d);
                }
                Rule::SumAll { x } => {
                    let gv = g.item();
                    self.acc(
                        &mut grads,
                        *x,
                        Tensor::full(self.value(*x).shape().to_vec(), gv),
                    );
                }
                Rule::MeanAll { x } => {
                    let len = self.value(*x).len();
                    let gv = g.item() / T::from_f64(len as f64);
                    self.acc(
                        &mut grads,
                        *x,
                        Tensor::full(self.value(*x).shape().to_vec(), gv),
                    );
                }
                Rule::Reshape { x } => {
                    let back = g.reshaped(self.value(*x).shape().to_vec())?;
                    self.acc(&mut grads, *x, back);
                }
                Rule::SwapAxes { x, a, b } => {
                    let back = swap_axes_data(&g, *a, *b)?;
                    self.acc(&mut grads, *x, back);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        debug_assert_eq!(self.value(id).shape(), delta.shape());
        match &mut grads[id.0] {
            Some(t) => add_assign(t, &delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

fn decode_batch(flat: usize, meta: &MatMulMeta) -> (usize, usize) {
    let mut rem = flat;
    let mut ai = 0;
    let mut bi = 0;
    for d in (0..meta.batch.len()).rev() {
        let coord = rem % meta.batch[d];
        rem /= meta.batch[d];
        ai += coord * meta.a_stride[d];
        bi += coord * meta.b_stride[d];
    }
    (ai, bi)
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip preserves shape")
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // split on sign for stability at large |x|
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

fn swap_axes_data<T: Scalar>(t: &Tensor<T>, a: usize, b: usize) -> Result<Tensor<T>> {
    let rank = t.rank();
    if a >= rank || b >= rank {
        return Err(Error::Shape(format!(
            "swap_axes({a}, {b}) out of range for {:?}",
            t.shape()
        )));
    }
    if a == b {
        return Ok(t.clone());
    }
    let shape = t.shape();
    let mut new_shape = shape.to_vec();
    new_shape.swap(a, b);
    let mut old_stride = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        old_stride[d] = old_stride[d + 1] * shape[d + 1];
    }
    // stride of the output coordinate d in the *input* buffer
    let mut src_stride = old_stride.clone();
    src_stride.swap(a, b);
    let mut out = vec![T::ZERO; t.len()];
    let data = t.data();
    let mut coords = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0;
        for d in 0..rank {
            src += coords[d] * src_stride[d];
        }
        *o = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < new_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    Tensor::new(new_shape, out)
}
