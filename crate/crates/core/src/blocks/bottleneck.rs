//! The two bottleneck branches: a transformer encoder block over the S/16
//! feature map and a parallel dilated-convolution block.

use crate::error::{Error, Result};
use crate::tape::NodeId;
use crate::tensor::Scalar;

use super::{BnPlan, ConvPlan, DeclaredParam, Forward, Init, LinearPlan, LnPlan};

/// Pre-norm transformer encoder block: learned positional embedding,
/// multi-head self-attention, then a GELU feed-forward, each with a
/// residual add. Operates on the flattened h*w token sequence.
pub struct TransformerPlan {
    prefix: String,
    pub c: usize,
    pub n_tokens: usize,
    pub heads: usize,
    ln1: LnPlan,
    q: LinearPlan,
    k: LinearPlan,
    v: LinearPlan,
    o: LinearPlan,
    ln2: LnPlan,
    fc1: LinearPlan,
    fc2: LinearPlan,
}

impl TransformerPlan {
    pub(crate) fn new(prefix: &str, c: usize, n_tokens: usize, heads: usize, ffn_ratio: usize) -> Self {
        TransformerPlan {
            prefix: prefix.to_string(),
            c,
            n_tokens,
            heads,
            ln1: LnPlan::new(format!("{prefix}.ln1"), c),
            q: LinearPlan::new(format!("{prefix}.attn.q"), c, c),
            k: LinearPlan::new(format!("{prefix}.attn.k"), c, c),
            v: LinearPlan::new(format!("{prefix}.attn.v"), c, c),
            o: LinearPlan::new(format!("{prefix}.attn.o"), c, c),
            ln2: LnPlan::new(format!("{prefix}.ln2"), c),
            fc1: LinearPlan::new(format!("{prefix}.ffn.fc1"), c, ffn_ratio * c),
            fc2: LinearPlan::new(format!("{prefix}.ffn.fc2"), ffn_ratio * c, c),
        }
    }

    /// Builds a free-standing block (used by block-scope tests and checks).
    pub fn standalone(prefix: &str, c: usize, n_tokens: usize, heads: usize, ffn_ratio: usize) -> Self {
        Self::new(prefix, c, n_tokens, heads, ffn_ratio)
    }

    pub fn pos_name(&self) -> String {
        format!("{}.pos_embed", self.prefix)
    }

    pub fn declare(&self, out: &mut Vec<DeclaredParam>) {
        out.push(DeclaredParam {
            name: self.pos_name(),
            shape: vec![self.n_tokens, self.c],
            init: Init::Zeros,
            trainable: true,
        });
        self.ln1.declare(out);
        self.q.declare(out);
        self.k.declare(out);
        self.v.declare(out);
        self.o.declare(out);
        self.ln2.declare(out);
        self.fc1.declare(out);
        self.fc2.declare(out);
    }

    /// Token-level forward on `[N, n, C]`; exposed so tests can drive the
    /// block without the spatial reshape.
    pub fn forward_tokens<T: Scalar>(&self, fwd: &mut Forward<T>, tokens: NodeId) -> Result<NodeId> {
        let shape = fwd.tape.value(tokens).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.n_tokens || shape[2] != self.c {
            return Err(Error::Shape(format!(
                "transformer tokens must be [N,{},{}], got {shape:?}",
                self.n_tokens, self.c
            )));
        }
        let (nb, n, c) = (shape[0], shape[1], shape[2]);
        let dh = c / self.heads;

        let pos = fwd.param_node(&self.pos_name())?;
        let t = fwd.tape.add_broadcast(tokens, pos)?;

        // pre-norm multi-head self-attention with residual add
        let a = self.ln1.forward(fwd, t)?;
        let q = self.q.forward(fwd, a)?;
        let k = self.k.forward(fwd, a)?;
        let v = self.v.forward(fwd, a)?;
        let split = |fwd: &mut Forward<T>, x: NodeId| -> Result<NodeId> {
            let r = fwd.tape.reshape(x, vec![nb, n, self.heads, dh])?;
            fwd.tape.swap_axes(r, 1, 2) // [N, heads, n, dh]
        };
        let qh = split(fwd, q)?;
        let kh = split(fwd, k)?;
        let vh = split(fwd, v)?;
        let kt = fwd.tape.swap_axes(kh, 2, 3)?; // [N, heads, dh, n]
        let scores = fwd.tape.matmul(qh, kt)?; // [N, heads, n, n]
        let scaled = fwd.tape.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0)?;
        let weights = fwd.tape.softmax(scaled, 3)?;
        let ctx = fwd.tape.matmul(weights, vh)?; // [N, heads, n, dh]
        let merged = fwd.tape.swap_axes(ctx, 1, 2)?;
        let merged = fwd.tape.reshape(merged, vec![nb, n, c])?;
        let attn_out = self.o.forward(fwd, merged)?;
        let t = fwd.tape.add(t, attn_out)?;

        // pre-norm feed-forward with residual add
        let f = self.ln2.forward(fwd, t)?;
        let f = self.fc1.forward(fwd, f)?;
        let f = fwd.tape.gelu(f)?;
        let f = self.fc2.forward(fwd, f)?;
        fwd.tape.add(t, f)
    }

    /// Spatial forward on `[N, C, h, w]` with `h*w == n_tokens`.
    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let shape = fwd.tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.c {
            return Err(Error::Shape(format!(
                "transformer input must be [N,{},h,w], got {shape:?}",
                self.c
            )));
        }
        let (nb, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h * w != self.n_tokens {
            return Err(Error::Config(format!(
                "transformer geometry expects {} tokens, feature map is {h}x{w}",
                self.n_tokens
            )));
        }
        let flat = fwd.tape.reshape(x, vec![nb, c, h * w])?;
        let tokens = fwd.tape.swap_axes(flat, 1, 2)?; // [N, n, C]
        let out = self.forward_tokens(fwd, tokens)?;
        let back = fwd.tape.swap_axes(out, 1, 2)?;
        fwd.tape.reshape(back, vec![nb, c, h, w])
    }
}

/// Four parallel 3x3 convolutions at dilation rates 1, 3, 6 and 9 (padding
/// equal to dilation preserves the spatial size), each followed by BN+ReLU;
/// the concatenated branches are reduced back to the input channel count by
/// a 1x1 convolution.
pub struct DilatedPlan {
    branches: Vec<(ConvPlan, BnPlan)>,
    reduce_conv: ConvPlan,
    reduce_bn: BnPlan,
    pub c: usize,
}

impl DilatedPlan {
    /// Builds a free-standing block (used by block-scope tests and checks).
    pub fn standalone(prefix: &str, c: usize) -> Self {
        Self::new(prefix, c)
    }

    pub(crate) fn new(prefix: &str, c: usize) -> Self {
        let branches = [1usize, 3, 6, 9]
            .iter()
            .map(|&d| {
                (
                    ConvPlan::new(format!("{prefix}.branch{d}.conv"), c, c, 3, 1, d, d, false),
                    BnPlan::new(format!("{prefix}.branch{d}.bn"), c),
                )
            })
            .collect();
        DilatedPlan {
            branches,
            reduce_conv: ConvPlan::new(format!("{prefix}.reduce.conv"), 4 * c, c, 1, 1, 0, 1, false),
            reduce_bn: BnPlan::new(format!("{prefix}.reduce.bn"), c),
            c,
        }
    }

    pub fn declare(&self, out: &mut Vec<DeclaredParam>) {
        for (conv, bn) in &self.branches {
            conv.declare(out);
            bn.declare(out);
        }
        self.reduce_conv.declare(out);
        self.reduce_bn.declare(out);
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for (conv, bn) in &self.branches {
            let y = conv.forward(fwd, x)?;
            let y = bn.forward(fwd, y)?;
            outs.push(fwd.tape.relu(y)?);
        }
        let cat = fwd.tape.concat_channels(&outs)?;
        let y = self.reduce_conv.forward(fwd, cat)?;
        let y = self.reduce_bn.forward(fwd, y)?;
        fwd.tape.relu(y)
    }
}
