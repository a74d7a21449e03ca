//! The named building blocks and their assembly into the full model.
//!
//! Every block is a *plan*: a description of its layers and parameter names
//! derived once from [`ModelConfig`]. The same plan drives parameter
//! initialization, parameter counting, and the forward pass, so the three
//! can never drift apart. Parameters live in a [`ParameterStore`]; a
//! [`Forward`] context registers them on the tape on first use.

mod bottleneck;
mod decoder;
mod encoder;

pub use bottleneck::{DilatedPlan, TransformerPlan};
pub use decoder::{DecoderPlan, ResidualBlockPlan};
pub use encoder::{BottleneckPlan, EncoderOut, EncoderPlan};

use std::collections::HashMap;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::params::ParameterStore;
use crate::rng::SeededRng;
use crate::tape::{BnStats, Mode, NodeId, Tape, BN_EPS, BN_MOMENTUM};
use crate::tensor::{Scalar, Tensor};

/// Layer-norm epsilon used across the transformer block.
pub const LN_EPS: f64 = 1e-5;

/// How a declared parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)` (convolutions).
    FanInNormal(usize),
    /// Uniform in `[-bound, bound]` (projection matrices).
    Uniform(f64),
    Zeros,
    Ones,
}

/// One named tensor the model owns: shape, init scheme, and whether the
/// optimizer updates it (running statistics are declared non-trainable).
#[derive(Clone, Debug)]
pub struct DeclaredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

/// Builds a store from declarations with one seeded stream; draws happen in
/// declaration order, in f64, then cast, so 32- and 64-bit stores see the
/// same underlying values.
pub fn init_store<T: Scalar>(decls: &[DeclaredParam], seed: u64) -> Result<ParameterStore<T>> {
    let mut rng = SeededRng::new(seed);
    let mut store = ParameterStore::new();
    for d in decls {
        let value = match d.init {
            Init::FanInNormal(fan_in) => {
                let std = (2.0 / fan_in as f64).sqrt();
                Tensor::from_fn(d.shape.clone(), |_| T::from_f64(rng.normal() * std))
            }
            Init::Uniform(bound) => {
                Tensor::from_fn(d.shape.clone(), |_| T::from_f64(rng.uniform_in(-bound, bound)))
            }
            Init::Zeros => Tensor::zeros(d.shape.clone()),
            Init::Ones => Tensor::ones(d.shape.clone()),
        };
        store.insert(&d.name, value, d.trainable)?;
    }
    Ok(store)
}

/// Per-pass context: the tape being built, the store backing it, and the
/// train/eval mode. Parameters register on the tape once and are cached by
/// name; batchnorm running statistics write back to the store in train mode.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParameterStore<T>,
    pub mode: Mode,
    registered: Vec<(String, NodeId)>,
    index: HashMap<String, NodeId>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParameterStore<T>, mode: Mode) -> Self {
        Forward {
            tape,
            store,
            mode,
            registered: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Tape node for a named trainable parameter (registered once per pass).
    pub fn param_node(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.index.get(name) {
            return Ok(id);
        }
        let value = self.store.tensor(name)?.clone();
        let id = self.tape.param(value);
        self.index.insert(name.to_string(), id);
        self.registered.push((name.to_string(), id));
        Ok(id)
    }

    /// Parameters touched by this pass, in registration order.
    pub fn registered_params(&self) -> &[(String, NodeId)] {
        &self.registered
    }
}

// ---- shared layer plans ------------------------------------------------

/// A convolution layer plan; `bias` is false wherever a batchnorm follows.
#[derive(Clone, Debug)]
pub struct ConvPlan {
    name: String,
    pub cin: usize,
    pub cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    bias: bool,
}

impl ConvPlan {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        ConvPlan {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            pad,
            dilation,
            bias,
        }
    }

    fn spec(&self) -> ConvSpec {
        ConvSpec::new((self.kernel, self.kernel), self.stride, self.pad, self.dilation)
    }

    pub(crate) fn declare(&self, out: &mut Vec<DeclaredParam>) {
        let fan_in = self.cin * self.kernel * self.kernel;
        out.push(DeclaredParam {
            name: format!("{}.weight", self.name),
            shape: vec![self.cout, self.cin, self.kernel, self.kernel],
            init: Init::FanInNormal(fan_in),
            trainable: true,
        });
        if self.bias {
            out.push(DeclaredParam {
                name: format!("{}.bias", self.name),
                shape: vec![self.cout],
                init: Init::Zeros,
                trainable: true,
            });
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let w = fwd.param_node(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(fwd.param_node(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        fwd.tape.conv2d(x, w, b, &self.spec())
    }
}

/// Batchnorm plan: affine pair plus running-statistics buffers.
#[derive(Clone, Debug)]
pub struct BnPlan {
    name: String,
    pub c: usize,
}

impl BnPlan {
    pub(crate) fn new(name: impl Into<String>, c: usize) -> Self {
        BnPlan { name: name.into(), c }
    }

    pub(crate) fn declare(&self, out: &mut Vec<DeclaredParam>) {
        for (suffix, init, trainable) in [
            ("gamma", Init::Ones, true),
            ("beta", Init::Zeros, true),
            ("running_mean", Init::Zeros, false),
            ("running_var", Init::Ones, false),
        ] {
            out.push(DeclaredParam {
                name: format!("{}.{suffix}", self.name),
                shape: vec![self.c],
                init,
                trainable,
            });
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let gamma = fwd.param_node(&format!("{}.gamma", self.name))?;
        let beta = fwd.param_node(&format!("{}.beta", self.name))?;
        let mean_name = format!("{}.running_mean", self.name);
        let var_name = format!("{}.running_var", self.name);
        let mut stats = BnStats {
            mean: fwd.store.tensor(&mean_name)?.clone(),
            var: fwd.store.tensor(&var_name)?.clone(),
            initialized: true,
        };
        let y = fwd
            .tape
            .batchnorm2d(x, gamma, beta, &mut stats, fwd.mode, BN_EPS, BN_MOMENTUM)?;
        if fwd.mode == Mode::Train {
            fwd.store.set_tensor(&mean_name, stats.mean)?;
            fwd.store.set_tensor(&var_name, stats.var)?;
        }
        Ok(y)
    }
}

/// Dense projection `y = x W + b` with `W: [din, dout]`.
#[derive(Clone, Debug)]
pub struct LinearPlan {
    name: String,
    pub din: usize,
    pub dout: usize,
}

impl LinearPlan {
    pub(crate) fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        LinearPlan {
            name: name.into(),
            din,
            dout,
        }
    }

    pub(crate) fn declare(&self, out: &mut Vec<DeclaredParam>) {
        out.push(DeclaredParam {
            name: format!("{}.weight", self.name),
            shape: vec![self.din, self.dout],
            init: Init::Uniform(1.0 / (self.din as f64).sqrt()),
            trainable: true,
        });
        out.push(DeclaredParam {
            name: format!("{}.bias", self.name),
            shape: vec![self.dout],
            init: Init::Zeros,
            trainable: true,
        });
    }

    pub(crate) fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let w = fwd.param_node(&format!("{}.weight", self.name))?;
        let b = fwd.param_node(&format!("{}.bias", self.name))?;
        let y = fwd.tape.matmul(x, w)?;
        fwd.tape.add_broadcast(y, b)
    }
}

/// Layer-norm plan over the last axis.
#[derive(Clone, Debug)]
pub struct LnPlan {
    name: String,
    pub d: usize,
}

impl LnPlan {
    pub(crate) fn new(name: impl Into<String>, d: usize) -> Self {
        LnPlan { name: name.into(), d }
    }

    pub(crate) fn declare(&self, out: &mut Vec<DeclaredParam>) {
        out.push(DeclaredParam {
            name: format!("{}.gamma", self.name),
            shape: vec![self.d],
            init: Init::Ones,
            trainable: true,
        });
        out.push(DeclaredParam {
            name: format!("{}.beta", self.name),
            shape: vec![self.d],
            init: Init::Zeros,
            trainable: true,
        });
    }

    pub(crate) fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let gamma = fwd.param_node(&format!("{}.gamma", self.name))?;
        let beta = fwd.param_node(&format!("{}.beta", self.name))?;
        fwd.tape.layernorm(x, gamma, beta, LN_EPS)
    }
}

// ---- full model ----------------------------------------------------------

/// Intermediate feature maps captured for heatmaps and tests.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    pub s1: NodeId,
    pub s2: NodeId,
    pub s3: NodeId,
    pub bottleneck: NodeId,
    pub combined: NodeId,
    pub decoder: [NodeId; 4],
}

/// The whole network: encoder, optional bottleneck branches, four decoder
/// blocks consuming skips from deepest to the raw input image, and a 1x1
/// sigmoid head at full resolution.
pub struct ModelPlan {
    cfg: ModelConfig,
    encoder: EncoderPlan,
    transformer: Option<TransformerPlan>,
    dilated: Option<DilatedPlan>,
    decoders: Vec<DecoderPlan>,
    head: ConvPlan,
}

impl ModelPlan {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = EncoderPlan::new(cfg);
        let c = cfg.bottleneck_channels();
        let transformer = cfg.use_transformer.then(|| {
            TransformerPlan::new(
                "bottleneck.transformer",
                c,
                cfg.tokens(),
                cfg.heads,
                cfg.ffn_ratio,
            )
        });
        let dilated = cfg
            .use_dilated
            .then(|| DilatedPlan::new("bottleneck.dilated", c));
        let combined = if cfg.use_transformer && cfg.use_dilated {
            2 * c
        } else {
            c
        };
        let skips = [
            cfg.channels(512), // stage2 output
            cfg.channels(256), // stage1 output
            cfg.channels(64),  // stem output
            3,                 // the input image itself
        ];
        let ladder = [
            cfg.channels(256),
            cfg.channels(128),
            cfg.channels(64),
            cfg.channels(32),
        ];
        let mut decoders = Vec::with_capacity(4);
        let mut cin = combined;
        for i in 0..4 {
            decoders.push(DecoderPlan::new(
                format!("decoder.block{}", i + 1),
                cin + skips[i],
                ladder[i],
            ));
            cin = ladder[i];
        }
        let head = ConvPlan::new("head.conv", ladder[3], 1, 1, 1, 0, 1, true);
        Ok(ModelPlan {
            cfg: cfg.clone(),
            encoder,
            transformer,
            dilated,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn transformer(&self) -> Option<&TransformerPlan> {
        self.transformer.as_ref()
    }

    pub fn dilated(&self) -> Option<&DilatedPlan> {
        self.dilated.as_ref()
    }

    /// Every tensor the model owns, in a stable walk order.
    pub fn declared(&self) -> Vec<DeclaredParam> {
        let mut out = Vec::new();
        self.encoder.declare(&mut out);
        if let Some(t) = &self.transformer {
            t.declare(&mut out);
        }
        if let Some(d) = &self.dilated {
            d.declare(&mut out);
        }
        for dec in &self.decoders {
            dec.declare(&mut out);
        }
        self.head.declare(&mut out);
        out
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParameterStore<T>> {
        init_store(&self.declared(), seed)
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.declared()
            .iter()
            .filter(|d| d.trainable)
            .map(|d| d.shape.iter().product::<usize>())
            .sum()
    }

    /// Names of trainable parameters (excludes running statistics).
    pub fn param_names(&self) -> Vec<String> {
        self.declared()
            .iter()
            .filter(|d| d.trainable)
            .map(|d| d.name.clone())
            .collect()
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, image: NodeId) -> Result<NodeId> {
        self.forward_with_taps(fwd, image).map(|(out, _)| out)
    }

    pub fn forward_with_taps<T: Scalar>(
        &self,
        fwd: &mut Forward<T>,
        image: NodeId,
    ) -> Result<(NodeId, Taps)> {
        let shape = fwd.tape.value(image).shape().to_vec();
        let s = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!(
                "model input must be [N,3,{s},{s}], got {shape:?}"
            )));
        }
        let enc = self.encoder.forward(fwd, image)?;
        let mut branches = Vec::new();
        if let Some(t) = &self.transformer {
            branches.push(t.forward(fwd, enc.bottleneck)?);
        }
        if let Some(d) = &self.dilated {
            branches.push(d.forward(fwd, enc.bottleneck)?);
        }
        let combined = match branches.len() {
            0 => enc.bottleneck, // ablation: raw bottleneck pass-through
            1 => branches[0],
            _ => fwd.tape.concat_channels(&branches)?,
        };
        let d1 = self.decoders[0].forward(fwd, combined, enc.s3)?;
        let d2 = self.decoders[1].forward(fwd, d1, enc.s2)?;
        let d3 = self.decoders[2].forward(fwd, d2, enc.s1)?;
        let d4 = self.decoders[3].forward(fwd, d3, image)?;
        let logits = self.head.forward(fwd, d4)?;
        let out = fwd.tape.sigmoid(logits)?;
        Ok((
            out,
            Taps {
                s1: enc.s1,
                s2: enc.s2,
                s3: enc.s3,
                bottleneck: enc.bottleneck,
                combined,
                decoder: [d1, d2, d3, d4],
            },
        ))
    }
}

/// Convenience single-shot forward: fresh tape, one image batch.
pub fn run_model<T: Scalar>(
    plan: &ModelPlan,
    store: &mut ParameterStore<T>,
    image: &Tensor<T>,
    mode: Mode,
) -> Result<(Tape<T>, NodeId)> {
    let mut tape = Tape::new();
    let img = tape.leaf(image.clone());
    let mut fwd = Forward::new(&mut tape, store, mode);
    let out = plan.forward(&mut fwd, img)?;
    drop(fwd);
    Ok((tape, out))
}

/// Trainable-parameter count for a configuration.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(ModelPlan::new(cfg)?.param_count())
}
