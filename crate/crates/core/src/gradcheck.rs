//! Finite-difference gradient checking.
//!
//! Central differences against the tape's backward pass, always in 64-bit
//! mode so the comparison tolerances mean something. The named suites back
//! the `gradcheck` CLI command: `primitive_suite` covers every
//! differentiable tape op, `block_suite` the model building blocks, and
//! `model_suite` the full tiny model end to end.

use crate::error::{Error, Result};
use crate::kernels::{ConvSpec, PoolSpec};
use crate::rng::SeededRng;
use crate::tape::{Mode, NodeId, Tape};
use crate::tensor::Tensor;

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const BLOCK_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-5;

/// Relative disagreement `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1e-8)
}

/// Max relative disagreement between two gradient vectors.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Checks the backward gradient of a scalar-valued program w.r.t. `point`.
///
/// `build` assembles the graph from the registered input node to a scalar
/// loss node; it runs once for the analytic gradient and twice per
/// coordinate for central differences `(f(x+h e) - f(x-h e)) / 2h`. Returns
/// the max over coordinates of the relative error. Non-finite losses at any
/// probe point are reported as a failure.
pub fn finite_diff_check<F>(build: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite_diff_check wants h > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let loss = build(&mut tape, x)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Shape(format!(
            "finite_diff_check wants a scalar program, got {:?}",
            tape.value(loss).shape()
        )));
    }
    if !tape.value(loss).all_finite() {
        return Err(Error::Numerical("non-finite loss at the base point".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(&tape, x);

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(probe.clone());
        let loss = build(&mut tape, x)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite loss at a probe point".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let f_plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let f_minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// One named check: passes when `max_rel_err < tolerance`.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn random_tensor(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_in(lo, hi))
}

/// Random values nudged away from zero so relu/maxpool kinks and ties stay
/// out of the probe range.
fn random_nudged(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        sign * rng.uniform_in(0.1, 1.0)
    })
}

/// Contracts a tensor against a fixed random direction so that every output
/// element influences the scalar loss with a distinct weight.
fn project(tape: &mut Tape<f64>, y: NodeId, dir: &Tensor<f64>) -> Result<NodeId> {
    let d = tape.leaf(dir.clone());
    let prod = tape.mul(y, d)?;
    tape.sum_all(prod)
}

/// Gradient checks for every differentiable primitive, h = 1e-5 (1e-4 for
/// the conv chain), inputs nudged away from non-smooth points.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = SeededRng::new(seed);
    let mut results = Vec::new();
    let mut push = |name: &str, err: f64| {
        results.push(CheckResult {
            name: name.into(),
            max_rel_err: err,
            tolerance: PRIMITIVE_TOL,
        });
    };

    // conv2d: dilated 3x3, checked w.r.t. input, weight and bias
    {
        let spec = ConvSpec::same3x3(2);
        let x0 = random_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let w0 = random_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b0 = random_tensor(&mut rng, &[3], -0.5, 0.5);
        let dir = random_tensor(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);

        let (w_c, b_c, d_c) = (w0.clone(), b0.clone(), dir.clone());
        let err = finite_diff_check(
            move |tape, x| {
                let w = tape.leaf(w_c.clone());
                let b = tape.leaf(b_c.clone());
                let y = tape.conv2d(x, w, Some(b), &spec)?;
                project(tape, y, &d_c)
            },
            &x0,
            1e-5,
        )?;
        push("conv2d/input", err);

        let (x_c, b_c, d_c) = (x0.clone(), b0.clone(), dir.clone());
        let err = finite_diff_check(
            move |tape, w| {
                let x = tape.leaf(x_c.clone());
                let b = tape.leaf(b_c.clone());
                let y = tape.conv2d(x, w, Some(b), &spec)?;
                project(tape, y, &d_c)
            },
            &w0,
            1e-5,
        )?;
        push("conv2d/weight", err);

        let (x_c, w_c, d_c) = (x0.clone(), w0.clone(), dir.clone());
        let err = finite_diff_check(
            move |tape, b| {
                let x = tape.leaf(x_c.clone());
                let w = tape.leaf(w_c.clone());
                let y = tape.conv2d(x, w, Some(b), &spec)?;
                project(tape, y, &d_c)
            },
            &b0,
            1e-5,
        )?;
        push("conv2d/bias", err);
    }

    // conv2d + relu chain (inputs nudged away from the relu kink)
    {
        let spec = ConvSpec::same3x3(1);
        let x0 = random_nudged(&mut rng, &[1, 2, 5, 5]);
        let w0 = random_tensor(&mut rng, &[2, 2, 3, 3], -0.5, 0.5);
        let dir = random_tensor(&mut rng, &[1, 2, 5, 5], 0.5, 1.5);
        let (w_c, d_c) = (w0.clone(), dir.clone());
        let err = finite_diff_check(
            move |tape, x| {
                let w = tape.leaf(w_c.clone());
                let y = tape.conv2d(x, w, None, &spec)?;
                let r = tape.relu(y)?;
                project(tape, r, &d_c)
            },
            &x0,
            1e-4,
        )?;
        push("conv2d+relu/input", err);
    }

    // batchnorm (train mode) w.r.t. input, gamma, beta
    {
        let x0 = random_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let g0 = random_tensor(&mut rng, &[3], 0.5, 1.5);
        let b0 = random_tensor(&mut rng, &[3], -0.5, 0.5);
        let dir = random_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);

        for (name, which) in [("input", 0), ("gamma", 1), ("beta", 2)] {
            let (x_c, g_c, b_c, d_c) = (x0.clone(), g0.clone(), b0.clone(), dir.clone());
            let point = [&x0, &g0, &b0][which].clone();
            let err = finite_diff_check(
                move |tape, p| {
                    let x = if which == 0 { p } else { tape.leaf(x_c.clone()) };
                    let g = if which == 1 { p } else { tape.leaf(g_c.clone()) };
                    let b = if which == 2 { p } else { tape.leaf(b_c.clone()) };
                    let mut stats = crate::tape::BnStats::identity(3);
                    let y = tape.batchnorm2d(
                        x,
                        g,
                        b,
                        &mut stats,
                        Mode::Train,
                        crate::tape::BN_EPS,
                        crate::tape::BN_MOMENTUM,
                    )?;
                    project(tape, y, &d_c)
                },
                &point,
                1e-5,
            )?;
            push(&format!("batchnorm2d/{name}"), err);
        }
    }

    // elementwise activations
    {
        let x0 = random_nudged(&mut rng, &[2, 7]);
        let dir = random_tensor(&mut rng, &[2, 7], -1.0, 1.0);
        for (name, kind) in [
            ("relu", crate::tape::Activation::Relu),
            ("sigmoid", crate::tape::Activation::Sigmoid),
            ("gelu", crate::tape::Activation::Gelu),
        ] {
            let d_c = dir.clone();
            let err = finite_diff_check(
                move |tape, x| {
                    let y = tape.activation(x, kind)?;
                    project(tape, y, &d_c)
                },
                &x0,
                1e-5,
            )?;
            push(name, err);
        }
    }

    // maxpool: continuous random values make in-window ties improbable
    {
        let x0 = random_tensor(&mut rng, &[1, 1, 6, 6], -1.0, 1.0);
        let dir = random_tensor(&mut rng, &[1, 1, 3, 3], 0.5, 1.5);
        let d_c = dir.clone();
        let err = finite_diff_check(
            move |tape, x| {
                let y = tape.maxpool2d(x, &PoolSpec::new(3, 2, 1))?;
                project(tape, y, &d_c)
            },
            &x0,
            1e-5,
        )?;
        push("maxpool2d", err);
    }

    // bilinear upsampling
    {
        let x0 = random_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let dir = random_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let d_c = dir.clone();
        let err = finite_diff_check(
            move |tape, x| {
                let y = tape.upsample2x(x)?;
                project(tape, y, &d_c)
            },
            &x0,
            1e-5,
        )?;
        push("bilinear_upsample2x", err);
    }

    // matmul with a broadcast right operand, both sides
    {
        let a0 = random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let b0 = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let dir = random_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);

        let (b_c, d_c) = (b0.clone(), dir.clone());
        let err = finite_diff_check(
            move |tape, a| {
                let b = tape.leaf(b_c.clone());
                let y = tape.matmul(a, b)?;
                project(tape, y, &d_c)
            },
            &a0,
            1e-5,
        )?;
        push("matmul/lhs", err);

        let (a_c, d_c) = (a0.clone(), dir.clone());
        let err = finite_diff_check(
            move |tape, b| {
                let a = tape.leaf(a_c.clone());
                let y = tape.matmul(a, b)?;
                project(tape, y, &d_c)
            },
            &b0,
            1e-5,
        )?;
        push("matmul/rhs-broadcast", err);
    }

    // softmax over a middle axis
    {
        let x0 = random_tensor(&mut rng, &[3, 5], -2.0, 2.0);
        let dir = random_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        let d_c = dir.clone();
        let err = finite_diff_check(
            move |tape, x| {
                let y = tape.softmax(x, 1)?;
                project(tape, y, &d_c)
            },
            &x0,
            1e-5,
        )?;
        push("softmax", err);
    }

    // layernorm w.r.t. input, gamma, beta
    {
        let x0 = random_tensor(&mut rng, &[3, 6], -1.0, 1.0);
        let g0 = random_tensor(&mut rng, &[6], 0.5, 1.5);
        let b0 = random_tensor(&mut rng, &[6], -0.5, 0.5);
        let dir = random_tensor(&mut rng, &[3, 6], -1.0, 1.0);
        for (name, which) in [("input", 0), ("gamma", 1), ("beta", 2)] {
            let (x_c, g_c, b_c, d_c) = (x0.clone(), g0.clone(), b0.clone(), dir.clone());
            let point = [&x0, &g0, &b0][which].clone();
            let err = finite_diff_check(
                move |tape, p| {
                    let x = if which == 0 { p } else { tape.leaf(x_c.clone()) };
                    let g = if which == 1 { p } else { tape.leaf(g_c.clone()) };
                    let b = if which == 2 { p } else { tape.leaf(b_c.clone()) };
                    let y = tape.layernorm(x, g, b, 1e-5)?;
                    project(tape, y, &d_c)
                },
                &point,
                1e-5,
            )?;
            push(&format!("layernorm/{name}"), err);
        }
    }

    // concat + slice-back path
    {
        let x0 = random_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let other = random_tensor(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
        let dir = random_tensor(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
        let (o_c, d_c) = (other.clone(), dir.clone());
        let err = finite_diff_check(
            move |tape, x| {
                let o = tape.leaf(o_c.clone());
                let y = tape.concat_channels(&[x, o])?;
                project(tape, y, &d_c)
            },
            &x0,
            1e-5,
        )?;
        push("concat_channels", err);
    }

    // the clamped-log path used by the BCE loss (points away from clamp edges)
    {
        let x0 = random_tensor(&mut rng, &[8], 0.1, 0.9);
        let dir = random_tensor(&mut rng, &[8], 0.5, 1.5);
        let d_c = dir.clone();
        let err = finite_diff_check(
            move |tape, x| {
                let c = tape.clamp(x, 1e-7, 1.0 - 1e-7)?;
                let l = tape.ln(c)?;
                project(tape, l, &d_c)
            },
            &x0,
            1e-5,
        )?;
        push("clamp+ln", err);
    }

    // remaining scalar plumbing: affine, mul, div, mean
    {
        let x0 = random_tensor(&mut rng, &[6], 0.5, 1.5);
        let other = random_tensor(&mut rng, &[6], 0.5, 1.5);
        let o_c = other.clone();
        let err = finite_diff_check(
            move |tape, x| {
                let o = tape.leaf(o_c.clone());
                let a = tape.affine(x, 1.75, -0.25)?;
                let m = tape.mul(a, o)?;
                let d = tape.div(m, o)?;
                tape.mean_all(d)
            },
            &x0,
            1e-5,
        )?;
        push("affine+mul+div+mean", err);
    }

    Ok(results)
}

/// Gradient checks through each model building block, h = 1e-5, checked
/// w.r.t. the block input (which exercises every backward rule inside).
pub fn block_suite(seed: u64) -> Result<Vec<CheckResult>> {
    use crate::blocks::{
        self, BottleneckPlan, DecoderPlan, DilatedPlan, Forward, ResidualBlockPlan,
        TransformerPlan,
    };
    use crate::tape::Mode;

    let mut rng = SeededRng::new(seed);
    let mut results = Vec::new();

    // decoder-style residual block with a projection shortcut
    {
        let block = ResidualBlockPlan::standalone("res", 3, 5);
        let mut decls = Vec::new();
        block.declare(&mut decls);
        let store = blocks::init_store::<f64>(&decls, seed ^ 1)?;
        let x0 = random_nudged(&mut rng, &[1, 3, 5, 5]);
        let dir = random_tensor(&mut rng, &[1, 5, 5, 5], -1.0, 1.0);
        let err = finite_diff_check(
            move |tape, x| {
                let mut local = store.clone();
                let mut fwd = Forward::new(tape, &mut local, Mode::Train);
                let y = block.forward(&mut fwd, x)?;
                drop(fwd);
                project(tape, y, &dir)
            },
            &x0,
            1e-5,
        )?;
        results.push(CheckResult {
            name: "residual_block".into(),
            max_rel_err: err,
            tolerance: BLOCK_TOL,
        });
    }

    // encoder bottleneck block with stride 2
    {
        let block = BottleneckPlan::standalone("bneck", 4, 2, 8, 2);
        let mut decls = Vec::new();
        block.declare(&mut decls);
        let store = blocks::init_store::<f64>(&decls, seed ^ 2)?;
        let x0 = random_tensor(&mut rng, &[1, 4, 6, 6], -1.0, 1.0);
        let dir = random_tensor(&mut rng, &[1, 8, 3, 3], -1.0, 1.0);
        let err = finite_diff_check(
            move |tape, x| {
                let mut local = store.clone();
                let mut fwd = Forward::new(tape, &mut local, Mode::Train);
                let y = block.forward(&mut fwd, x)?;
                drop(fwd);
                project(tape, y, &dir)
            },
            &x0,
            1e-5,
        )?;
        results.push(CheckResult {
            name: "encoder_bottleneck_block".into(),
            max_rel_err: err,
            tolerance: BLOCK_TOL,
        });
    }

    // transformer encoder block on tokens
    {
        let block = TransformerPlan::standalone("tr", 8, 4, 2, 4);
        let mut decls = Vec::new();
        block.declare(&mut decls);
        let store = blocks::init_store::<f64>(&decls, seed ^ 3)?;
        let x0 = random_tensor(&mut rng, &[1, 4, 8], -1.0, 1.0);
        let dir = random_tensor(&mut rng, &[1, 4, 8], -1.0, 1.0);
        let err = finite_diff_check(
            move |tape, x| {
                let mut local = store.clone();
                let mut fwd = Forward::new(tape, &mut local, Mode::Train);
                let y = block.forward_tokens(&mut fwd, x)?;
                drop(fwd);
                project(tape, y, &dir)
            },
            &x0,
            1e-5,
        )?;
        results.push(CheckResult {
            name: "transformer_encoder_block".into(),
            max_rel_err: err,
            tolerance: BLOCK_TOL,
        });
    }

    // dilated convolution block
    {
        let block = DilatedPlan::standalone("dil", 4);
        let mut decls = Vec::new();
        block.declare(&mut decls);
        let store = blocks::init_store::<f64>(&decls, seed ^ 4)?;
        let x0 = random_tensor(&mut rng, &[1, 4, 5, 5], -1.0, 1.0);
        let dir = random_tensor(&mut rng, &[1, 4, 5, 5], -1.0, 1.0);
        let err = finite_diff_check(
            move |tape, x| {
                let mut local = store.clone();
                let mut fwd = Forward::new(tape, &mut local, Mode::Train);
                let y = block.forward(&mut fwd, x)?;
                drop(fwd);
                project(tape, y, &dir)
            },
            &x0,
            1e-5,
        )?;
        results.push(CheckResult {
            name: "dilated_conv_block".into(),
            max_rel_err: err,
            tolerance: BLOCK_TOL,
        });
    }

    // decoder block, both inputs
    {
        let block = DecoderPlan::standalone("dec", 4 + 2, 3);
        let mut decls = Vec::new();
        block.declare(&mut decls);
        let store = blocks::init_store::<f64>(&decls, seed ^ 5)?;
        let x0 = random_tensor(&mut rng, &[1, 4, 3, 3], -1.0, 1.0);
        let skip0 = random_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let dir = random_tensor(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);

        let (store_c, skip_c, dir_c, block_c) = (store.clone(), skip0.clone(), dir.clone(), {
            let mut d = Vec::new();
            block.declare(&mut d);
            block
        });
        let err = finite_diff_check(
            move |tape, x| {
                let mut local = store_c.clone();
                let skip = tape.leaf(skip_c.clone());
                let mut fwd = Forward::new(tape, &mut local, Mode::Train);
                let y = block_c.forward(&mut fwd, x, skip)?;
                drop(fwd);
                project(tape, y, &dir_c)
            },
            &x0,
            1e-5,
        )?;
        results.push(CheckResult {
            name: "decoder_block/x".into(),
            max_rel_err: err,
            tolerance: BLOCK_TOL,
        });

        let block = DecoderPlan::standalone("dec", 4 + 2, 3);
        let err = finite_diff_check(
            move |tape, skip| {
                let mut local = store.clone();
                let x = tape.leaf(x0.clone());
                let mut fwd = Forward::new(tape, &mut local, Mode::Train);
                let y = block.forward(&mut fwd, x, skip)?;
                drop(fwd);
                project(tape, y, &dir)
            },
            &skip0,
            1e-5,
        )?;
        results.push(CheckResult {
            name: "decoder_block/skip".into(),
            max_rel_err: err,
            tolerance: BLOCK_TOL,
        });
    }

    // segmentation head: 1x1 conv to one channel + sigmoid
    {
        let w0 = random_tensor(&mut rng, &[1, 6, 1, 1], -0.5, 0.5);
        let x_fix = random_tensor(&mut rng, &[1, 6, 4, 4], -1.0, 1.0);
        let dir = random_tensor(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
        let err = finite_diff_check(
            move |tape, w| {
                let x = tape.leaf(x_fix.clone());
                let b = tape.leaf(Tensor::zeros(vec![1]));
                let y = tape.conv2d(x, w, Some(b), &ConvSpec::point(1))?;
                let s = tape.sigmoid(y)?;
                project(tape, s, &dir)
            },
            &w0,
            1e-5,
        )?;
        results.push(CheckResult {
            name: "segmentation_head".into(),
            max_rel_err: err,
            tolerance: BLOCK_TOL,
        });
    }

    Ok(results)
}

/// Whole-model gradient check on the micro configuration: the training
/// loss against central differences on random parameter coordinates.
///
/// Coordinates are sampled among those whose analytic gradient magnitude
/// exceeds 1e-5; below that, central differences are dominated by f64
/// rounding of the loss itself and the comparison carries no information.
/// Each coordinate tries a cascade of step sizes: a probe that crosses a
/// relu/maxpool kink inflates one step size but recovers at a smaller one,
/// while a genuinely wrong backward rule stays wrong at every h.
pub fn model_suite(seed: u64) -> Result<Vec<CheckResult>> {
    use crate::blocks::{Forward, ModelPlan};
    use crate::config::ModelConfig;
    use crate::tape::Mode;
    use crate::train::bce_dice_loss;

    const COORDS: usize = 20;
    const H_CASCADE: [f64; 5] = [1e-4, 1e-5, 1e-6, 1e-7, 1e-8];

    let cfg = ModelConfig::micro();
    let plan = ModelPlan::new(&cfg)?;
    let store = plan.init_params::<f64>(seed)?;
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    let s = cfg.input_size;
    let image = Tensor::<f64>::from_fn(vec![2, 3, s, s], |_| rng.uniform());
    let mask = Tensor::<f64>::from_fn(vec![2, 1, s, s], |_| {
        if rng.uniform() < 0.4 {
            1.0
        } else {
            0.0
        }
    });

    let loss_of = |store: &crate::params::ParameterStore<f64>| -> Result<f64> {
        let mut local = store.clone();
        let mut tape = Tape::new();
        let img = tape.leaf(image.clone());
        let mut fwd = Forward::new(&mut tape, &mut local, Mode::Train);
        let out = plan.forward(&mut fwd, img)?;
        drop(fwd);
        let target = tape.leaf(mask.clone());
        let loss = bce_dice_loss(&mut tape, out, target)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite model loss".into()));
        }
        Ok(v)
    };

    // analytic gradients for every parameter
    let mut local = store.clone();
    let mut tape = Tape::new();
    let img = tape.leaf(image.clone());
    let mut fwd = Forward::new(&mut tape, &mut local, Mode::Train);
    let out = plan.forward(&mut fwd, img)?;
    let registered = fwd.registered_params().to_vec();
    drop(fwd);
    let target = tape.leaf(mask.clone());
    let loss = bce_dice_loss(&mut tape, out, target)?;
    let grads = tape.backward(loss)?;

    // flat list of checkable coordinates
    let mut candidates: Vec<(String, usize, f64)> = Vec::new();
    for (name, id) in &registered {
        let g = grads.get_or_zeros(&tape, *id);
        for (i, &gv) in g.data().iter().enumerate() {
            if gv.abs() > 1e-5 {
                candidates.push((name.clone(), i, gv));
            }
        }
    }
    if candidates.len() < COORDS {
        return Err(Error::Numerical(format!(
            "only {} parameter coordinates carry a resolvable gradient",
            candidates.len()
        )));
    }
    let mut pick = SeededRng::new(seed ^ 0xC0);
    let mut chosen = Vec::with_capacity(COORDS);
    let mut used = std::collections::HashSet::new();
    while chosen.len() < COORDS {
        let i = pick.below(candidates.len());
        if used.insert(i) {
            chosen.push(candidates[i].clone());
        }
    }

    let mut worst = 0.0f64;
    for (name, idx, analytic) in chosen {
        let mut best = f64::INFINITY;
        for &h in &H_CASCADE {
            let mut plus = store.clone();
            let mut t = plus.tensor(&name)?.clone();
            t.data_mut()[idx] += h;
            plus.set_tensor(&name, t)?;
            let f_plus = loss_of(&plus)?;

            let mut minus = store.clone();
            let mut t = minus.tensor(&name)?.clone();
            t.data_mut()[idx] -= h;
            minus.set_tensor(&name, t)?;
            let f_minus = loss_of(&minus)?;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            best = best.min(rel_err(analytic, numeric));
            if best < MODEL_TOL {
                break;
            }
        }
        worst = worst.max(best);
    }

    Ok(vec![CheckResult {
        name: format!("model/micro ({COORDS} coordinates)"),
        max_rel_err: worst,
        tolerance: MODEL_TOL,
    }])
}

/// Scope selector for the gradient-check command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitive,
    Block,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitive" => Ok(Scope::Primitive),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!(
                "unknown gradcheck scope '{s}' (primitive|block|model)"
            ))),
        }
    }
}

pub fn run_scope(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    match scope {
        Scope::Primitive => primitive_suite(seed),
        Scope::Block => block_suite(seed),
        Scope::Model => model_suite(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_tight() {
        let mut rng = SeededRng::new(1);
        let x0 = random_tensor(&mut rng, &[5], -2.0, 2.0);
        let err = finite_diff_check(
            |tape, x| {
                let y = tape.mul(x, x)?;
                tape.sum_all(y)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "sum of squares err {err}");
    }

    #[test]
    fn constant_program_reports_zero_error() {
        let x0 = Tensor::<f64>::full(vec![3], 0.7);
        let err = finite_diff_check(
            |tape, x| {
                let z = tape.affine(x, 0.0, 4.0)?;
                tape.sum_all(z)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sigmoid_of_linear_map_matches_finite_differences() {
        let mut rng = SeededRng::new(2);
        let w = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let x0 = random_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        let w_c = w.clone();
        let err = finite_diff_check(
            move |tape, x| {
                let w = tape.leaf(w_c.clone());
                let y = tape.matmul(w, x)?;
                let s = tape.sigmoid(y)?;
                tape.sum_all(s)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "sigmoid(Wx) err {err}");
    }

    #[test]
    fn primitive_suite_is_green_and_covers_enough_ops() {
        let results = primitive_suite(1234).unwrap();
        assert!(results.len() >= 8, "only {} checks", results.len());
        for r in &results {
            assert!(r.passed(), "{} failed: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn block_suite_is_green() {
        for r in block_suite(77).unwrap() {
            assert!(r.passed(), "{} failed: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn model_suite_is_green() {
        for r in model_suite(99).unwrap() {
            assert!(r.passed(), "{} failed: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn doubled_backward_rule_is_caught() {
        // mutation test: a wrong-by-2x analytic gradient must trip the checker
        let mut rng = SeededRng::new(3);
        let x0 = random_tensor(&mut rng, &[4], -1.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<f64> = grads.get(x).unwrap().data().to_vec();
        let doubled: Vec<f64> = analytic.iter().map(|v| v * 2.0).collect();

        let numeric: Vec<f64> = (0..x0.len())
            .map(|i| {
                let mut probe = x0.clone();
                let f = |t: &Tensor<f64>| {
                    let mut tape = Tape::new();
                    let x = tape.leaf(t.clone());
                    let y = tape.mul(x, x).unwrap();
                    let loss = tape.sum_all(y).unwrap();
                    tape.value(loss).item()
                };
                let orig = probe.data()[i];
                probe.data_mut()[i] = orig + 1e-5;
                let fp = f(&probe);
                probe.data_mut()[i] = orig - 1e-5;
                let fm = f(&probe);
                (fp - fm) / 2e-5
            })
            .collect();

        assert!(max_rel_err(&analytic, &numeric) < PRIMITIVE_TOL);
        assert!(max_rel_err(&doubled, &numeric) > PRIMITIVE_TOL * 100.0);
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let x0 = Tensor::<f64>::full(vec![2], 1e-9);
        // ln crosses zero inside the probe band -> rejected, not NaN
        let res = finite_diff_check(|tape, x| tape.ln(x).and_then(|l| tape.sum_all(l)), &x0, 1e-5);
        assert!(res.is_err());
    }
}
