//! Block and full-model structure tests: parameter counts against the
//! frozen shape-walk values, end-to-end shapes, ablation structure, and the
//! block-level identities.

use std::collections::HashSet;

use trun_core::blocks::{self, DilatedPlan, Forward, ModelPlan, ResidualBlockPlan, TransformerPlan};
use trun_core::config::ModelConfig;
use trun_core::rng::SeededRng;
use trun_core::tape::{Mode, Tape};
use trun_core::tensor::Tensor;

fn random_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_in(-1.0, 1.0))
}

fn cfg_with(base: ModelConfig, tr: bool, dil: bool) -> ModelConfig {
    let mut cfg = base;
    cfg.use_transformer = tr;
    cfg.use_dilated = dil;
    cfg
}

// ---- parameter counts (frozen from an independent shape-walk script) ------

#[test]
fn micro_param_counts_match_shape_walk() {
    // micro: width 1/128, S=32, depths [1,1,1,1]
    let micro = ModelConfig::micro();
    assert_eq!(blocks::param_count(&micro).unwrap(), 4635);
    assert_eq!(
        blocks::param_count(&cfg_with(micro.clone(), false, true)).unwrap(),
        3571
    );
    assert_eq!(
        blocks::param_count(&cfg_with(micro, false, false)).unwrap(),
        931
    );
}

#[test]
fn tiny_param_counts_match_shape_walk() {
    // tiny: width 1/8, S=64, depths [1,1,1,1]
    let tiny = ModelConfig::tiny();
    assert_eq!(blocks::param_count(&tiny).unwrap(), 1_042_189);
    assert_eq!(
        blocks::param_count(&cfg_with(tiny.clone(), false, true)).unwrap(),
        800_909
    );
    assert_eq!(
        blocks::param_count(&cfg_with(tiny, false, false)).unwrap(),
        144_269
    );
}

#[test]
fn micro_model_stays_under_gradcheck_budget() {
    assert!(blocks::param_count(&ModelConfig::micro()).unwrap() <= 5000);
}

#[test]
fn param_count_matches_initialized_store() {
    let plan = ModelPlan::new(&ModelConfig::micro()).unwrap();
    let store = plan.init_params::<f32>(7).unwrap();
    assert_eq!(store.trainable_scalars(), plan.param_count());
}

#[test]
fn ablation_monotonicity_and_width_scaling() {
    let tiny = ModelConfig::tiny();
    let full = blocks::param_count(&tiny).unwrap();
    let no_tr = blocks::param_count(&cfg_with(tiny.clone(), false, true)).unwrap();
    let neither = blocks::param_count(&cfg_with(tiny.clone(), false, false)).unwrap();
    assert!(full > no_tr && no_tr > neither);

    // doubling the width more than doubles the count (conv weights are O(C^2))
    let mut doubled = tiny.clone();
    doubled.width_mult *= 2.0;
    let count2 = blocks::param_count(&doubled).unwrap();
    assert!(count2 > 2 * full, "{count2} vs 2*{full}");
}

#[test]
fn residual_block_with_zero_convs_is_relu_of_identity() {
    // zero conv weights leave both BNs normalizing all-zero maps, so the
    // main branch contributes nothing and the block reduces to ReLU(x)
    let block = ResidualBlockPlan::standalone("res", 4, 4);
    let mut decls = Vec::new();
    block.declare(&mut decls);
    let mut store = blocks::init_store::<f64>(&decls, 1).unwrap();
    zero_out(&mut store, |n| n.ends_with(".weight"));

    let mut rng = SeededRng::new(2);
    let x = random_tensor(&mut rng, &[2, 4, 3, 3]);
    let mut tape = Tape::new();
    let x_id = tape.leaf(x.clone());
    let mut fwd = Forward::new(&mut tape, &mut store, Mode::Train);
    let y = block.forward(&mut fwd, x_id).unwrap();
    drop(fwd);
    for (&got, &xin) in tape.value(y).data().iter().zip(x.data()) {
        assert_eq!(got, xin.max(0.0));
    }
}

#[test]
fn head_bias_drives_outputs_toward_one() {
    // with zero weights the head emits sigmoid(bias) everywhere; pushing
    // the bias up moves the whole map monotonically toward 1
    let cfg = ModelConfig::micro();
    let plan = ModelPlan::new(&cfg).unwrap();
    let mut rng = SeededRng::new(15);
    let img = random_tensor(&mut rng, &[1, 3, 32, 32]).map(f64::abs);
    let mut prev = 0.0;
    for bias in [0.0, 2.0, 20.0] {
        let mut store = plan.init_params::<f64>(13).unwrap();
        zero_out(&mut store, |n| n == "head.conv.weight");
        store
            .set_tensor("head.conv.bias", Tensor::full(vec![1], bias))
            .unwrap();
        let (tape, out) = blocks::run_model(&plan, &mut store, &img, Mode::Train).unwrap();
        let v = tape.value(out).data()[0];
        assert!(tape.value(out).data().iter().all(|&o| o == v));
        assert!(v > prev, "bias {bias}: {v} vs prev {prev}");
        prev = v;
    }
    assert!(prev > 0.999);
}

#[test]
fn residual_block_count_and_identity_shortcut() {
    // 2 * (3*3*8*8) conv weights + 2 * (2*8) BN affines = 1184
    let block = ResidualBlockPlan::standalone("res", 8, 8);
    assert!(block.identity_shortcut());
    let mut decls = Vec::new();
    block.declare(&mut decls);
    let trainable: usize = decls
        .iter()
        .filter(|d| d.trainable)
        .map(|d| d.shape.iter().product::<usize>())
        .sum();
    assert_eq!(trainable, 1184);
    assert!(!decls.iter().any(|d| d.name.contains("shortcut")));

    let projected = ResidualBlockPlan::standalone("res", 8, 16);
    assert!(!projected.identity_shortcut());
}

// ---- ablation structure ----------------------------------------------------

#[test]
fn ablation_name_sets_share_decoder_structure() {
    let tiny = ModelConfig::tiny();
    let names = |cfg: &ModelConfig| -> HashSet<String> {
        ModelPlan::new(cfg)
            .unwrap()
            .param_names()
            .into_iter()
            .collect()
    };
    let full = names(&tiny);
    let no_tr = names(&cfg_with(tiny.clone(), false, true));
    let neither = names(&cfg_with(tiny.clone(), false, false));

    assert!(no_tr.is_subset(&full));
    assert!(neither.is_subset(&no_tr));

    // removing the transformer removes exactly the transformer names
    let diff: HashSet<_> = full.difference(&no_tr).collect();
    assert!(!diff.is_empty());
    assert!(diff.iter().all(|n| n.starts_with("bottleneck.transformer.")));

    // the "neither" row keeps the same decoder and head wiring
    let decoder_names = |set: &HashSet<String>| -> HashSet<String> {
        set.iter()
            .filter(|n| n.starts_with("decoder.") || n.starts_with("head."))
            .cloned()
            .collect()
    };
    assert_eq!(decoder_names(&full), decoder_names(&neither));
    assert!(neither.iter().all(|n| !n.starts_with("bottleneck.")));
}

// ---- shapes ------------------------------------------------------------------

#[test]
fn encoder_and_model_shapes_tiny() {
    let cfg = ModelConfig::tiny(); // S=64, width 1/8
    let plan = ModelPlan::new(&cfg).unwrap();
    let mut store = plan.init_params::<f64>(3).unwrap();
    let mut tape = Tape::new();
    let mut rng = SeededRng::new(5);
    let img = random_tensor(&mut rng, &[2, 3, 64, 64]).map(|v| v.abs());
    let img = tape.leaf(img);
    let mut fwd = Forward::new(&mut tape, &mut store, Mode::Train);
    let (out, taps) = plan.forward_with_taps(&mut fwd, img).unwrap();
    drop(fwd);

    // skips halve stage by stage: S/2, S/4, S/8, bottleneck at S/16
    assert_eq!(tape.value(taps.s1).shape(), &[2, 8, 32, 32]);
    assert_eq!(tape.value(taps.s2).shape(), &[2, 32, 16, 16]);
    assert_eq!(tape.value(taps.s3).shape(), &[2, 64, 8, 8]);
    assert_eq!(tape.value(taps.bottleneck).shape(), &[2, 128, 4, 4]);
    // both branches enabled -> concatenated bottleneck channels
    assert_eq!(tape.value(taps.combined).shape(), &[2, 256, 4, 4]);
    assert_eq!(tape.value(out).shape(), &[2, 1, 64, 64]);
    let data = tape.value(out).data();
    assert!(data.iter().all(|&v| v.is_finite() && v > 0.0 && v < 1.0));
}

#[test]
fn full_width_encoder_reaches_1024_channels() {
    // full width at a reduced input size keeps the test quick; the channel
    // ladder is the same as at 256 where the bottleneck sits at 16x16
    let mut cfg = ModelConfig::full();
    cfg.input_size = 64;
    cfg.stage_depths = [1, 1, 1, 1];
    assert_eq!(cfg.bottleneck_channels(), 1024);
    let plan = ModelPlan::new(&cfg).unwrap();
    let mut store = plan.init_params::<f32>(11).unwrap();
    let mut tape = Tape::new();
    let img = tape.leaf(Tensor::full(vec![1, 3, 64, 64], 0.5));
    let mut fwd = Forward::new(&mut tape, &mut store, Mode::Train);
    let (_, taps) = plan.forward_with_taps(&mut fwd, img).unwrap();
    drop(fwd);
    assert_eq!(tape.value(taps.bottleneck).shape(), &[1, 1024, 4, 4]);
}

#[test]
fn model_rejects_wrong_input_size() {
    let plan = ModelPlan::new(&ModelConfig::micro()).unwrap();
    let mut store = plan.init_params::<f32>(0).unwrap();
    let res = blocks::run_model(&plan, &mut store, &Tensor::zeros(vec![1, 3, 16, 16]), Mode::Eval);
    assert!(res.is_err());
}

// ---- transformer block -------------------------------------------------------

fn zero_out(store: &mut trun_core::ParameterStore<f64>, predicate: impl Fn(&str) -> bool) {
    let names: Vec<String> = store.names().filter(|n| predicate(n)).cloned().collect();
    for name in names {
        let z = Tensor::zeros(store.tensor(&name).unwrap().shape().to_vec());
        store.set_tensor(&name, z).unwrap();
    }
}

#[test]
fn transformer_zero_projections_is_identity() {
    let cfg = ModelConfig::tiny();
    let plan = ModelPlan::new(&cfg).unwrap();
    let mut store = plan.init_params::<f64>(21).unwrap();
    zero_out(&mut store, |n| {
        n.starts_with("bottleneck.transformer.attn.")
            || n.starts_with("bottleneck.transformer.ffn.")
            || n.ends_with("pos_embed")
    });
    let tr = plan.transformer().unwrap();
    let mut tape = Tape::new();
    let mut rng = SeededRng::new(9);
    let x = random_tensor(&mut rng, &[2, 128, 4, 4]);
    let x_id = tape.leaf(x.clone());
    let mut fwd = Forward::new(&mut tape, &mut store, Mode::Train);
    let y = tr.forward(&mut fwd, x_id).unwrap();
    drop(fwd);
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn transformer_uniform_attention_attends_to_token_mean() {
    // Q = K = 0 makes every attention row uniform, so with V = O = identity
    // and the FFN zeroed the block adds exactly the mean of the normalized
    // tokens to each position.
    let c = 8;
    let n = 4;
    let tr = TransformerPlan::standalone("tr", c, n, 2, 4);
    let mut decls = Vec::new();
    tr.declare(&mut decls);
    let mut store = blocks::init_store::<f64>(&decls, 0).unwrap();
    zero_out(&mut store, |nm| {
        nm.contains(".attn.q.") || nm.contains(".attn.k.") || nm.contains(".ffn.")
            || nm.ends_with("pos_embed")
    });
    let eye = Tensor::from_fn(vec![c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    store.set_tensor("tr.attn.v.weight", eye.clone()).unwrap();
    store.set_tensor("tr.attn.o.weight", eye).unwrap();

    let mut rng = SeededRng::new(17);
    let tokens = random_tensor(&mut rng, &[1, n, c]);
    let mut tape = Tape::new();
    let t_id = tape.leaf(tokens.clone());
    let mut fwd = Forward::new(&mut tape, &mut store, Mode::Train);
    let y = tr.forward_tokens(&mut fwd, t_id).unwrap();
    drop(fwd);

    // expected: t + mean_j layernorm(t)_j, layernorm computed independently
    let mut normed = vec![0.0f64; n * c];
    for j in 0..n {
        let row = &tokens.data()[j * c..(j + 1) * c];
        let mean: f64 = row.iter().sum::<f64>() / c as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for p in 0..c {
            normed[j * c + p] = (row[p] - mean) * inv;
        }
    }
    for p in 0..c {
        let token_mean: f64 = (0..n).map(|j| normed[j * c + p]).sum::<f64>() / n as f64;
        for j in 0..n {
            let want = tokens.data()[j * c + p] + token_mean;
            let got = tape.value(y).data()[j * c + p];
            assert!((got - want).abs() < 1e-9, "token {j} dim {p}: {got} vs {want}");
        }
    }
}

#[test]
fn transformer_is_permutation_equivariant() {
    let cfg = ModelConfig::tiny();
    let plan = ModelPlan::new(&cfg).unwrap();
    let tr = plan.transformer().unwrap();
    let n = 16;
    let c = 128;

    let mut rng = SeededRng::new(31);
    let tokens = random_tensor(&mut rng, &[1, n, c]);
    let pos = random_tensor(&mut rng, &[n, c]);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);

    let run = |tokens: &Tensor<f64>, pos: &Tensor<f64>| -> Tensor<f64> {
        let mut store = plan.init_params::<f64>(77).unwrap();
        store.set_tensor(&tr.pos_name(), pos.clone()).unwrap();
        let mut tape = Tape::new();
        let t_id = tape.leaf(tokens.clone());
        let mut fwd = Forward::new(&mut tape, &mut store, Mode::Train);
        let y = tr.forward_tokens(&mut fwd, t_id).unwrap();
        drop(fwd);
        tape.value(y).clone()
    };

    let base = run(&tokens, &pos);

    let permute_rows = |t: &Tensor<f64>, rows: usize| -> Vec<f64> {
        let mut out = vec![0.0; t.len()];
        let stride = t.len() / rows;
        for (dst, &src) in perm.iter().enumerate() {
            out[dst * stride..(dst + 1) * stride]
                .copy_from_slice(&t.data()[src * stride..(src + 1) * stride]);
        }
        out
    };
    let tokens_p = Tensor::new(vec![1, n, c], permute_rows(&tokens, n)).unwrap();
    let pos_p = Tensor::new(vec![n, c], permute_rows(&pos, n)).unwrap();
    let permuted = run(&tokens_p, &pos_p);

    let base_p = permute_rows(&base, n);
    for (a, b) in base_p.iter().zip(permuted.data()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

// ---- dilated block -----------------------------------------------------------

#[test]
fn dilated_block_preserves_spatial_size_and_channels() {
    let c = 8;
    let dil = DilatedPlan::standalone("dil", c);
    let mut decls = Vec::new();
    dil.declare(&mut decls);
    let mut store = blocks::init_store::<f64>(&decls, 3).unwrap();
    let mut rng = SeededRng::new(4);
    for (h, w) in [(1usize, 1usize), (5, 7), (4, 4)] {
        let x = random_tensor(&mut rng, &[1, c, h, w]);
        let mut tape = Tape::new();
        let x_id = tape.leaf(x);
        let mut fwd = Forward::new(&mut tape, &mut store, Mode::Train);
        let y = dil.forward(&mut fwd, x_id).unwrap();
        drop(fwd);
        assert_eq!(tape.value(y).shape(), &[1, c, h, w]);
    }
}

// ---- decoder block -------------------------------------------------------------

#[test]
fn decoder_upsamples_and_routes_gradient_to_both_inputs() {
    let dec = trun_core::blocks::DecoderPlan::standalone("dec", 8 + 4, 4);
    let mut decls = Vec::new();
    dec.declare(&mut decls);
    let mut store = blocks::init_store::<f64>(&decls, 5).unwrap();

    let mut rng = SeededRng::new(6);
    let x = random_tensor(&mut rng, &[1, 8, 8, 8]);
    let skip = random_tensor(&mut rng, &[1, 4, 16, 16]);
    let mut tape = Tape::new();
    let x_id = tape.param(x);
    let skip_id = tape.param(skip);
    let mut fwd = Forward::new(&mut tape, &mut store, Mode::Train);
    let y = dec.forward(&mut fwd, x_id, skip_id).unwrap();
    drop(fwd);
    assert_eq!(tape.value(y).shape(), &[1, 4, 16, 16]);

    let loss = {
        let dir = random_tensor(&mut rng, &[1, 4, 16, 16]);
        let d = tape.leaf(dir);
        let p = tape.mul(y, d).unwrap();
        tape.sum_all(p).unwrap()
    };
    let grads = tape.backward(loss).unwrap();
    let gx = grads.get(x_id).unwrap();
    let gs = grads.get(skip_id).unwrap();
    assert!(gx.data().iter().any(|&v| v != 0.0));
    assert!(gs.data().iter().any(|&v| v != 0.0));

    // spatial mismatch after upsampling is rejected
    let mut tape = Tape::new();
    let x_id = tape.leaf(Tensor::zeros(vec![1, 8, 8, 8]));
    let bad_skip = tape.leaf(Tensor::zeros(vec![1, 4, 15, 15]));
    let mut fwd = Forward::new(&mut tape, &mut store, Mode::Train);
    assert!(dec.forward(&mut fwd, x_id, bad_skip).is_err());
}

// ---- head ------------------------------------------------------------------------

#[test]
fn zeroed_head_outputs_half_everywhere() {
    let cfg = ModelConfig::micro();
    let plan = ModelPlan::new(&cfg).unwrap();
    let mut store = plan.init_params::<f64>(13).unwrap();
    zero_out(&mut store, |n| n.starts_with("head."));
    let mut rng = SeededRng::new(14);
    let img = random_tensor(&mut rng, &[1, 3, 32, 32]).map(f64::abs);
    let (tape, out) = blocks::run_model(&plan, &mut store, &img, Mode::Train).unwrap();
    for &v in tape.value(out).data() {
        assert_eq!(v, 0.5);
    }
}

// ---- gradient reachability ----------------------------------------------------

#[test]
fn every_parameter_gets_a_nonzero_gradient() {
    let cfg = ModelConfig::micro();
    let plan = ModelPlan::new(&cfg).unwrap();
    let mut store = plan.init_params::<f64>(99).unwrap();
    let mut rng = SeededRng::new(100);
    let mut alive: HashSet<String> = HashSet::new();
    let total: Vec<String> = plan.param_names();

    for _batch in 0..3 {
        let img = random_tensor(&mut rng, &[2, 3, 32, 32]).map(f64::abs);
        let dir = random_tensor(&mut rng, &[2, 1, 32, 32]);
        let mut tape = Tape::new();
        let img_id = tape.leaf(img);
        let mut fwd = Forward::new(&mut tape, &mut store, Mode::Train);
        let out = plan.forward(&mut fwd, img_id).unwrap();
        let registered: Vec<(String, trun_core::NodeId)> =
            fwd.registered_params().to_vec();
        drop(fwd);
        let d = tape.leaf(dir);
        let p = tape.mul(out, d).unwrap();
        let loss = tape.sum_all(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, id) in registered {
            if let Some(g) = grads.get(id) {
                if g.data().iter().any(|&v| v != 0.0) {
                    alive.insert(name);
                }
            }
        }
        if alive.len() == total.len() {
            break;
        }
    }
    let dead: Vec<_> = total.iter().filter(|n| !alive.contains(*n)).collect();
    assert!(dead.is_empty(), "dead parameters: {dead:?}");
}
