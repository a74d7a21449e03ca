//! Oracle equivalence: the fast kernels against the naive reference
//! implementations on randomized shapes and values, >= 100 cases per op,
//! elementwise relative tolerance 1e-5 in 32-bit mode.

use trun_core::kernels::{self, ConvSpec, PoolSpec};
use trun_core::oracles;
use trun_core::rng::SeededRng;
use trun_core::tape::Tape;
use trun_core::tensor::Tensor;

fn close(a: f32, b: f32) -> bool {
    let scale = a.abs().max(b.abs()).max(1.0);
    (a - b).abs() <= 1e-5 * scale
}

fn assert_close_all(a: &[f32], b: &[f32], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        assert!(close(x, y), "{what}[{i}]: {x} vs {y}");
    }
}

fn random_vec(rng: &mut SeededRng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect()
}

#[test]
fn conv2d_matches_naive_loop_oracle() {
    let mut rng = SeededRng::new(0xC0);
    let dilations = [1usize, 3, 6, 9];
    for case in 0..120 {
        let n = 1 + rng.below(2);
        let cin = 1 + rng.below(3);
        let cout = 1 + rng.below(4);
        let k = [1, 3][rng.below(2)];
        let dilation = if k == 1 { 1 } else { dilations[rng.below(4)] };
        let stride = 1 + rng.below(2);
        // keep the dilated kernel span inside the padded input
        let span = dilation * (k - 1) + 1;
        let h = span + rng.below(10);
        let w = span + rng.below(10);
        let pad = rng.below(dilation + 1);
        let spec = ConvSpec::new((k, k), stride, pad, dilation);
        if spec.out_hw(h, w).is_err() {
            continue;
        }
        let x = random_vec(&mut rng, n * cin * h * w);
        let weight = random_vec(&mut rng, cout * cin * k * k);
        let bias = random_vec(&mut rng, cout);
        let (fast, fast_shape) = kernels::conv2d_forward(
            &x,
            [n, cin, h, w],
            &weight,
            [cout, cin, k, k],
            Some(&bias),
            &spec,
        )
        .unwrap();
        let (slow, slow_shape) = oracles::conv2d(
            &x,
            [n, cin, h, w],
            &weight,
            [cout, cin, k, k],
            Some(&bias),
            &spec,
        );
        assert_eq!(fast_shape, slow_shape, "case {case}");
        assert_close_all(&fast, &slow, &format!("conv case {case} spec {spec:?}"));
    }
}

#[test]
fn conv2d_asymmetric_per_side_padding() {
    let mut rng = SeededRng::new(0xA5);
    for case in 0..40 {
        let spec = ConvSpec {
            kernel: (3, 3),
            stride: 1 + rng.below(2),
            pad_h: (rng.below(3), rng.below(3)),
            pad_w: (rng.below(3), rng.below(3)),
            dilation: 1 + rng.below(2),
        };
        let (h, w) = (6 + rng.below(4), 6 + rng.below(4));
        if spec.out_hw(h, w).is_err() {
            continue;
        }
        let x = random_vec(&mut rng, 2 * h * w);
        let wt = random_vec(&mut rng, 2 * 2 * 9);
        let (fast, fs) =
            kernels::conv2d_forward(&x, [1, 2, h, w], &wt, [2, 2, 3, 3], None, &spec).unwrap();
        let (slow, ss) = oracles::conv2d(&x, [1, 2, h, w], &wt, [2, 2, 3, 3], None, &spec);
        assert_eq!(fs, ss, "case {case}");
        assert_close_all(&fast, &slow, &format!("asymmetric pad case {case} {spec:?}"));
    }
}

#[test]
fn conv2d_spec_example_random_dilated_case() {
    // random 2x3x9x9 input, 4x3x3x3 weight, dilation 2, pad 2
    let mut rng = SeededRng::new(7);
    let x = random_vec(&mut rng, 2 * 3 * 9 * 9);
    let w = random_vec(&mut rng, 4 * 3 * 3 * 3);
    let spec = ConvSpec::same3x3(2);
    let (fast, shape) =
        kernels::conv2d_forward(&x, [2, 3, 9, 9], &w, [4, 3, 3, 3], None, &spec).unwrap();
    let (slow, _) = oracles::conv2d(&x, [2, 3, 9, 9], &w, [4, 3, 3, 3], None, &spec);
    assert_eq!(shape, [2, 4, 9, 9]);
    assert_close_all(&fast, &slow, "dilated 9x9 case");
}

#[test]
fn maxpool_matches_naive_windowed_max() {
    let mut rng = SeededRng::new(0xB001);
    for case in 0..120 {
        let n = 1 + rng.below(2);
        let c = 1 + rng.below(3);
        let window = 2 + rng.below(2);
        let stride = 1 + rng.below(2);
        let pad = rng.below((window - 1) / 2 + 1);
        let h = window + rng.below(8);
        let w = window + rng.below(8);
        let spec = PoolSpec::new(window, stride, pad);
        let x = random_vec(&mut rng, n * c * h * w);
        let (fast, fs, _) = kernels::maxpool2d_forward(&x, [n, c, h, w], &spec).unwrap();
        let (slow, ss) = oracles::maxpool2d(&x, [n, c, h, w], &spec);
        assert_eq!(fs, ss, "case {case}");
        assert_close_all(&fast, &slow, &format!("maxpool case {case}"));
    }
}

#[test]
fn maxpool_spec_example_6x6_window3_stride2() {
    let mut rng = SeededRng::new(42);
    let x = random_vec(&mut rng, 36);
    let spec = PoolSpec::new(3, 2, 0);
    let (fast, shape, _) = kernels::maxpool2d_forward(&x, [1, 1, 6, 6], &spec).unwrap();
    let (slow, _) = oracles::maxpool2d(&x, [1, 1, 6, 6], &spec);
    assert_eq!(shape, [1, 1, 2, 2]);
    assert_eq!(fast, slow);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = SeededRng::new(0x3A);
    for case in 0..150 {
        let m = 1 + rng.below(8);
        let k = 1 + rng.below(8);
        let n = 1 + rng.below(8);
        let a = random_vec(&mut rng, m * k);
        let b = random_vec(&mut rng, k * n);
        let fast = kernels::gemm_nn(m, k, n, &a, &b);
        let slow = oracles::matmul(&a, &b, m, k, n);
        assert_close_all(&fast, &slow, &format!("matmul case {case} ({m}x{k}x{n})"));
    }
}

#[test]
fn batched_matmul_matches_per_batch_oracle() {
    // spec example shape: 2x4x8 by 2x8x3
    let mut rng = SeededRng::new(0xBB);
    for _ in 0..30 {
        let b = 1 + rng.below(3);
        let (m, k, n) = (1 + rng.below(5), 1 + rng.below(6), 1 + rng.below(4));
        let av = random_vec(&mut rng, b * m * k);
        let bv = random_vec(&mut rng, b * k * n);
        let mut tape = Tape::<f32>::new();
        let a_id = tape.leaf(Tensor::new(vec![b, m, k], av.clone()).unwrap());
        let b_id = tape.leaf(Tensor::new(vec![b, k, n], bv.clone()).unwrap());
        let y = tape.matmul(a_id, b_id).unwrap();
        for img in 0..b {
            let slow = oracles::matmul(
                &av[img * m * k..(img + 1) * m * k],
                &bv[img * k * n..(img + 1) * k * n],
                m,
                k,
                n,
            );
            let fast = &tape.value(y).data()[img * m * n..(img + 1) * m * n];
            assert_close_all(fast, &slow, "batched matmul");
        }
    }
}

#[test]
fn upsample_matches_scalar_reference() {
    let mut rng = SeededRng::new(0x4B);
    for case in 0..120 {
        let n = 1 + rng.below(2);
        let c = 1 + rng.below(3);
        let h = 1 + rng.below(7);
        let w = 1 + rng.below(7);
        let x = random_vec(&mut rng, n * c * h * w);
        let (fast, shape) = kernels::upsample2x_forward(&x, [n, c, h, w]);
        assert_eq!(shape, [n, c, 2 * h, 2 * w]);
        for plane in 0..n * c {
            let slow = oracles::resize_bilinear(
                &x[plane * h * w..(plane + 1) * h * w],
                h,
                w,
                2 * h,
                2 * w,
            );
            assert_close_all(
                &fast[plane * 4 * h * w..(plane + 1) * 4 * h * w],
                &slow,
                &format!("upsample case {case}"),
            );
        }
    }
}

#[test]
fn tape_attention_matches_direct_formula() {
    // single head: softmax(q k^T / sqrt(d)) v composed from tape primitives
    let mut rng = SeededRng::new(0xA7);
    for case in 0..100 {
        let n = 1 + rng.below(6);
        let d = 1 + rng.below(6);
        let q = random_vec(&mut rng, n * d);
        let k = random_vec(&mut rng, n * d);
        let v = random_vec(&mut rng, n * d);

        let mut tape = Tape::<f32>::new();
        let qi = tape.leaf(Tensor::new(vec![n, d], q.clone()).unwrap());
        let ki = tape.leaf(Tensor::new(vec![n, d], k.clone()).unwrap());
        let vi = tape.leaf(Tensor::new(vec![n, d], v.clone()).unwrap());
        let kt = tape.swap_axes(ki, 0, 1).unwrap();
        let scores = tape.matmul(qi, kt).unwrap();
        let scaled = tape.affine(scores, 1.0 / (d as f64).sqrt(), 0.0).unwrap();
        let weights = tape.softmax(scaled, 1).unwrap();
        let out = tape.matmul(weights, vi).unwrap();

        let slow = oracles::attention(&q, &k, &v, n, d);
        assert_close_all(
            tape.value(out).data(),
            &slow,
            &format!("attention case {case} (n={n}, d={d})"),
        );

        // attention weight rows sum to 1
        let wdata = tape.value(weights).data();
        for row in 0..n {
            let s: f32 = wdata[row * n..(row + 1) * n].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }
}

#[test]
fn dilation9_receptive_field_spans_19_pixels() {
    // probe a unit impulse through a single all-ones dilated conv
    let size = 25usize;
    let mut x = vec![0.0f32; size * size];
    x[(size / 2) * size + size / 2] = 1.0;
    let w = vec![1.0f32; 9];
    let spec = ConvSpec::same3x3(9);
    let (y, _) =
        kernels::conv2d_forward(&x, [1, 1, size, size], &w, [1, 1, 3, 3], None, &spec).unwrap();
    let mut min_y = size;
    let mut max_y = 0;
    for yy in 0..size {
        for xx in 0..size {
            if y[yy * size + xx] != 0.0 {
                min_y = min_y.min(yy);
                max_y = max_y.max(yy);
            }
        }
    }
    assert_eq!(max_y - min_y + 1, 19, "1 + 2*9 pixel span");
}
