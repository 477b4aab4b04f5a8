//! Per-primitive contracts: shapes, closed-form cases and reference
//! oracles.

use dformer_core::rng::Rng;
use dformer_core::tape::Tape;
use dformer_core::tensor::Tensor;

fn t32(dims: &[usize], data: Vec<f32>) -> Tensor<f32> {
    Tensor::new(dims.to_vec(), data).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::<f32>::new();
    let eye = tape.constant(&t32(
        &[3, 3],
        vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
    ));
    let m = tape.constant(&t32(&[3, 2], vec![1., 2., 3., 4., 5., 6.]));
    let p = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.data(p), t32(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).data());

    // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
    let a = tape.constant(&t32(&[2, 2], vec![1., 2., 3., 4.]));
    let b = tape.constant(&t32(&[2, 1], vec![5., 6.]));
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.data(p), &[17.0, 39.0]);

    let bad = tape.constant(&t32(&[3, 1], vec![0.; 3]));
    assert!(tape.matmul(a, bad).is_err());
}

#[test]
fn matmul_gradient_matches_f32_finite_differences() {
    // 32-bit central differences, relative error < 1e-4.
    let mut rng = Rng::new(41);
    let a0 = Tensor::<f32>::from_fn(&[3, 4], |_| rng.uniform(-1.0, 1.0) as f32);
    let b0 = Tensor::<f32>::from_fn(&[4, 2], |_| rng.uniform(-1.0, 1.0) as f32);
    let loss = |a: &Tensor<f32>, b: &Tensor<f32>| -> f32 {
        let mut tape = Tape::<f32>::new();
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let p = tape.matmul(av, bv).unwrap();
        let s = tape.sum_all(p).unwrap();
        tape.data(s)[0]
    };
    // analytic
    let mut tape = Tape::<f32>::new();
    let av = tape.leaf(&a0);
    let bv = tape.leaf(&b0);
    let p = tape.matmul(av, bv).unwrap();
    let s = tape.sum_all(p).unwrap();
    let grads = tape.backward(s).unwrap();
    let ga = grads.of(av).unwrap().clone();
    let h = 1e-2f32; // f32 FD needs a coarse step
    for i in 0..a0.numel() {
        let mut ap = a0.clone();
        ap.data_mut()[i] += h;
        let mut am = a0.clone();
        am.data_mut()[i] -= h;
        let fd = (loss(&ap, &b0) - loss(&am, &b0)) / (2.0 * h);
        let ad = ga.data()[i];
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-4);
        assert!(rel < 1e-4, "coord {i}: ad {ad} fd {fd} rel {rel}");
    }
}

#[test]
fn conv2d_identity_kernel_and_shapes() {
    let mut rng = Rng::new(5);
    let x0 = Tensor::<f32>::from_fn(&[1, 2, 4, 4], |_| rng.uniform(-1.0, 1.0) as f32);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&x0);
    // 1x1 kernel with identity channel map, stride 1, no bias
    let w = tape.constant(&t32(&[2, 2, 1, 1], vec![1., 0., 0., 1.]));
    let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
    assert_eq!(tape.data(y), x0.data());

    // 3x3 stride-2 on 8x8 with padding 1 -> 4x4
    let x8 = tape.constant(&Tensor::<f32>::zeros(&[1, 1, 8, 8]));
    let w3 = tape.constant(&Tensor::<f32>::zeros(&[1, 1, 3, 3]));
    let y = tape.conv2d(x8, w3, None, 2, 1, 1).unwrap();
    assert_eq!(tape.dims(y), &[1, 1, 4, 4]);

    // invalid group split
    let wg = tape.constant(&Tensor::<f32>::zeros(&[2, 2, 3, 3]));
    assert!(tape.conv2d(x8, wg, None, 1, 1, 3).is_err());
}

/// Direct four-loop convolution reference.
fn conv_naive(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor<f32> {
    let (b, cin, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (cout, cing, k) = (w.dims()[0], w.dims()[1], w.dims()[2]);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    let (cog, _) = (cout / groups, cin / groups);
    let mut out = Tensor::<f32>::zeros(&[b, cout, oh, ow]);
    for bi in 0..b {
        for co in 0..cout {
            let g = co / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map(|bv| bv[co]).unwrap_or(0.0) as f64;
                    for ci in 0..cing {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((bi * cin + g * cing + ci) * h + iy as usize) * wd
                                    + ix as usize;
                                let wi = ((co * cing + ci) * k + ky) * k + kx;
                                acc += x.data()[xi] as f64 * w.data()[wi] as f64;
                            }
                        }
                    }
                    out.data_mut()[((bi * cout + co) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_loops_on_random_shapes() {
    let mut rng = Rng::new(17);
    for case in 0..12 {
        let groups = [1usize, 1, 2, 4][case % 4];
        let cin = groups * (1 + rng.below(2));
        let cout = groups * (1 + rng.below(3));
        let k = [1usize, 3, 3, 5][case % 4];
        let stride = 1 + case % 2;
        let padding = k / 2;
        let b = 1 + rng.below(2);
        let h = k + rng.below(16 - k);
        let w = k + rng.below(16 - k);
        let x = Tensor::<f32>::from_fn(&[b, cin, h, w], |_| rng.uniform(-1.0, 1.0) as f32);
        let wt =
            Tensor::<f32>::from_fn(&[cout, cin / groups, k, k], |_| rng.uniform(-1.0, 1.0) as f32);
        let bias = Tensor::<f32>::from_fn(&[cout], |_| rng.uniform(-0.5, 0.5) as f32);
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(&x);
        let wv = tape.constant(&wt);
        let bv = tape.constant(&bias);
        let y = tape.conv2d(xv, wv, Some(bv), stride, padding, groups).unwrap();
        let reference = conv_naive(&x, &wt, Some(bias.data()), stride, padding, groups);
        assert_eq!(tape.dims(y), reference.dims());
        let got = tape.value(y);
        assert!(
            got.max_abs_diff(&reference) < 1e-6,
            "case {case}: diff {}",
            got.max_abs_diff(&reference)
        );
    }
}

#[test]
fn adaptive_pool_constant_identity_and_window_rule() {
    let mut tape = Tape::<f32>::new();
    let c = tape.constant(&Tensor::full(&[1, 2, 5, 3], 0.7f32));
    let y = tape.adaptive_avg_pool2d(c, (2, 2)).unwrap();
    for &v in tape.data(y) {
        assert!((v - 0.7).abs() < 1e-6);
    }

    let mut rng = Rng::new(9);
    let x0 = Tensor::<f32>::from_fn(&[1, 1, 4, 4], |_| rng.uniform(0.0, 1.0) as f32);
    let x = tape.constant(&x0);
    let y = tape.adaptive_avg_pool2d(x, (4, 4)).unwrap();
    assert_eq!(tape.data(y), x0.data());

    // h = w = 8 pooled to 7: enumerate the floor/ceil windows directly
    let x0 = Tensor::<f32>::from_fn(&[1, 1, 8, 8], |i| i as f32 * 0.03 - 1.0);
    let x = tape.constant(&x0);
    let y = tape.adaptive_avg_pool2d(x, (7, 7)).unwrap();
    // windows [floor(i*8/7), ceil((i+1)*8/7))
    let win = |i: usize| -> (usize, usize) { (i * 8 / 7, ((i + 1) * 8 + 6) / 7) };
    for i in 0..7 {
        for j in 0..7 {
            let (y0, y1) = win(i);
            let (x0c, x1c) = win(j);
            let mut s = 0.0f64;
            let mut n = 0;
            for yy in y0..y1.min(8) {
                for xx in x0c..x1c.min(8) {
                    s += x0.data()[yy * 8 + xx] as f64;
                    n += 1;
                }
            }
            let expect = (s / n as f64) as f32;
            let got = tape.data(y)[i * 7 + j];
            assert!((got - expect).abs() < 1e-6, "window ({i},{j})");
        }
    }
}

#[test]
fn adaptive_pool_preserves_global_mean_when_divisible() {
    let mut rng = Rng::new(31);
    for _ in 0..5 {
        let k = 1 + rng.below(4);
        let mult = 1 + rng.below(3);
        let hw = k * mult;
        let x0 = Tensor::<f32>::from_fn(&[1, 2, hw, hw], |_| rng.uniform(-1.0, 1.0) as f32);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&x0);
        let y = tape.adaptive_avg_pool2d(x, (k, k)).unwrap();
        let mean_in: f64 =
            x0.data().iter().map(|&v| v as f64).sum::<f64>() / x0.numel() as f64;
        let mean_out: f64 =
            tape.data(y).iter().map(|&v| v as f64).sum::<f64>() / tape.data(y).len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-6);
    }
}

#[test]
fn bilinear_resize_identity_and_constant() {
    let mut rng = Rng::new(3);
    let x0 = Tensor::<f32>::from_fn(&[1, 3, 5, 5], |_| rng.uniform(-1.0, 1.0) as f32);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&x0);
    let y = tape.bilinear_resize(x, (5, 5)).unwrap();
    assert_eq!(tape.data(y), x0.data());

    let c = tape.constant(&Tensor::full(&[1, 1, 3, 3], 2.5f32));
    let y = tape.bilinear_resize(c, (9, 7)).unwrap();
    for &v in tape.data(y) {
        assert!((v - 2.5).abs() < 1e-6);
    }
}

#[test]
fn softmax_uniform_shift_and_closed_form() {
    let mut tape = Tape::<f32>::new();
    let u = tape.constant(&Tensor::full(&[2, 5], 1.3f32));
    let s = tape.softmax(u, 1).unwrap();
    for &v in tape.data(s) {
        assert!((v - 0.2).abs() < 1e-6);
    }

    let mut rng = Rng::new(8);
    let x0 = Tensor::<f32>::from_fn(&[3, 4], |_| rng.uniform(-2.0, 2.0) as f32);
    let shifted = x0.map(|v| v + 0.5);
    let x = tape.constant(&x0);
    let xs = tape.constant(&shifted);
    let s1 = tape.softmax(x, 1).unwrap();
    let s2 = tape.softmax(xs, 1).unwrap();
    let (a, b) = (tape.value(s1), tape.value(s2));
    assert!(a.max_abs_diff(&b) < 1e-6);

    // [0, ln 3] -> [0.25, 0.75]
    let x = tape.constant(&t32(&[1, 2], vec![0.0, 3.0f32.ln()]));
    let s = tape.softmax(x, 1).unwrap();
    assert!((tape.data(s)[0] - 0.25).abs() < 1e-6);
    assert!((tape.data(s)[1] - 0.75).abs() < 1e-6);
}

#[test]
fn softmax_slices_sum_to_one_on_random_shapes() {
    let mut rng = Rng::new(12);
    for _ in 0..10 {
        let dims = vec![1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(4)];
        let axis = rng.below(3);
        let x0 = Tensor::<f32>::from_fn(&dims, |_| rng.uniform(-5.0, 5.0) as f32);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&x0);
        let s = tape.softmax(x, axis).unwrap();
        let sd = tape.value(s);
        assert!(sd.data().iter().all(|&v| v >= 0.0));
        let outer: usize = dims[..axis].iter().product();
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let sum: f32 = (0..len)
                    .map(|l| sd.data()[o * len * inner + l * inner + i])
                    .sum();
                assert!((sum - 1.0).abs() < 1e-5, "slice sum {sum}");
            }
        }
    }
}

#[test]
fn batch_norm_train_normalizes_and_affine_works() {
    let mut rng = Rng::new(6);
    let x0 = Tensor::<f32>::from_fn(&[2, 3, 4, 4], |_| rng.uniform(-3.0, 3.0) as f32);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&x0);
    let gamma = tape.constant(&Tensor::full(&[3], 1.0f32));
    let beta = tape.constant(&Tensor::zeros(&[3]));
    let (y, _, _) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    let yd = tape.value(y);
    for c in 0..3 {
        let mut vals = Vec::new();
        for b in 0..2 {
            let o = (b * 3 + c) * 16;
            vals.extend_from_slice(&yd.data()[o..o + 16]);
        }
        let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
        let var: f64 = vals
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / vals.len() as f64;
        assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
    }

    // gamma = 2, beta = 3 shifts the stats
    let gamma2 = tape.constant(&Tensor::full(&[3], 2.0f32));
    let beta3 = tape.constant(&Tensor::full(&[3], 3.0f32));
    let (y2, _, _) = tape.batch_norm_train(x, gamma2, beta3, 1e-5).unwrap();
    let yd = tape.value(y2);
    let mean: f64 = yd.data().iter().map(|&v| v as f64).sum::<f64>() / yd.numel() as f64;
    assert!((mean - 3.0).abs() < 1e-3);

    // single element per channel is rejected in train mode
    let one = tape.constant(&Tensor::zeros(&[1, 3, 1, 1]));
    assert!(tape.batch_norm_train(one, gamma, beta, 1e-5).is_err());
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    // stored stats mu = 1, var = 4, eps = 0, x = 3 -> (3 - 1) / 2 = 1
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&Tensor::full(&[1, 1, 2, 1], 3.0f32));
    let gamma = tape.constant(&Tensor::full(&[1], 1.0f32));
    let beta = tape.constant(&Tensor::zeros(&[1]));
    let y = tape
        .batch_norm_eval(x, gamma, beta, &[1.0], &[4.0], 0.0)
        .unwrap();
    for &v in tape.data(y) {
        assert!((v - 1.0).abs() < 1e-6);
    }
}

#[test]
fn hadamard_and_concat_contracts() {
    let mut rng = Rng::new(2);
    let x0 = Tensor::<f32>::from_fn(&[2, 3], |_| rng.uniform(-1.0, 1.0) as f32);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&x0);
    let ones = tape.constant(&Tensor::full(&[2, 3], 1.0f32));
    let zeros = tape.constant(&Tensor::zeros(&[2, 3]));
    let h1 = tape.hadamard(x, ones).unwrap();
    assert_eq!(tape.data(h1), x0.data());
    let h0 = tape.hadamard(x, zeros).unwrap();
    assert!(tape.data(h0).iter().all(|&v| v == 0.0));
    let bad = tape.constant(&Tensor::zeros(&[3, 2]));
    assert!(tape.hadamard(x, bad).is_err());

    // concat C=4 and C=2 -> C=6, first four channels from the first input
    let a = tape.constant(&Tensor::full(&[1, 4, 2, 2], 1.0f32));
    let b = tape.constant(&Tensor::full(&[1, 2, 2, 2], 2.0f32));
    let c = tape.concat_channels(&[a, b]).unwrap();
    assert_eq!(tape.dims(c), &[1, 6, 2, 2]);
    assert!(tape.data(c)[..16].iter().all(|&v| v == 1.0));
    assert!(tape.data(c)[16..].iter().all(|&v| v == 2.0));
}

#[test]
fn cross_entropy_closed_forms() {
    let mut tape = Tape::<f32>::new();
    // uniform logits, no smoothing -> ln C
    let logits = tape.constant(&Tensor::zeros(&[2, 5]));
    let l = tape.cross_entropy(logits, &[0, 3], 0.0, None).unwrap();
    assert!((tape.data(l)[0] - (5.0f32).ln()).abs() < 1e-6);

    // peaked logits -> loss ~ 0
    let peaked = tape.constant(&t32(&[1, 3], vec![30.0, 0.0, 0.0]));
    let l = tape.cross_entropy(peaked, &[0], 0.0, None).unwrap();
    assert!(tape.data(l)[0] < 1e-6);

    // smoothing is a no-op at uniform logits: C=2, eps=0.1 -> ln 2
    let two = tape.constant(&Tensor::zeros(&[1, 2]));
    let l = tape.cross_entropy(two, &[1], 0.1, None).unwrap();
    assert!((tape.data(l)[0] - (2.0f32).ln()).abs() < 1e-6);

    // all positions ignored is an error
    let r = tape.cross_entropy(two, &[255], 0.0, Some(255));
    assert!(r.is_err());
}

#[test]
fn backward_basics() {
    // loss = sum(x) -> grad = ones
    let mut tape = Tape::<f32>::new();
    let x0 = Tensor::<f32>::from_fn(&[4], |i| i as f32);
    let x = tape.leaf(&x0);
    let s = tape.sum_all(x).unwrap();
    let grads = tape.backward(s).unwrap();
    assert!(grads.of(x).unwrap().data().iter().all(|&v| v == 1.0));

    // loss = sum(x * x) -> grad = 2x
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&x0);
    let sq = tape.hadamard(x, x).unwrap();
    let s = tape.sum_all(sq).unwrap();
    let grads = tape.backward(s).unwrap();
    for (g, &v) in grads.of(x).unwrap().data().iter().zip(x0.data()) {
        assert!((g - 2.0 * v).abs() < 1e-6);
    }

    // non-scalar loss is rejected
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&x0);
    assert!(tape.backward(x).is_err());
}

#[test]
fn unused_parameters_get_zero_gradients() {
    let mut tape = Tape::<f32>::new();
    let used = tape.param_leaf(&Tensor::full(&[2], 1.0f32), 0);
    let _unused = tape.param_leaf(&Tensor::full(&[3], 1.0f32), 1);
    let s = tape.sum_all(used).unwrap();
    let grads = tape.backward(s).unwrap();
    let z = grads.param_or_zeros(1, &[3]);
    assert!(z.data().iter().all(|&v| v == 0.0));
    assert!(grads.of_param(0).is_some());
}
