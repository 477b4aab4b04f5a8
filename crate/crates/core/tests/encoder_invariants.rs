//! Encoder structure and behavior: shape pyramid, identity reduction,
//! stochastic depth, cross-modal gradient coupling and the attention-fusion
//! switches.

use dformer_core::encoder::{
    count_parameters, encoder_eval, encoder_forward, gaa_forward, lea_forward,
    rgbd_block_forward, stems_downsamples_forward, EncoderWeights, LeaFusion, QFusion,
    VariantConfig,
};
use dformer_core::nn::{Forward, Mode};
use dformer_core::params::ParamStore;
use dformer_core::rng::Rng;
use dformer_core::tape::Tape;
use dformer_core::tensor::Tensor;

fn inputs(b: usize, h: usize, w: usize, depth_ch: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = Rng::new(seed);
    (
        Tensor::from_fn(&[b, 3, h, w], |_| rng.uniform(0.0, 1.0) as f32),
        Tensor::from_fn(&[b, depth_ch, h, w], |_| rng.uniform(0.0, 1.0) as f32),
    )
}

fn build(cfg: &VariantConfig, seed: u64) -> (ParamStore<f32>, EncoderWeights) {
    build_std(cfg, seed, 0.02)
}

fn build_std(cfg: &VariantConfig, seed: u64, std: f64) -> (ParamStore<f32>, EncoderWeights) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let enc = EncoderWeights::init(&mut store, cfg, &mut rng, std).unwrap();
    (store, enc)
}

#[test]
fn stem_outputs_quarter_resolution_stem_channels() {
    // variant T on a 64x64 input: stem gives [1,16,16,16] rgb, [1,8,16,16]
    // depth; the stage-1 transition then lifts to (32, 16).
    let cfg = VariantConfig::t();
    let (mut store, enc) = build(&cfg, 1);
    let (rgb, depth) = inputs(1, 64, 64, 1, 2);
    let mut tape = Tape::new();
    let mut rng = Rng::new(0);
    let mut ctx = Forward::new(&mut tape, &mut store, Mode::Eval, &mut rng);
    let rv = ctx.input(&rgb);
    let dv = ctx.input(&depth);
    let f = dformer_core::encoder::stem_forward(&mut ctx, rv, dv, &enc.stem).unwrap();
    assert_eq!(tape.dims(f.rgb), &[1, 16, 16, 16]);
    assert_eq!(tape.dims(f.depth), &[1, 8, 16, 16]);

    // zero input + zero biases: pre-norm activation of the first conv is 0
    let mut store2 = store.clone_store();
    let zero_rgb = Tensor::zeros(&[1, 3, 64, 64]);
    let mut tape2 = Tape::new();
    let mut ctx2 = Forward::new(&mut tape2, &mut store2, Mode::Eval, &mut rng);
    let zv = ctx2.input(&zero_rgb);
    let conv = ctx2.conv(zv, &enc.stem.rgb1.conv, 2, 1, 1).unwrap();
    assert!(tape2.data(conv).iter().all(|&v| v == 0.0));
}

#[test]
fn indivisible_input_is_rejected() {
    let cfg = VariantConfig::tiny_test();
    let (mut store, enc) = build(&cfg, 1);
    let (rgb, depth) = inputs(1, 48, 48, 1, 2);
    assert!(encoder_eval(&mut store, &enc, &cfg, &rgb, &depth).is_err());
}

#[test]
fn shape_pyramid_matches_table_for_t_variant() {
    let cfg = VariantConfig::t();
    let (mut store, enc) = build(&cfg, 3);
    let (rgb, depth) = inputs(1, 64, 64, 1, 4);
    let stages = encoder_eval(&mut store, &enc, &cfg, &rgb, &depth).unwrap();
    let expect = [
        (32, 16, 16usize),
        (64, 32, 8),
        (128, 64, 4),
        (256, 128, 2),
    ];
    for (i, (r, d)) in stages.iter().enumerate() {
        let (cr, cd, hw) = expect[i];
        assert_eq!(r.dims(), &[1, cr, hw, hw], "stage {} rgb", i + 1);
        assert_eq!(d.dims(), &[1, cd, hw, hw], "stage {} depth", i + 1);
    }
}

#[test]
fn eval_mode_is_deterministic() {
    let cfg = VariantConfig::tiny_test();
    let (mut store, enc) = build(&cfg, 5);
    let (rgb, depth) = inputs(2, 64, 64, 1, 6);
    let a = encoder_eval(&mut store, &enc, &cfg, &rgb, &depth).unwrap();
    let b = encoder_eval(&mut store, &enc, &cfg, &rgb, &depth).unwrap();
    for ((r1, d1), (r2, d2)) in a.iter().zip(b.iter()) {
        assert_eq!(r1, r2);
        assert_eq!(d1, d2);
    }
}

#[test]
fn zeroed_output_projections_reduce_to_stems_and_downsamplers() {
    for cfg in [VariantConfig::tiny_test(), VariantConfig::t()] {
        let (mut store, enc) = build(&cfg, 7);
        enc.zero_block_outputs(&mut store);
        let (rgb, depth) = inputs(1, 64, 64, 1, 8);
        let full = encoder_eval(&mut store, &enc, &cfg, &rgb, &depth).unwrap();
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let mut ctx = Forward::new(&mut tape, &mut store, Mode::Eval, &mut rng);
        let plain = stems_downsamples_forward(&mut ctx, &rgb, &depth, &enc, &cfg).unwrap();
        for (i, ((fr, fd), p)) in full.iter().zip(plain.iter()).enumerate() {
            let pr = tape.value(p.rgb);
            let pd = tape.value(p.depth);
            assert!(
                fr.max_abs_diff(&pr) < 1e-6,
                "stage {} rgb diff {}",
                i + 1,
                fr.max_abs_diff(&pr)
            );
            assert!(fd.max_abs_diff(&pd) < 1e-6, "stage {} depth", i + 1);
        }
    }
}

#[test]
fn full_drop_path_makes_block_identity_per_sample() {
    let mut cfg = VariantConfig::tiny_test();
    cfg.drop_path_max = 1.0;
    let (mut store, enc) = build(&cfg, 9);
    let (rgb, depth) = inputs(2, 64, 64, 1, 10);
    // run the non-block plumbing, then push the stage-4 features through
    // the last block in train mode: rate 1.0 drops both residual branches.
    let mut tape = Tape::new();
    let mut rng = Rng::new(1);
    let mut ctx = Forward::new(&mut tape, &mut store, Mode::Train, &mut rng);
    let stages = stems_downsamples_forward(&mut ctx, &rgb, &depth, &enc, &cfg).unwrap();
    let f4 = stages[3];
    let last = enc.stages[3].blocks.last().unwrap();
    assert!((last.drop_path - 1.0).abs() < 1e-12);
    let out = rgbd_block_forward(&mut ctx, f4, last, &cfg, 4).unwrap();
    assert_eq!(tape.value(out.rgb), tape.value(f4.rgb));
    assert_eq!(tape.value(out.depth), tape.value(f4.depth));
}

#[test]
fn downsample_branches_are_gradient_independent() {
    // a loss on the depth output of a downsampler leaves every rgb-branch
    // weight with a zero gradient
    let cfg = VariantConfig::tiny_test();
    let (mut store, enc) = build(&cfg, 11);
    let (rgb, depth) = inputs(1, 64, 64, 1, 12);
    let mut tape = Tape::new();
    let mut rng = Rng::new(0);
    let mut ctx = Forward::new(&mut tape, &mut store, Mode::Train, &mut rng);
    let rv = ctx.input(&rgb);
    let dv = ctx.input(&depth);
    let f = dformer_core::encoder::stem_forward(&mut ctx, rv, dv, &enc.stem).unwrap();
    let down = dformer_core::encoder::downsample_forward(&mut ctx, f, &enc.stages[0].down).unwrap();
    let loss = tape.mean_all(down.depth).unwrap();
    let grads = tape.backward(loss).unwrap();
    let rgb_w = enc.stages[0].down.rgb.conv.weight;
    let g = grads.param_or_zeros(rgb_w.index(), store.tensor(rgb_w).dims());
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn rgb_loss_reaches_depth_branch_weights_through_the_block() {
    let cfg = VariantConfig::tiny_test();
    let (mut store, enc) = build(&cfg, 13);
    let (rgb, depth) = inputs(1, 64, 64, 1, 14);
    let mut tape = Tape::new();
    let mut rng = Rng::new(0);
    let mut ctx = Forward::new(&mut tape, &mut store, Mode::Train, &mut rng);
    let stages = encoder_forward(&mut ctx, &rgb, &depth, &enc, &cfg).unwrap();
    let loss = tape.mean_all(stages[3].rgb).unwrap();
    let grads = tape.backward(loss).unwrap();
    // depth-branch weight inside stage 4's block (cross-modal coupling)
    let w = enc.stages[3].blocks[0].lea.depth_lin.weight;
    let g = grads.param_or_zeros(w.index(), store.tensor(w).dims());
    assert!(g.data().iter().any(|&v| v != 0.0));
}

#[test]
fn gaa_shapes_and_attention_rows() {
    let cfg = VariantConfig::tiny_test();
    let (mut store, enc) = build(&cfg, 15);
    let mut rng = Rng::new(16);
    let cd = cfg.stages[1].depth_channels;
    let cr = cfg.stages[1].rgb_channels;
    let rgb_n = Tensor::from_fn(&[2, cr, 8, 8], |_| rng.uniform(-1.0, 1.0) as f32);
    let depth_n = Tensor::from_fn(&[2, cd, 8, 8], |_| rng.uniform(-1.0, 1.0) as f32);
    let mut tape = Tape::new();
    let mut r0 = Rng::new(0);
    let mut ctx = Forward::new(&mut tape, &mut store, Mode::Eval, &mut r0);
    let rv = ctx.input(&rgb_n);
    let dv = ctx.input(&depth_n);
    let gw = enc.stages[1].blocks[0].gaa.as_ref().unwrap();
    let (out, attn) = gaa_forward(&mut ctx, rv, dv, gw, cfg.heads[1], 7, QFusion::QOnly).unwrap();
    assert_eq!(tape.dims(out), &[2, cd, 8, 8]);
    let ad = tape.value(attn);
    let d = ad.dims().to_vec(); // [B*heads, 49, 64]
    assert_eq!(d[1], 49);
    assert_eq!(d[2], 64);
    for row in 0..d[0] * d[1] {
        let s: f32 = ad.data()[row * d[2]..(row + 1) * d[2]].iter().sum();
        assert!((s - 1.0).abs() < 1e-5, "attention row sum {s}");
    }
}

#[test]
fn q_fusion_none_equals_q_only_with_zeroed_depth_columns() {
    // q_only with the depth columns of the query projection zeroed produces
    // exactly the none-mode output built from the rgb columns.
    let mut cfg_q = VariantConfig::tiny_test();
    cfg_q.q_fusion = QFusion::QOnly;
    let mut cfg_n = VariantConfig::tiny_test();
    cfg_n.q_fusion = QFusion::None;

    let (mut store_q, enc_q) = build_std(&cfg_q, 17, 0.3);
    let (mut store_n, enc_n) = build_std(&cfg_n, 17, 0.3);

    let (si, bi) = (1usize, 0usize);
    let cr = cfg_q.stages[si].rgb_channels;
    let cd = cfg_q.stages[si].depth_channels;
    let gq = enc_q.stages[si].blocks[bi].gaa.as_ref().unwrap();
    let gn = enc_n.stages[si].blocks[bi].gaa.as_ref().unwrap();

    // copy all shared projections from the q-only model into the none model
    for (src, dst) in [(&gq.k, &gn.k), (&gq.v, &gn.v), (&gq.out, &gn.out)]
        .iter()
        .flat_map(|(a, b)| [(a.weight, b.weight), (a.bias, b.bias)])
    {
        *store_n.tensor_mut(dst) = store_q.tensor(src).clone();
    }
    // split the q projection: q-only weight is [cd, cr+cd, 1, 1]; the none
    // model takes the rgb block, with the depth block zeroed in the source
    {
        let wq = store_q.tensor_mut(gq.q.weight);
        let mut rgb_part = vec![0.0f32; cd * cr];
        for o in 0..cd {
            for i in 0..cr + cd {
                if i < cr {
                    rgb_part[o * cr + i] = wq.data()[o * (cr + cd) + i];
                } else {
                    wq.data_mut()[o * (cr + cd) + i] = 0.0;
                }
            }
        }
        *store_n.tensor_mut(gn.q.weight) =
            Tensor::new(vec![cd, cr, 1, 1], rgb_part).unwrap();
        *store_n.tensor_mut(gn.q.bias) = store_q.tensor(gq.q.bias).clone();
    }

    let mut rng = Rng::new(18);
    let rgb_n = Tensor::from_fn(&[1, cr, 8, 8], |_| rng.uniform(-1.0, 1.0) as f32);
    let depth_n = Tensor::from_fn(&[1, cd, 8, 8], |_| rng.uniform(-1.0, 1.0) as f32);

    let run = |store: &mut ParamStore<f32>, gw: &dformer_core::encoder::weights::GaaWeights, qf: QFusion| {
        let mut tape = Tape::new();
        let mut r0 = Rng::new(0);
        let mut ctx = Forward::new(&mut tape, store, Mode::Eval, &mut r0);
        let rv = ctx.input(&rgb_n);
        let dv = ctx.input(&depth_n);
        let (out, _) = gaa_forward(&mut ctx, rv, dv, gw, 1, 7, qf).unwrap();
        tape.value(out)
    };
    let out_zeroed = run(&mut store_q, gq, QFusion::QOnly);
    let out_none = run(&mut store_n, gn, QFusion::None);
    assert!(out_zeroed.max_abs_diff(&out_none) < 1e-5);

    // and with non-zero depth columns the two modes genuinely differ
    let (mut store_q2, enc_q2) = build_std(&cfg_q, 17, 0.3);
    let gq2 = enc_q2.stages[si].blocks[bi].gaa.as_ref().unwrap();
    let out_full = run(&mut store_q2, gq2, QFusion::QOnly);
    assert!(out_full.max_abs_diff(&out_none) > 1e-6);
}

#[test]
fn lea_contracts() {
    let cfg = VariantConfig::tiny_test();
    let (mut store, enc) = build(&cfg, 19);
    let (si, bi) = (1usize, 0usize);
    let cr = cfg.stages[si].rgb_channels;
    let cd = cfg.stages[si].depth_channels;
    let lw = &enc.stages[si].blocks[bi].lea;
    let mut rng = Rng::new(20);
    let rgb_n = Tensor::from_fn(&[1, cr, 8, 8], |_| rng.uniform(-1.0, 1.0) as f32);
    let zeros_d = Tensor::zeros(&[1, cd, 8, 8]);

    // depth == 0 with zero biases annihilates the hadamard-mode output
    for id in [lw.depth_lin.bias, lw.dconv.bias] {
        for v in store.tensor_mut(id).data_mut() {
            *v = 0.0;
        }
    }
    let mut tape = Tape::new();
    let mut r0 = Rng::new(0);
    let mut ctx = Forward::new(&mut tape, &mut store, Mode::Eval, &mut r0);
    let rv = ctx.input(&rgb_n);
    let dv = ctx.input(&zeros_d);
    let out = lea_forward(&mut ctx, rv, dv, lw, cfg.lea_kernel, LeaFusion::Hadamard).unwrap();
    assert!(tape.data(out).iter().all(|&v| v == 0.0));

    // centered-delta depthwise kernel: the depth path reduces to its linear
    // projection exactly
    let k = cfg.lea_kernel;
    {
        let w = store.tensor_mut(lw.dconv.weight);
        for v in w.data_mut() {
            *v = 0.0;
        }
        for c in 0..cd {
            w.data_mut()[c * k * k + (k / 2) * k + (k / 2)] = 1.0;
        }
    }
    let depth_n = Tensor::from_fn(&[1, cd, 8, 8], |_| rng.uniform(-1.0, 1.0) as f32);
    let mut tape = Tape::new();
    let mut ctx = Forward::new(&mut tape, &mut store, Mode::Eval, &mut r0);
    let dv = ctx.input(&depth_n);
    let lin = ctx.linear(dv, &lw.depth_lin).unwrap();
    let conv = ctx.conv(lin, &lw.dconv, 1, k / 2, cd).unwrap();
    assert!(tape.value(conv).max_abs_diff(&tape.value(lin)) < 1e-6);

    // add and hadamard fusion disagree on random inputs, same shapes
    let (mut store2, enc2) = build(&cfg, 19);
    let lw2 = &enc2.stages[si].blocks[bi].lea;
    let mut tape = Tape::new();
    let mut ctx = Forward::new(&mut tape, &mut store2, Mode::Eval, &mut r0);
    let rv = ctx.input(&rgb_n);
    let dv = ctx.input(&depth_n);
    let h = lea_forward(&mut ctx, rv, dv, lw2, k, LeaFusion::Hadamard).unwrap();
    let a = lea_forward(&mut ctx, rv, dv, lw2, k, LeaFusion::Add).unwrap();
    assert_eq!(tape.dims(h), &[1, cd, 8, 8]);
    assert_eq!(tape.dims(a), &[1, cd, 8, 8]);
    assert!(tape.value(h).max_abs_diff(&tape.value(a)) > 1e-6);
}

#[test]
fn base_module_contracts() {
    let cfg = VariantConfig::tiny_test();
    let (mut store, enc) = build(&cfg, 21);
    let (si, bi) = (1usize, 0usize);
    let cr = cfg.stages[si].rgb_channels;
    let bw = &enc.stages[si].blocks[bi].base;
    for id in [bw.lin.bias, bw.dconv.bias, bw.gate.bias] {
        for v in store.tensor_mut(id).data_mut() {
            *v = 0.0;
        }
    }
    let mut tape = Tape::new();
    let mut r0 = Rng::new(0);
    let mut ctx = Forward::new(&mut tape, &mut store, Mode::Eval, &mut r0);
    let zv = ctx.input(&Tensor::zeros(&[1, cr, 8, 8]));
    let out = dformer_core::encoder::base_forward(&mut ctx, zv, bw, cfg.base_kernel).unwrap();
    // output channels are C_rgb, and zero input gives zero output
    assert_eq!(tape.dims(out), &[1, cr, 8, 8]);
    assert!(tape.data(out).iter().all(|&v| v == 0.0));
}

#[test]
fn qkv_fusion_adds_exactly_the_depth_projection_columns() {
    // parameter delta between q-only and qkv equals two extra
    // [depth -> depth] projections (K and V input widened by Cd) per
    // GAA-bearing block; none removes the query depth columns.
    let base = VariantConfig::tiny_test();
    let mut q = base.clone();
    q.q_fusion = QFusion::QOnly;
    let mut qkv = base.clone();
    qkv.q_fusion = QFusion::Qkv;
    let mut none = base.clone();
    none.q_fusion = QFusion::None;
    let pq = count_parameters(&q, false, 4).unwrap();
    let pqkv = count_parameters(&qkv, false, 4).unwrap();
    let pnone = count_parameters(&none, false, 4).unwrap();
    let expected_qkv_delta: usize = base.stages[1..]
        .iter()
        .map(|s| 2 * s.depth_channels * s.depth_channels * s.blocks)
        .sum();
    let expected_none_delta: usize = base.stages[1..]
        .iter()
        .map(|s| s.depth_channels * s.depth_channels * s.blocks)
        .sum();
    assert_eq!(pqkv - pq, expected_qkv_delta);
    assert_eq!(pq - pnone, expected_none_delta);
}

#[test]
fn flops_and_params_increase_with_channel_ratio() {
    let mut prev_params = 0usize;
    let mut prev_flops = 0u64;
    for ratio in [0.125, 0.25, 0.5, 1.0] {
        let cfg = VariantConfig::tiny_test().with_channel_ratio(ratio).unwrap();
        let p = count_parameters(&cfg, true, 4).unwrap();
        let f = dformer_core::encoder::flops_proxy(&cfg, (64, 64), true, 4);
        assert!(p > prev_params, "params not increasing at ratio {ratio}");
        assert!(f > prev_flops, "flops not increasing at ratio {ratio}");
        prev_params = p;
        prev_flops = f;
    }
}
