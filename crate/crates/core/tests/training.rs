//! Training-pipeline behavior: loss at init, classifier invariances,
//! checkpoint resume, multi-scale flip inference and dataset properties.

use std::fs;
use std::path::PathBuf;

use dformer_core::data::{
    gen_synthetic, synth::GenMode, DatasetManifest, DepthSource, Target,
};
use dformer_core::encoder::VariantConfig;
use dformer_core::nn::{Forward, Mode};
use dformer_core::pretrain::{classifier_forward, pretrain_run, ClsModel, PretrainHyper};
use dformer_core::rng::Rng;
use dformer_core::segmentation::{
    finetune_run, split_indices, FinetuneHyper, HamCfg, InitFrom, SegModel,
};
use dformer_core::tape::Tape;
use dformer_core::tensor::Tensor;

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dformer_test_{name}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_cls_manifest(dir: &PathBuf, seed: u64, n: usize) -> DatasetManifest {
    gen_synthetic(seed, n, 32, GenMode::Classify, 4, dir).unwrap()
}

#[test]
fn classifier_head_contracts() {
    let cfg = VariantConfig::tiny_test();
    let mut model = ClsModel::<f32>::new(cfg, 10, 0, 0.02).unwrap();
    let mut rng = Rng::new(1);
    // B=2, C=stage4 rgb channels, 2x2 spatial -> [2, 10]
    let c4 = model.cfg.stages[3].rgb_channels;
    let feat = Tensor::from_fn(&[2, c4, 2, 2], |_| rng.uniform(-1.0, 1.0) as f32);
    let mut tape = Tape::new();
    let mut r0 = Rng::new(0);
    let mut ctx = Forward::new(&mut tape, &mut model.store, Mode::Eval, &mut r0);
    let fv = ctx.input(&feat);
    let logits = classifier_forward(&mut ctx, fv, &model.head).unwrap();
    assert_eq!(tape.dims(logits), &[2, 10]);
    let base = tape.value(logits);

    // permuting spatial positions leaves the logits unchanged (mean pool)
    let mut permuted = feat.clone();
    for bc in 0..2 * c4 {
        let o = bc * 4;
        permuted.data_mut().swap(o, o + 3);
        permuted.data_mut().swap(o + 1, o + 2);
    }
    let mut tape = Tape::new();
    let mut ctx = Forward::new(&mut tape, &mut model.store, Mode::Eval, &mut r0);
    let fv = ctx.input(&permuted);
    let logits = classifier_forward(&mut ctx, fv, &model.head).unwrap();
    assert!(tape.value(logits).max_abs_diff(&base) < 1e-5);

    // constant feature map: logits equal the linear map of the constant
    let cval = 0.37f32;
    let cmap = Tensor::full(&[1, c4, 2, 2], cval);
    let mut tape = Tape::new();
    let mut ctx = Forward::new(&mut tape, &mut model.store, Mode::Eval, &mut r0);
    let fv = ctx.input(&cmap);
    let logits = classifier_forward(&mut ctx, fv, &model.head).unwrap();
    let w = model.store.tensor(model.head.linear.weight);
    let b = model.store.tensor(model.head.linear.bias);
    for k in 0..10 {
        let expect: f32 = (0..c4).map(|i| w.data()[k * c4 + i] * cval).sum::<f32>()
            + b.data()[k];
        assert!((tape.data(logits)[k] - expect).abs() < 1e-5);
    }
}

#[test]
fn top1_is_invariant_to_positive_logit_rescaling() {
    // argmax over logits equals argmax over 7.3 * logits
    let mut rng = Rng::new(4);
    let logits = Tensor::<f32>::from_fn(&[6, 5], |_| rng.uniform(-2.0, 2.0) as f32);
    for b in 0..6 {
        let a1 = dformer_core::segmentation::argmax_strided(logits.data(), b * 5, 5, 1);
        let scaled = logits.map(|v| v * 7.3);
        let a2 = dformer_core::segmentation::argmax_strided(scaled.data(), b * 5, 5, 1);
        assert_eq!(a1, a2);
    }
}

#[test]
fn first_pretrain_loss_is_ln_num_classes() {
    let dir = tmp_dir("firstloss");
    let manifest = tiny_cls_manifest(&dir.join("data"), 3, 32);
    let mut hyper = PretrainHyper::desk_default(3);
    hyper.epochs = 1;
    hyper.batch = 16;
    let out = dir.join("run");
    let summary =
        pretrain_run::<f32>(VariantConfig::tiny_test(), &manifest, &hyper, &out, None).unwrap();
    let ln_c = (manifest.num_classes as f64).ln();
    assert!(
        (summary.first_loss - ln_c).abs() < 0.2,
        "first loss {} vs ln C {}",
        summary.first_loss,
        ln_c
    );
    // run directory carries the metrics log and checkpoints
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("best.ckpt").exists());
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn pretrain_resume_is_bitwise_identical() {
    let dir = tmp_dir("resume");
    let manifest = tiny_cls_manifest(&dir.join("data"), 5, 32);
    let cfg = VariantConfig::tiny_test();
    let mut hyper = PretrainHyper::desk_default(5);
    hyper.epochs = 4;
    hyper.batch = 16;
    hyper.warmup_epochs = 1;

    // uninterrupted 4 epochs
    let full_out = dir.join("full");
    pretrain_run::<f32>(cfg.clone(), &manifest, &hyper, &full_out, None).unwrap();

    // interrupted after 2 epochs (same 4-epoch schedule), then resumed
    let part_out = dir.join("part");
    let mut head = hyper.clone();
    head.stop_after_epochs = Some(2);
    pretrain_run::<f32>(cfg.clone(), &manifest, &head, &part_out, None).unwrap();
    let resume_from = part_out.join("last.ckpt");
    let staged = dir.join("staged.ckpt");
    fs::copy(&resume_from, &staged).unwrap();
    pretrain_run::<f32>(cfg, &manifest, &hyper, &part_out, Some(&staged)).unwrap();

    let a = fs::read(full_out.join("last.ckpt")).unwrap();
    let b = fs::read(part_out.join("last.ckpt")).unwrap();
    assert_eq!(a, b, "resumed checkpoint differs from uninterrupted run");
    let ma = fs::read_to_string(full_out.join("metrics.csv")).unwrap();
    let mb = fs::read_to_string(part_out.join("metrics.csv")).unwrap();
    assert_eq!(ma, mb, "metrics logs differ");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn msflip_single_scale_equals_plain_predict_bitwise() {
    let dir = tmp_dir("msflip");
    let manifest = gen_synthetic(7, 4, 32, GenMode::Segment, 3, &dir.join("data")).unwrap();
    let mut model =
        SegModel::<f32>::new(VariantConfig::tiny_test(), 3, HamCfg::default(), 7, 0.05).unwrap();
    let s = manifest.load_sample(0).unwrap();
    let rgb = s.rgb.clone().reshaped(vec![1, 3, 32, 32]).unwrap();
    let depth = s.depth.clone().reshaped(vec![1, 1, 32, 32]).unwrap();
    let plain = model.predict_probs(&rgb, &depth).unwrap();
    let ms = model.msflip_predict(&rgb, &depth, &[1.0], false).unwrap();
    assert_eq!(plain, ms, "single-scale msflip must be bitwise identical");

    // full scale set runs and stays a probability distribution per pixel
    let full = model
        .msflip_predict(&rgb, &depth, &[0.5, 0.75, 1.0, 1.25, 1.5], true)
        .unwrap();
    for p in 0..32 * 32 {
        let mut sum = 0.0f64;
        for c in 0..3 {
            let v = full.data()[c * 32 * 32 + p] as f64;
            assert!((0.0..=1.0).contains(&v));
            sum += v;
        }
        assert!((sum - 1.0).abs() < 1e-5, "pixel {p} sums to {sum}");
    }

    // a scale rounding below 32 is an error
    assert!(model.msflip_predict(&rgb, &depth, &[0.2], false).is_err());
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn msflip_mirror_symmetry() {
    let dir = tmp_dir("msflip_sym");
    let manifest = gen_synthetic(9, 2, 32, GenMode::Segment, 3, &dir.join("data")).unwrap();
    let mut model =
        SegModel::<f32>::new(VariantConfig::tiny_test(), 3, HamCfg::disabled(), 9, 0.05).unwrap();
    let s = manifest.load_sample(0).unwrap();
    let rgb = s.rgb.clone().reshaped(vec![1, 3, 32, 32]).unwrap();
    let depth = s.depth.clone().reshaped(vec![1, 1, 32, 32]).unwrap();
    let out = model.msflip_predict(&rgb, &depth, &[1.0], true).unwrap();
    let out_m = model
        .msflip_predict(&rgb.flip_last_axis(), &depth.flip_last_axis(), &[1.0], true)
        .unwrap();
    assert!(out.flip_last_axis().max_abs_diff(&out_m) < 1e-6);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn decoder_context_disabled_equals_rank_zero() {
    let dir = tmp_dir("ham");
    let manifest = gen_synthetic(11, 2, 32, GenMode::Segment, 3, &dir.join("data")).unwrap();
    let s = manifest.load_sample(0).unwrap();
    let rgb = s.rgb.clone().reshaped(vec![1, 3, 32, 32]).unwrap();
    let depth = s.depth.clone().reshaped(vec![1, 1, 32, 32]).unwrap();
    let mut disabled =
        SegModel::<f32>::new(VariantConfig::tiny_test(), 3, HamCfg::disabled(), 1, 0.05).unwrap();
    let mut rank0 = SegModel::<f32>::new(
        VariantConfig::tiny_test(),
        3,
        HamCfg {
            enabled: true,
            rank: 0,
            iters: 6,
        },
        1,
        0.05,
    )
    .unwrap();
    let a = disabled.predict_logits(&rgb, &depth).unwrap();
    let b = rank0.predict_logits(&rgb, &depth).unwrap();
    assert_eq!(a, b);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn frozen_encoder_still_reduces_training_loss() {
    let dir = tmp_dir("frozen");
    let manifest = gen_synthetic(13, 8, 32, GenMode::Segment, 3, &dir.join("data")).unwrap();
    let mut hyper = FinetuneHyper::desk_default(13);
    hyper.steps = 30;
    hyper.batch = 4;
    hyper.base_lr = 2e-3;
    hyper.val_fraction = 0.0;
    hyper.freeze_encoder = true;
    hyper.drop_path_override = Some(0.0);
    let out = dir.join("run");
    let (model, _) = finetune_run::<f32>(
        VariantConfig::tiny_test(),
        HamCfg::disabled(),
        InitFrom::Random,
        &manifest,
        &hyper,
        Some(&out),
    )
    .unwrap();
    // encoder weights remain frozen, decoder trained
    for id in model.store.ids() {
        let name = model.store.name(id);
        if name.contains("running_") {
            continue; // batch-norm buffers are never trainable
        }
        if name.starts_with("decoder.") {
            assert!(model.store.is_trainable(id), "{name} should train");
        } else {
            assert!(!model.store.is_trainable(id), "{name} should be frozen");
        }
    }
    let log = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(
        tail < head,
        "decoder-only training failed to reduce loss: {head} -> {tail}"
    );
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn dataset_regeneration_is_byte_identical_and_thread_independent() {
    let dir = tmp_dir("regen");
    let a = dir.join("a");
    let b = dir.join("b");
    std::env::set_var("DFORMER_THREADS", "1");
    gen_synthetic(42, 12, 32, GenMode::Segment, 4, &a).unwrap();
    std::env::set_var("DFORMER_THREADS", "4");
    gen_synthetic(42, 12, 32, GenMode::Segment, 4, &b).unwrap();
    std::env::remove_var("DFORMER_THREADS");
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        let fa = fs::read(a.join(&name)).unwrap();
        let fb = fs::read(b.join(&name)).unwrap();
        assert_eq!(fa, fb, "{name:?} differs across worker counts");
    }
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn depth_only_probe_beats_chance() {
    // logistic probe on the mean-depth feature of a 2-class classification
    // set must beat the 0.5 chance level
    let dir = tmp_dir("probe");
    let manifest = gen_synthetic(15, 80, 32, GenMode::Classify, 2, &dir.join("data")).unwrap();
    let samples = manifest.load_all().unwrap();
    let feats: Vec<f64> = samples
        .iter()
        .map(|s| s.depth.data().iter().map(|&v| v as f64).sum::<f64>() / s.depth.numel() as f64)
        .collect();
    let labels: Vec<f64> = samples
        .iter()
        .map(|s| match s.target {
            Target::Class(c) => c as f64,
            _ => panic!("classification set expected"),
        })
        .collect();
    // 1-D logistic regression by gradient descent
    let (mut w, mut b) = (0.0f64, 0.0f64);
    let mean = feats.iter().sum::<f64>() / feats.len() as f64;
    for _ in 0..2000 {
        let (mut gw, mut gb) = (0.0, 0.0);
        for (x, y) in feats.iter().zip(labels.iter()) {
            let z = w * (x - mean) + b;
            let p = 1.0 / (1.0 + (-z).exp());
            gw += (p - y) * (x - mean);
            gb += p - y;
        }
        w -= 5.0 * gw / feats.len() as f64;
        b -= 5.0 * gb / feats.len() as f64;
    }
    let acc = feats
        .iter()
        .zip(labels.iter())
        .filter(|(x, y)| {
            let p = 1.0 / (1.0 + (-(w * (**x - mean) + b)).exp());
            (p > 0.5) == (**y > 0.5)
        })
        .count() as f64
        / feats.len() as f64;
    assert!(acc > 0.65, "depth probe accuracy {acc} not above chance");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn split_is_fixed_by_seed() {
    let (t1, v1) = split_indices(20, 0.2, 9);
    let (t2, v2) = split_indices(20, 0.2, 9);
    assert_eq!(t1, t2);
    assert_eq!(v1, v2);
    assert_eq!(v1.len(), 4);
    assert_eq!(t1.len(), 16);
    let (t0, v0) = split_indices(8, 0.0, 9);
    assert_eq!(t0, v0);
}

#[test]
fn pretrain_rejects_segmentation_data_and_empty_runs() {
    let dir = tmp_dir("badpre");
    let manifest = gen_synthetic(1, 2, 32, GenMode::Segment, 3, &dir.join("data")).unwrap();
    let hyper = PretrainHyper::desk_default(1);
    let r = pretrain_run::<f32>(
        VariantConfig::tiny_test(),
        &manifest,
        &hyper,
        &dir.join("run"),
        None,
    );
    assert!(r.is_err());
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn checkpoint_shape_mismatch_is_rejected() {
    let dir = tmp_dir("mismatch");
    let manifest = tiny_cls_manifest(&dir.join("data"), 8, 16);
    let mut hyper = PretrainHyper::desk_default(8);
    hyper.epochs = 1;
    let out = dir.join("run");
    pretrain_run::<f32>(VariantConfig::tiny_test(), &manifest, &hyper, &out, None).unwrap();
    // loading tiny-test weights into a T-sized model must fail loudly
    let mut model =
        SegModel::<f32>::new(VariantConfig::t(), 4, HamCfg::default(), 0, 0.02).unwrap();
    let err = model.load_encoder_from(&out.join("last.ckpt"));
    assert!(err.is_err());
    let msg = format!("{}", err.unwrap_err());
    assert!(msg.contains("shape"), "message: {msg}");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn generated_labels_stay_in_class_range() {
    let dir = tmp_dir("labelrange");
    let n_classes = 5;
    let manifest =
        gen_synthetic(33, 12, 32, GenMode::Segment, n_classes, &dir.join("data")).unwrap();
    for s in manifest.load_all().unwrap() {
        match s.target {
            Target::Map { ids, .. } => {
                for &id in &ids {
                    assert!(
                        (id as usize) < n_classes || id == 255,
                        "label {id} out of range"
                    );
                }
            }
            _ => panic!("segment mode expected"),
        }
        for &v in s.rgb.data().iter().chain(s.depth.data().iter()) {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn flip_only_augmentation_preserves_class_set() {
    use dformer_core::data::{augment, AugmentParams};
    let dir = tmp_dir("classset");
    let manifest = gen_synthetic(34, 6, 32, GenMode::Segment, 4, &dir.join("data")).unwrap();
    let mut rng = Rng::new(1);
    let p = AugmentParams {
        flip_p: 1.0,
        scale_lo: 1.0,
        scale_hi: 1.0,
        crop: 32,
    };
    for s in manifest.load_all().unwrap() {
        let a = augment(&s, &mut rng, &p).unwrap();
        let classes = |t: &Target| -> std::collections::BTreeSet<u8> {
            match t {
                Target::Map { ids, .. } => ids.iter().copied().collect(),
                _ => panic!(),
            }
        };
        assert_eq!(classes(&s.target), classes(&a.target));
    }
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn depth_source_rgb_copy_requires_three_channels() {
    let dir = tmp_dir("rgbcopy");
    let manifest = gen_synthetic(2, 2, 32, GenMode::Classify, 2, &dir.join("data")).unwrap();
    let samples = manifest.load_all().unwrap();
    let refs: Vec<&dformer_core::data::RGBDSample> = samples.iter().collect();
    let r = dformer_core::data::stack_batch::<f32>(&refs, 1, DepthSource::RgbCopy);
    assert!(r.is_err());
    let (rgb, depth, _) =
        dformer_core::data::stack_batch::<f32>(&refs, 3, DepthSource::RgbCopy).unwrap();
    assert_eq!(rgb, depth);
    let _ = fs::remove_dir_all(&dir);
}
