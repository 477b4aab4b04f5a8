//! Full-suite finite-difference verification: every differentiable
//! primitive on randomized shapes, plus a one-block-per-stage tiny
//! encoder-decoder model, all in f64.

use crate::data::IGNORE_INDEX;
use crate::encoder::{encoder_forward, EncoderWeights, VariantConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, rel_err};
use crate::nn::{Forward, Mode};
use crate::params::ParamStore;
use crate::pretrain::{classifier_forward, ClassifierWeights};
use crate::rng::Rng;
use crate::segmentation::{decoder_forward, DecoderWeights, HamCfg};
use crate::tape::{GradStore, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

const FD_H: f64 = 1e-5;

fn rand_t(rng: &mut Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.uniform(lo, hi))
}

/// Gradient checks for each tape primitive over `reps` random shapes.
pub fn primitive_suite(seed: u64, reps: usize) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::stream(seed, 0x5052494D);
    let mut out: Vec<CheckResult> = Vec::new();
    let record = |name: &str, err: f64, out: &mut Vec<CheckResult>| {
        match out.iter_mut().find(|c| c.name == name) {
            Some(c) => c.max_rel_err = c.max_rel_err.max(err),
            None => out.push(CheckResult {
                name: name.to_string(),
                max_rel_err: err,
            }),
        }
    };

    for _ in 0..reps {
        // add / scale / hadamard / gelu / sigmoid on a shared random shape
        let dims = vec![1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(4)];
        let a = rand_t(&mut rng, &dims, -2.0, 2.0);
        let b = rand_t(&mut rng, &dims, -2.0, 2.0);
        let c = rng.uniform(-2.0, 2.0);
        let err = grad_check(
            &move |t, v| {
                let s = t.add(v[0], v[1])?;
                let s = t.scale(s, c)?;
                let h = t.hadamard(s, v[0])?;
                let g = t.gelu(h)?;
                let g = t.sigmoid(g)?;
                t.sum_all(g)
            },
            &[a, b],
            FD_H,
            12,
            &mut rng,
        )?;
        record("add/scale/hadamard/gelu/sigmoid", err, &mut out);

        // matmul, all transpose layouts
        let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let ad = if ta { vec![k, m] } else { vec![m, k] };
            let bd = if tb { vec![n, k] } else { vec![k, n] };
            let a = rand_t(&mut rng, &ad, -1.0, 1.0);
            let b = rand_t(&mut rng, &bd, -1.0, 1.0);
            let err = grad_check(
                &move |t, v| {
                    let p = t.matmul_tt(v[0], v[1], ta, tb)?;
                    t.sum_all(p)
                },
                &[a, b],
                FD_H,
                10,
                &mut rng,
            )?;
            record("matmul", err, &mut out);
        }

        // batched matmul
        let nb = 1 + rng.below(3);
        let a = rand_t(&mut rng, &[nb, m, k], -1.0, 1.0);
        let b = rand_t(&mut rng, &[nb, k, n], -1.0, 1.0);
        let err = grad_check(
            &move |t, v| {
                let p = t.bmm(v[0], v[1], false, false)?;
                t.mean_all(p)
            },
            &[a, b],
            FD_H,
            10,
            &mut rng,
        )?;
        record("bmm", err, &mut out);

        // conv2d: standard, strided, grouped, depthwise
        for (cin, cout, kk, stride, groups) in [
            (3, 4, 3, 1, 1),
            (4, 6, 3, 2, 2),
            (5, 5, 3, 1, 5),
            (2, 4, 1, 1, 1),
        ] {
            let h = kk + rng.below(5);
            let w = kk + rng.below(5);
            let nb2 = 1 + rng.below(2);
            let x = rand_t(&mut rng, &[nb2, cin, h, w], -1.0, 1.0);
            let wt = rand_t(&mut rng, &[cout, cin / groups, kk, kk], -0.7, 0.7);
            let bias = rand_t(&mut rng, &[cout], -0.3, 0.3);
            let err = grad_check(
                &move |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), stride, kk / 2, groups)?;
                    t.sum_all(y)
                },
                &[x, wt, bias],
                FD_H,
                8,
                &mut rng,
            )?;
            record("conv2d", err, &mut out);
        }

        // adaptive pooling + bilinear resize (both up and down)
        let h = 2 + rng.below(7);
        let w = 2 + rng.below(7);
        let cpool = 1 + rng.below(3);
        let x = rand_t(&mut rng, &[1, cpool, h, w], -1.0, 1.0);
        let (oh, ow) = (1 + rng.below(9), 1 + rng.below(9));
        let err = grad_check(
            &move |t, v| {
                let p = t.adaptive_avg_pool2d(v[0], (oh, ow))?;
                let r = t.bilinear_resize(p, (h, w))?;
                t.sum_all(r)
            },
            &[x],
            FD_H,
            14,
            &mut rng,
        )?;
        record("adaptive_avg_pool2d/bilinear_resize", err, &mut out);

        // softmax over every axis of a rank-3 tensor
        let dims = vec![1 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3)];
        for axis in 0..3 {
            let x = rand_t(&mut rng, &dims, -2.0, 2.0);
            let wgt = rand_t(&mut rng, &dims, -1.0, 1.0);
            let err = grad_check(
                &move |t, v| {
                    let s = t.softmax(v[0], axis)?;
                    let m = t.hadamard(s, v[1])?;
                    t.sum_all(m)
                },
                &[x, wgt],
                FD_H,
                12,
                &mut rng,
            )?;
            record("softmax", err, &mut out);
        }

        // batch norm: train and eval modes
        let (bn_b, bn_c, bn_h, bn_w) = (2, 1 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3));
        let x = rand_t(&mut rng, &[bn_b, bn_c, bn_h, bn_w], -2.0, 2.0);
        let gamma = rand_t(&mut rng, &[bn_c], 0.5, 1.5);
        let beta = rand_t(&mut rng, &[bn_c], -0.5, 0.5);
        let err = grad_check(
            &move |t, v| {
                let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                let g = t.gelu(y)?;
                t.sum_all(g)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            FD_H,
            10,
            &mut rng,
        )?;
        record("batch_norm(train)", err, &mut out);
        let rm: Vec<f64> = (0..bn_c).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let rv: Vec<f64> = (0..bn_c).map(|_| rng.uniform(0.5, 2.0)).collect();
        let err = grad_check(
            &move |t, v| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
                t.sum_all(y)
            },
            &[x, gamma, beta],
            FD_H,
            10,
            &mut rng,
        )?;
        record("batch_norm(eval)", err, &mut out);

        // concat along each axis + reshape + permute + mean
        let base = vec![2, 2 + rng.below(2), 3];
        for axis in 0..3 {
            let mut d2 = base.clone();
            d2[axis] = 1 + rng.below(3);
            let a = rand_t(&mut rng, &base, -1.0, 1.0);
            let b = rand_t(&mut rng, &d2, -1.0, 1.0);
            let err = grad_check(
                &move |t, v| {
                    let c = t.concat(&[v[0], v[1]], axis)?;
                    let n = t.data(c).len();
                    let r = t.reshape(c, vec![n])?;
                    t.mean_all(r)
                },
                &[a, b],
                FD_H,
                10,
                &mut rng,
            )?;
            record("concat/reshape/mean_all", err, &mut out);
        }
        let x = rand_t(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let wgt = rand_t(&mut rng, &[2, 2, 3, 2], -1.0, 1.0);
        let err = grad_check(
            &move |t, v| {
                let p = t.permute(v[0], &[3, 0, 1, 2])?;
                let m = t.hadamard(p, v[1])?;
                t.sum_all(m)
            },
            &[x, wgt],
            FD_H,
            10,
            &mut rng,
        )?;
        record("permute", err, &mut out);

        // cross-entropy: plain, smoothed, with ignored positions
        let (b, c) = (2 + rng.below(3), 2 + rng.below(4));
        let logits = rand_t(&mut rng, &[b, c], -2.0, 2.0);
        let targets: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let err = grad_check(
            &move |t, v| t.cross_entropy(v[0], &targets, 0.1, None),
            &[logits],
            FD_H,
            12,
            &mut rng,
        )?;
        record("cross_entropy", err, &mut out);
        let (h2, w2) = (2, 2);
        let logits = rand_t(&mut rng, &[b, c, h2, w2], -2.0, 2.0);
        let targets: Vec<usize> = (0..b * h2 * w2)
            .map(|i| {
                if i % 5 == 0 {
                    IGNORE_INDEX
                } else {
                    rng.below(c)
                }
            })
            .collect();
        let err = grad_check(
            &move |t, v| t.cross_entropy(v[0], &targets, 0.0, Some(IGNORE_INDEX)),
            &[logits],
            FD_H,
            12,
            &mut rng,
        )?;
        record("cross_entropy(ignore)", err, &mut out);

        // binary cross-entropy on logits
        let dims = vec![2, 1, 2, 3];
        let logits = rand_t(&mut rng, &dims, -2.0, 2.0);
        let target = Tensor::from_fn(&dims, |_| f64::from(rng.bernoulli(0.5)));
        let err = grad_check(
            &move |t, v| t.bce_with_logits(v[0], &target),
            &[logits],
            FD_H,
            12,
            &mut rng,
        )?;
        record("bce_with_logits", err, &mut out);

        // stochastic-depth mask (fixed mask constants)
        let bsz = 2 + rng.below(2);
        let x = rand_t(&mut rng, &[bsz, 3, 2, 2], -1.0, 1.0);
        let mask: Vec<f64> = (0..bsz)
            .map(|_| if rng.bernoulli(0.7) { 2.0 } else { 0.0 })
            .collect();
        let err = grad_check(
            &move |t, v| {
                let y = t.drop_path_mask(v[0], mask.clone())?;
                t.sum_all(y)
            },
            &[x],
            FD_H,
            10,
            &mut rng,
        )?;
        record("drop_path", err, &mut out);
    }
    Ok(out)
}

/// Finite-difference check of every trainable parameter of a model built
/// over a parameter store. The forward closure must be deterministic; it is
/// re-run on a fresh clone of the store per evaluation (batch-norm running
/// stats mutate during training-mode forwards).
pub fn fd_check_store<F>(
    template: &ParamStore<f64>,
    forward: F,
    probes_per_tensor: usize,
    rng: &mut Rng,
) -> Result<f64>
where
    F: Fn(&mut ParamStore<f64>, bool) -> Result<(f64, Option<GradStore<f64>>)>,
{
    let mut base = template.clone_store();
    let (l0, grads) = forward(&mut base, true)?;
    let grads = grads.ok_or_else(|| Error::InvalidArg("forward returned no grads".into()))?;
    let mut again = template.clone_store();
    let (l1, _) = forward(&mut again, false)?;
    if l0 != l1 {
        return Err(Error::InvalidArg(format!(
            "model forward is non-deterministic ({l0} vs {l1})"
        )));
    }
    let mut worst = 0.0f64;
    for id in template.ids().collect::<Vec<_>>() {
        if !template.is_trainable(id) {
            continue;
        }
        let dims = template.tensor(id).dims().to_vec();
        let analytic = grads.param_or_zeros(id.index(), &dims);
        let n = template.tensor(id).numel();
        // Probe the largest-gradient coordinates plus one random one. Deep
        // f64 chains carry ~1e-12 rounding noise into each central
        // difference, so near-zero coordinates cannot be judged relatively;
        // they get an absolute agreement check instead (a dropped gradient
        // path would still surface as a large FD against a zero analytic
        // value).
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            analytic.data()[b]
                .abs()
                .partial_cmp(&analytic.data()[a].abs())
                .unwrap()
        });
        let mut coords: Vec<usize> = order.into_iter().take(probes_per_tensor).collect();
        coords.push(rng.below(n));
        coords.dedup();
        for coord in coords {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut s = template.clone_store();
                let v = s.tensor(id).data()[coord];
                s.tensor_mut(id).data_mut()[coord] = v + delta;
                Ok(forward(&mut s, false)?.0)
            };
            // Step-size sweep: truncation error shrinks with h while
            // rounding noise grows with 1/h, and the optimum varies per
            // coordinate. A Richardson combination of the two smallest
            // steps cancels the leading h^2 term.
            let fd_at = |h: f64| -> Result<f64> {
                Ok((eval_at(h)? - eval_at(-h)?) / (2.0 * h))
            };
            let fd_small = fd_at(1e-5)?;
            let fd_mid = fd_at(2e-5)?;
            let richardson = (4.0 * fd_small - fd_mid) / 3.0;
            let candidates = [fd_at(1e-3)?, fd_at(1e-4)?, fd_mid, fd_small, richardson];
            let ad = analytic.data()[coord];
            if ad.abs() < 1e-6 && candidates.iter().all(|f| f.abs() < 1e-6) {
                continue; // numerically zero on both sides
            }
            let e = candidates
                .iter()
                .map(|&fd| rel_err(ad, fd))
                .fold(f64::INFINITY, f64::min);
            if e > worst {
                worst = e;
            }
        }
    }
    Ok(worst)
}

/// Tiny one-block-per-stage encoder + decoder + cross-entropy, training-mode
/// forward (stochastic depth disabled so the function is deterministic).
pub fn model_check(seed: u64, probes_per_tensor: usize) -> Result<CheckResult> {
    let mut cfg = VariantConfig::tiny_test();
    cfg.drop_path_max = 0.0;
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::stream(seed, 0x4D4F44);
    let enc = EncoderWeights::init(&mut store, &cfg, &mut rng, 0.05)?;
    let dec = DecoderWeights::init(&mut store, &cfg, 3, &mut rng, 0.05)?;
    let head = ClassifierWeights::init(&mut store, &cfg, 3, &mut rng, 0.05)?;
    // batch 2: stage 4 of a 32x32 input is 1x1 spatial and training-mode
    // batch norm needs at least two elements per channel
    let (h, w) = (32, 32);
    let rgb = rand_t(&mut rng, &[2, 3, h, w], 0.0, 1.0);
    let depth = rand_t(&mut rng, &[2, 1, h, w], 0.0, 1.0);
    let seg_targets: Vec<usize> = (0..2 * h * w).map(|i| i % 3).collect();
    let cls_targets = vec![1usize, 2];
    let ham = HamCfg::disabled();

    let cfg2 = cfg.clone();
    let enc2 = enc.clone();
    let forward = move |s: &mut ParamStore<f64>, want: bool| -> Result<(f64, Option<GradStore<f64>>)> {
        let mut tape = Tape::new();
        let mut r = Rng::new(0);
        let mut ctx = Forward::new(&mut tape, s, Mode::Train, &mut r);
        let stages = encoder_forward(&mut ctx, &rgb, &depth, &enc2, &cfg2)?;
        let logits = decoder_forward(&mut ctx, &stages, &dec, &ham, (h, w))?;
        let seg_loss = tape.cross_entropy(logits, &seg_targets, 0.1, None)?;
        let cls_logits = classifier_forward(
            &mut Forward::new(&mut tape, s, Mode::Train, &mut r),
            stages[3].rgb,
            &head,
        )?;
        let cls_loss = tape.cross_entropy(cls_logits, &cls_targets, 0.0, None)?;
        let loss = tape.add(seg_loss, cls_loss)?;
        let v = tape.data(loss)[0];
        if want {
            Ok((v, Some(tape.backward(loss)?)))
        } else {
            Ok((v, None))
        }
    };
    let mut probe_rng = Rng::stream(seed, 0x50524F42);
    let err = fd_check_store(&store, forward, probes_per_tensor, &mut probe_rng)?;
    Ok(CheckResult {
        name: "tiny encoder+decoder+heads (train mode)".to_string(),
        max_rel_err: err,
    })
}

/// The full verification suite: primitives plus the tiny model.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = primitive_suite(seed, 5)?;
    results.push(model_check(seed, 4)?);
    Ok(results)
}
