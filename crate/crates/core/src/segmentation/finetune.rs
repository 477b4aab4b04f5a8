//! Segmentation finetuning: AdamW with poly decay over cross-entropy (or
//! binary cross-entropy in saliency mode), flip/scale augmentation, periodic
//! validation and a final optionally multi-scale evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{
    augment, stack_batch, AugmentParams, DatasetManifest, DepthSource, RGBDSample, IGNORE_INDEX,
};
use crate::encoder::{encoder_forward, VariantConfig};
use crate::error::{Error, Result};
use crate::nn::{Forward, Mode};
use crate::optim::{AdamW, AdamWCfg, Schedule};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::{Float, Tensor};
use crate::threads::thread_count;

use super::decoder::{decoder_forward, HamCfg};
use super::infer::SegModel;
use super::metrics::{argmax_strided, saliency_metrics, ConfusionMatrix};

pub const MS_SCALES: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];

#[derive(Clone, Debug)]
pub struct FinetuneHyper {
    pub steps: u64,
    pub batch: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub init_std: f64,
    /// None disables augmentation entirely.
    pub augment: Option<AugmentParams>,
    pub val_fraction: f64,
    /// Validation cadence in steps; 0 = final evaluation only.
    pub eval_every: u64,
    pub freeze_encoder: bool,
    pub msflip_final: bool,
    pub saliency: bool,
    pub drop_path_override: Option<f64>,
    /// Also evaluate train-set mIoU at the end (the overfit checks read it).
    pub eval_train: bool,
}

impl FinetuneHyper {
    pub fn desk_default(seed: u64) -> Self {
        FinetuneHyper {
            steps: 200,
            batch: 8,
            base_lr: 6e-5,
            weight_decay: 1e-2,
            poly_power: 0.9,
            seed,
            init_std: 0.02,
            augment: None,
            val_fraction: 0.2,
            eval_every: 0,
            freeze_encoder: false,
            msflip_final: false,
            saliency: false,
            drop_path_override: None,
            eval_train: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub val_miou_single: f64,
    pub val_miou_msflip: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub train_miou: f64,
    pub final_loss: f64,
    pub saliency_mae_maxf: Option<(f64, f64)>,
    pub param_count: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum InitFrom<'a> {
    Random,
    Pretrained(&'a Path),
}

/// Fixed 80/20-style split by seeded shuffle. `val_fraction == 0` makes
/// train and validation identical (used by the overfit smoke checks).
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::stream(seed, 0x53504C49).shuffle(&mut idx);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return (idx.clone(), idx);
    }
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// One training step; returns the loss.
fn train_step<E: Float>(
    model: &mut SegModel<E>,
    rgb: &Tensor<E>,
    depth: &Tensor<E>,
    targets: &[usize],
    saliency: bool,
    opt: &mut AdamW<E>,
    lr: f64,
    weight_decay: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let (h, w) = (rgb.dims()[2], rgb.dims()[3]);
    let mut tape = Tape::new();
    let mut ctx = Forward::new(&mut tape, &mut model.store, Mode::Train, rng);
    let stages = encoder_forward(&mut ctx, rgb, depth, &model.enc, &model.cfg)?;
    let logits = decoder_forward(&mut ctx, &stages, &model.dec, &model.ham, (h, w))?;
    let loss = if saliency {
        let binary: Vec<E> = targets
            .iter()
            .map(|&t| {
                if t != 0 && t != IGNORE_INDEX {
                    E::ONE
                } else {
                    E::ZERO
                }
            })
            .collect();
        let target_t = Tensor::new(tape.dims(logits).to_vec(), binary)?;
        tape.bce_with_logits(logits, &target_t)?
    } else {
        tape.cross_entropy(logits, targets, 0.0, Some(IGNORE_INDEX))?
    };
    let loss_v = tape.data(loss)[0].to_f64();
    if !loss_v.is_finite() {
        return Err(Error::NonFinite("finetune loss".into()));
    }
    if !tape.all_finite() {
        return Err(Error::NonFinite("finetune forward activations".into()));
    }
    let grads = tape.backward(loss)?;
    opt.step(&mut model.store, &grads, lr, weight_decay)?;
    Ok(loss_v)
}

/// Single- or multi-scale evaluation into one confusion matrix. Fans out
/// over worker threads with per-chunk model clones; the merge is integer
/// addition in chunk order.
pub fn evaluate_miou<E: Float>(
    model: &SegModel<E>,
    samples: &[RGBDSample],
    indices: &[usize],
    num_classes: usize,
    msflip: Option<(&[f64], bool)>,
) -> Result<ConfusionMatrix> {
    let eval_one = |model: &mut SegModel<E>, s: &RGBDSample| -> Result<ConfusionMatrix> {
        let (h, w) = s.hw();
        let (rgb, depth, targets) = stack_batch::<E>(&[s], model.cfg.depth_in_channels, DepthSource::Depth)?;
        let probs = match msflip {
            Some((scales, flip)) => model.msflip_predict(&rgb, &depth, scales, flip)?,
            None => model.predict_probs(&rgb, &depth)?,
        };
        let mut cm = ConfusionMatrix::new(num_classes);
        let mut pred = vec![0usize; h * w];
        for p in 0..h * w {
            pred[p] = argmax_strided(probs.data(), p, num_classes, h * w);
        }
        cm.update(&pred, &targets);
        Ok(cm)
    };
    let workers = thread_count().min(indices.len().max(1));
    let mut total = ConfusionMatrix::new(num_classes);
    if workers <= 1 {
        let mut m = model.clone_model();
        for &i in indices {
            total.merge(&eval_one(&mut m, &samples[i])?);
        }
        return Ok(total);
    }
    let chunk = indices.len().div_ceil(workers);
    let results: Vec<Result<ConfusionMatrix>> = std::thread::scope(|scope| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let mut m = model.clone_model();
                    let mut cm = ConfusionMatrix::new(num_classes);
                    for &i in part {
                        cm.merge(&eval_one(&mut m, &samples[i])?);
                    }
                    Ok(cm)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in results {
        total.merge(&r?);
    }
    Ok(total)
}

/// Mean saliency metrics over the given samples (single scale).
pub fn evaluate_saliency<E: Float>(
    model: &mut SegModel<E>,
    samples: &[RGBDSample],
    indices: &[usize],
) -> Result<(f64, f64)> {
    let mut mae_sum = 0.0;
    let mut f_sum = 0.0;
    for &i in indices {
        let s = &samples[i];
        let (rgb, depth, targets) = stack_batch::<E>(&[s], model.cfg.depth_in_channels, DepthSource::Depth)?;
        let logits = model.predict_logits(&rgb, &depth)?;
        let mut tape = Tape::<E>::new();
        let lv = tape.constant(&logits);
        let probs_v = tape.sigmoid(lv)?;
        let probs = tape.value(probs_v);
        let pred: Vec<f64> = probs.data().iter().map(|v| v.to_f64()).collect();
        let gt: Vec<bool> = targets
            .iter()
            .map(|&t| t != 0 && t != IGNORE_INDEX)
            .collect();
        let (mae, maxf) = saliency_metrics(&pred, &gt)?;
        mae_sum += mae;
        f_sum += maxf;
    }
    let n = indices.len().max(1) as f64;
    Ok((mae_sum / n, f_sum / n))
}

pub fn finetune_run<E: Float>(
    mut cfg: VariantConfig,
    ham: HamCfg,
    init: InitFrom<'_>,
    manifest: &DatasetManifest,
    hyper: &FinetuneHyper,
    out_dir: Option<&Path>,
) -> Result<(SegModel<E>, FinetuneReport)> {
    if manifest.is_empty() {
        return Err(Error::Dataset("finetune: dataset is empty".into()));
    }
    if let Some(dp) = hyper.drop_path_override {
        cfg.drop_path_max = dp;
    }
    let num_classes = if hyper.saliency { 1 } else { manifest.num_classes };
    let mut model = SegModel::<E>::new(cfg, num_classes, ham, hyper.seed, hyper.init_std)?;
    if let InitFrom::Pretrained(path) = init {
        model.load_encoder_from(path)?;
    }
    if hyper.freeze_encoder {
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            if !name.starts_with("decoder.") {
                model.store.set_trainable(id, false);
            }
        }
    }

    let samples = manifest.load_all()?;
    let (train_idx, val_idx) = split_indices(samples.len(), hyper.val_fraction, hyper.seed);
    let schedule = Schedule::Poly {
        base_lr: hyper.base_lr,
        total_steps: hyper.steps,
        power: hyper.poly_power,
    };
    let mut opt = AdamW::new(AdamWCfg::default());
    let mut rng = Rng::stream(hyper.seed, 0x4654_5241);
    let mut order: Vec<usize> = Vec::new();
    let mut log = String::from("step,lr,loss,val_miou\n");
    let mut final_loss = 0.0;
    let eval_classes = manifest.num_classes;
    for step in 0..hyper.steps {
        let mut chosen = Vec::with_capacity(hyper.batch);
        while chosen.len() < hyper.batch {
            if order.is_empty() {
                order = train_idx.clone();
                rng.shuffle(&mut order);
            }
            chosen.push(order.pop().unwrap());
        }
        let batch_samples: Vec<RGBDSample> = chosen
            .iter()
            .map(|&i| match &hyper.augment {
                Some(p) => augment(&samples[i], &mut rng, p),
                None => Ok(samples[i].clone()),
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&RGBDSample> = batch_samples.iter().collect();
        let (rgb, depth, targets) = stack_batch::<E>(&refs, model.cfg.depth_in_channels, DepthSource::Depth)?;
        let lr = schedule.lr_at(step)?;
        final_loss = train_step(
            &mut model,
            &rgb,
            &depth,
            &targets,
            hyper.saliency,
            &mut opt,
            lr,
            hyper.weight_decay,
            &mut rng,
        )?;
        let mut val_s = String::new();
        if hyper.eval_every > 0 && (step + 1) % hyper.eval_every == 0 && !hyper.saliency {
            let cm = evaluate_miou(&model, &samples, &val_idx, eval_classes, None)?;
            let (miou, _) = cm.miou()?;
            write!(val_s, "{miou}").unwrap();
        }
        writeln!(log, "{},{},{},{}", step, lr, final_loss, val_s).unwrap();
    }

    // Final evaluation.
    let (report, report_text) = if hyper.saliency {
        let (mae, maxf) = evaluate_saliency(&mut model, &samples, &val_idx)?;
        let param_count = model.store.trainable_scalars();
        let text = format!(
            "variant\tparams\tmae\tmax_f\n{}\t{}\t{}\t{}\n",
            model.cfg.name, param_count, mae, maxf
        );
        (
            FinetuneReport {
                val_miou_single: 0.0,
                val_miou_msflip: None,
                per_class: Vec::new(),
                train_miou: 0.0,
                final_loss,
                saliency_mae_maxf: Some((mae, maxf)),
                param_count,
            },
            text,
        )
    } else {
        let cm = evaluate_miou(&model, &samples, &val_idx, eval_classes, None)?;
        let (val_miou, per_class) = cm.miou()?;
        let train_miou = if hyper.eval_train {
            evaluate_miou(&model, &samples, &train_idx, eval_classes, None)?.miou()?.0
        } else {
            0.0
        };
        let val_msflip = if hyper.msflip_final {
            let cm = evaluate_miou(
                &model,
                &samples,
                &val_idx,
                eval_classes,
                Some((&MS_SCALES, true)),
            )?;
            Some(cm.miou()?.0)
        } else {
            None
        };
        let param_count = model.store.trainable_scalars();
        let text = render_report(
            &model.cfg.name,
            param_count,
            val_miou,
            val_msflip,
            &per_class,
        );
        (
            FinetuneReport {
                val_miou_single: val_miou,
                val_miou_msflip: val_msflip,
                per_class,
                train_miou,
                final_loss,
                saliency_mae_maxf: None,
                param_count,
            },
            text,
        )
    };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), &log)?;
        fs::write(dir.join("report.txt"), &report_text)?;
        model.save(&dir.join("model.ckpt"))?;
    }
    Ok((model, report))
}

/// Plain-text eval table: variant, params, single/ms-flip mIoU, per-class.
pub fn render_report(
    variant: &str,
    params: usize,
    miou_single: f64,
    miou_msflip: Option<f64>,
    per_class: &[Option<f64>],
) -> String {
    let per: Vec<String> = per_class
        .iter()
        .enumerate()
        .map(|(c, v)| match v {
            Some(x) => format!("{c}:{x:.4}"),
            None => format!("{c}:-"),
        })
        .collect();
    let ms = miou_msflip
        .map(|v| format!("{v}"))
        .unwrap_or_else(|| "-".to_string());
    format!(
        "variant\tparams\tmiou_single\tmiou_msflip\tper_class\n{}\t{}\t{}\t{}\t{}\n",
        variant,
        params,
        miou_single,
        ms,
        per.join(" ")
    )
}
