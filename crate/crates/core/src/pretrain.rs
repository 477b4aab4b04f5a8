//! RGB-D classification pretraining: classifier head over the stage-4 RGB
//! features, cosine-warmup AdamW loop with label smoothing and stochastic
//! depth, per-epoch top-1 accuracy and resumable checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{stack_batch, DatasetManifest, DepthSource, RGBDSample};
use crate::encoder::checkpoint::{
    find_entry, load_matching, read_checkpoint, save_checkpoint, ENCODER_PREFIXES,
};
use crate::encoder::{encoder_forward, EncoderWeights, VariantConfig};
use crate::error::{Error, Result};
use crate::nn::{linear_w, ConvW, Forward, Mode};
use crate::optim::{AdamW, AdamWCfg, Schedule};
use crate::params::ParamStore;
use crate::rdt::RdtTensor;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

/// Global average pooling over the stage-4 RGB features followed by one
/// linear layer.
#[derive(Clone, Debug)]
pub struct ClassifierWeights {
    pub linear: ConvW,
    pub num_classes: usize,
}

impl ClassifierWeights {
    pub fn init<E: Float>(
        store: &mut ParamStore<E>,
        cfg: &VariantConfig,
        num_classes: usize,
        rng: &mut Rng,
        init_std: f64,
    ) -> Result<Self> {
        Ok(ClassifierWeights {
            linear: linear_w(
                store,
                rng,
                "head.linear",
                cfg.stages[3].rgb_channels,
                num_classes,
                init_std,
            )?,
            num_classes,
        })
    }
}

/// Spatial mean then linear: [B, C, h, w] -> [B, num_classes].
pub fn classifier_forward<E: Float>(
    ctx: &mut Forward<'_, E>,
    stage4_rgb: Var,
    head: &ClassifierWeights,
) -> Result<Var> {
    let b = ctx.tape.dims(stage4_rgb)[0];
    let pooled = ctx.tape.adaptive_avg_pool2d(stage4_rgb, (1, 1))?;
    let logits = ctx.linear(pooled, &head.linear)?;
    ctx.tape.reshape(logits, vec![b, head.num_classes])
}

#[derive(Clone, Debug)]
pub struct PretrainHyper {
    pub epochs: u64,
    pub batch: usize,
    pub base_lr: f64,
    /// Scale base_lr linearly by batch/1024 (the large-batch recipe).
    pub scale_lr: bool,
    pub warmup_epochs: u64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub init_std: f64,
    pub drop_path_override: Option<f64>,
    pub depth_source: DepthSource,
    /// Stop (checkpointing as usual) after this many epochs while keeping
    /// the schedule spanned over `epochs`; models an interrupted run that a
    /// later `resume` continues.
    pub stop_after_epochs: Option<u64>,
    /// Evaluate top-1 every N epochs (the final epoch is always evaluated).
    pub top1_every: u64,
    /// Random horizontal flip probability during training.
    pub flip_p: f64,
}

impl PretrainHyper {
    pub fn desk_default(seed: u64) -> Self {
        PretrainHyper {
            epochs: 30,
            batch: 16,
            base_lr: 1e-3,
            scale_lr: true,
            warmup_epochs: 5,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            seed,
            init_std: 0.02,
            drop_path_override: None,
            depth_source: DepthSource::Depth,
            stop_after_epochs: None,
            top1_every: 1,
            flip_p: 0.5,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        if self.scale_lr {
            self.base_lr * self.batch as f64 / 1024.0
        } else {
            self.base_lr
        }
    }
}

pub struct ClsModel<E: Float> {
    pub store: ParamStore<E>,
    pub enc: EncoderWeights,
    pub head: ClassifierWeights,
    pub cfg: VariantConfig,
}

impl<E: Float> ClsModel<E> {
    pub fn new(
        cfg: VariantConfig,
        num_classes: usize,
        seed: u64,
        init_std: f64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(seed, 0x5745_4947);
        let enc = EncoderWeights::init(&mut store, &cfg, &mut rng, init_std)?;
        let head = ClassifierWeights::init(&mut store, &cfg, num_classes, &mut rng, init_std)?;
        Ok(ClsModel {
            store,
            enc,
            head,
            cfg,
        })
    }

    pub fn logits_eval(&mut self, rgb: &Tensor<E>, depth: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let mut ctx = Forward::new(&mut tape, &mut self.store, Mode::Eval, &mut rng);
        let stages = encoder_forward(&mut ctx, rgb, depth, &self.enc, &self.cfg)?;
        let logits = classifier_forward(&mut ctx, stages[3].rgb, &self.head)?;
        Ok(tape.value(logits))
    }
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub mean_loss: f64,
    pub top1: f64,
}

#[derive(Debug)]
pub struct PretrainSummary {
    pub best_top1: f64,
    pub final_top1: f64,
    pub first_loss: f64,
    pub epochs: Vec<EpochMetrics>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn u64s_to_bytes(vals: &[u64]) -> Vec<u8> {
    vals.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn bytes_to_u64s(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn save_train_checkpoint<E: Float>(
    path: &Path,
    store: &ParamStore<E>,
    cfg: &VariantConfig,
    opt: &AdamW<E>,
    state: &[u64; 3],
    best: f64,
    num_classes: usize,
) -> Result<()> {
    let cfg_json = serde_json::to_vec(cfg)
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    let mut extras = vec![
        (
            "__config".to_string(),
            RdtTensor::U8 {
                dims: vec![cfg_json.len()],
                data: cfg_json,
            },
        ),
        (
            "__state.counters".to_string(),
            RdtTensor::U8 {
                dims: vec![24],
                data: u64s_to_bytes(state),
            },
        ),
        (
            "__state.best".to_string(),
            RdtTensor::F32 {
                dims: vec![1],
                data: vec![best as f32],
            },
        ),
        (
            "__meta.num_classes".to_string(),
            RdtTensor::I32 {
                dims: vec![1],
                data: vec![num_classes as i32],
            },
        ),
    ];
    for id in store.ids() {
        if let Some((m, v)) = opt.moments(id) {
            extras.push((
                format!("__opt.m.{}", store.name(id)),
                RdtTensor::from_tensor(m),
            ));
            extras.push((
                format!("__opt.v.{}", store.name(id)),
                RdtTensor::from_tensor(v),
            ));
        }
    }
    save_checkpoint(path, store, &extras)
}

/// Classification pretraining. Returns per-epoch metrics and writes
/// `metrics.csv` (lines `epoch,step,lr,loss,top1`), `best.ckpt` and
/// `last.ckpt` under `out_dir`. `resume` restarts from a `last.ckpt`
/// written by an earlier run; subsequent steps are bitwise identical to an
/// uninterrupted run.
pub fn pretrain_run<E: Float>(
    mut cfg: VariantConfig,
    manifest: &DatasetManifest,
    hyper: &PretrainHyper,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainSummary> {
    if manifest.is_empty() {
        return Err(Error::Dataset("pretrain: dataset is empty".into()));
    }
    if let Some(dp) = hyper.drop_path_override {
        cfg.drop_path_max = dp;
    }
    if hyper.depth_source == DepthSource::RgbCopy {
        cfg.depth_in_channels = 3;
    }
    fs::create_dir_all(out_dir)?;
    let num_classes = manifest.num_classes;
    let samples = manifest.load_all()?;
    for s in &samples {
        if !matches!(s.target, crate::data::Target::Class(_)) {
            return Err(Error::Dataset(
                "pretrain expects a classification dataset".into(),
            ));
        }
    }

    let mut model = ClsModel::<E>::new(cfg.clone(), num_classes, hyper.seed, hyper.init_std)?;
    let steps_per_epoch = (samples.len().div_ceil(hyper.batch)) as u64;
    let total_steps = hyper.epochs * steps_per_epoch;
    let schedule = Schedule::CosineWarmup {
        base_lr: hyper.effective_lr(),
        warmup_steps: hyper.warmup_epochs * steps_per_epoch,
        total_steps,
    };
    let mut opt = AdamW::new(AdamWCfg::default());
    let mut rng = Rng::stream(hyper.seed, 0x5052_4554);
    let mut start_epoch = 0u64;
    let mut step = 0u64;
    let mut best = f64::NEG_INFINITY;

    if let Some(resume_path) = resume {
        let entries = read_checkpoint(resume_path)?;
        let resume_cfg = crate::segmentation::config_from_entries(&entries)?;
        if resume_cfg != cfg {
            return Err(Error::Checkpoint(
                "resume checkpoint was written for a different config".into(),
            ));
        }
        load_matching(&mut model.store, &entries, &ENCODER_PREFIXES)?;
        let counters = match find_entry(&entries, "__state.counters") {
            Some(RdtTensor::U8 { data, .. }) => bytes_to_u64s(data),
            _ => return Err(Error::Checkpoint("resume: missing __state.counters".into())),
        };
        step = counters[0];
        start_epoch = counters[1];
        rng = Rng::from_state(counters[2]);
        best = match find_entry(&entries, "__state.best") {
            Some(RdtTensor::F32 { data, .. }) => data[0] as f64,
            _ => f64::NEG_INFINITY,
        };
        opt.set_step_count(step);
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            if let (Some(m), Some(v)) = (
                find_entry(&entries, &format!("__opt.m.{name}")),
                find_entry(&entries, &format!("__opt.v.{name}")),
            ) {
                opt.set_moments(id, m.to_tensor()?, v.to_tensor()?);
            }
        }
    }

    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let metrics_path = out_dir.join("metrics.csv");
    let mut log = if resume.is_some() && metrics_path.exists() {
        fs::read_to_string(&metrics_path)?
    } else {
        String::from("epoch,step,lr,loss,top1\n")
    };

    let mut epochs = Vec::new();
    let mut first_loss = f64::NAN;
    let mut final_top1 = 0.0;
    let end_epoch = hyper
        .stop_after_epochs
        .map(|s| s.min(hyper.epochs))
        .unwrap_or(hyper.epochs);
    for epoch in start_epoch..end_epoch {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        let mut lr = 0.0;
        for chunk in order.chunks(hyper.batch) {
            // flip augmentation draws are part of the training rng stream
            let flipped: Vec<RGBDSample> = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    if hyper.flip_p > 0.0 && rng.bernoulli(hyper.flip_p) {
                        RGBDSample {
                            rgb: s.rgb.flip_last_axis(),
                            depth: s.depth.flip_last_axis(),
                            target: s.target.clone(),
                        }
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let refs: Vec<&RGBDSample> = flipped.iter().collect();
            let (rgb, depth, targets) =
                stack_batch::<E>(&refs, cfg.depth_in_channels, hyper.depth_source)?;
            lr = schedule.lr_at(step)?;
            let mut tape = Tape::new();
            let mut ctx = Forward::new(&mut tape, &mut model.store, Mode::Train, &mut rng);
            let stages = encoder_forward(&mut ctx, &rgb, &depth, &model.enc, &model.cfg)?;
            let logits = classifier_forward(&mut ctx, stages[3].rgb, &model.head)?;
            let loss = tape.cross_entropy(logits, &targets, hyper.label_smoothing, None)?;
            let loss_v = tape.data(loss)[0].to_f64();
            if !loss_v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretrain loss at step {step} (epoch {epoch})"
                )));
            }
            if !tape.all_finite() {
                return Err(Error::NonFinite(format!(
                    "pretrain forward activations at step {step}"
                )));
            }
            if first_loss.is_nan() {
                first_loss = loss_v;
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut model.store, &grads, lr, hyper.weight_decay)?;
            loss_sum += loss_v;
            loss_n += 1;
            step += 1;
        }
        // top-1 on the training set, eval mode (periodic + final epoch)
        let eval_now = epoch + 1 == end_epoch
            || (hyper.top1_every > 0 && (epoch + 1) % hyper.top1_every == 0);
        let top1 = if eval_now {
            Some(top1_accuracy(&mut model, &samples, hyper.batch, hyper.depth_source)?)
        } else {
            None
        };
        let mean_loss = loss_sum / loss_n.max(1) as f64;
        let top1_s = top1.map(|t| t.to_string()).unwrap_or_default();
        writeln!(log, "{},{},{},{},{}", epoch, step, lr, mean_loss, top1_s).unwrap();
        if let Some(t) = top1 {
            final_top1 = t;
            epochs.push(EpochMetrics {
                epoch,
                step,
                lr,
                mean_loss,
                top1: t,
            });
        }
        let state = [step, epoch + 1, rng.state()];
        if top1.map(|t| t > best).unwrap_or(false) {
            best = top1.unwrap();
            save_train_checkpoint(&best_path, &model.store, &cfg, &opt, &state, best, num_classes)?;
        }
        save_train_checkpoint(&last_path, &model.store, &cfg, &opt, &state, best, num_classes)?;
        fs::write(&metrics_path, &log)?;
    }
    Ok(PretrainSummary {
        best_top1: best,
        final_top1,
        first_loss,
        epochs,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

/// Top-1 accuracy in eval mode. Invariant to positive rescaling of the
/// logits (pure argmax).
pub fn top1_accuracy<E: Float>(
    model: &mut ClsModel<E>,
    samples: &[RGBDSample],
    batch: usize,
    depth_source: DepthSource,
) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch) {
        let refs: Vec<&RGBDSample> = chunk.iter().map(|&i| &samples[i]).collect();
        let (rgb, depth, targets) =
            stack_batch::<E>(&refs, model.cfg.depth_in_channels, depth_source)?;
        let logits = model.logits_eval(&rgb, &depth)?;
        let c = model.head.num_classes;
        for (b, &t) in targets.iter().enumerate() {
            let pred = crate::segmentation::argmax_strided(logits.data(), b * c, c, 1);
            if pred == t {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
