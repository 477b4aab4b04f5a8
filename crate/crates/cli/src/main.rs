//! Command-line driver for the RGB-D encoder-decoder pipeline:
//! dataset generation, pretraining, finetuning, evaluation, gradient
//! verification, parameter accounting and ablation sweeps.

mod ablate;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dformer_core::data::{gen_synthetic, synth::GenMode, DatasetManifest, DepthSource};
use dformer_core::encoder::{count_parameters, flops_proxy, reference_params};
use dformer_core::pretrain::{pretrain_run, PretrainHyper};
use dformer_core::segmentation::{
    evaluate_miou, finetune_run, render_report, FinetuneHyper, InitFrom, SegModel, MS_SCALES,
};
use dformer_core::tensor::Float;
use dformer_core::{Error, Result};

use config::{echo_config, load_file_overrides, ModelOverrides};

#[derive(Parser)]
#[command(
    name = "dformer",
    version,
    about = "Dual-branch RGB-D encoder-decoder: train, evaluate and verify at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic RGB-D dataset (classification or segmentation)
    GenData(GenArgs),
    /// Classification pretraining of the dual-branch encoder
    Pretrain(PretrainArgs),
    /// Segmentation (or saliency) finetuning
    Finetune(FinetuneArgs),
    /// Evaluate a finetuned checkpoint on a dataset
    Eval(EvalArgs),
    /// Full-suite finite-difference gradient verification
    Gradcheck(GradcheckArgs),
    /// Parameter count and reference-budget deviation for a variant
    Params(ParamsArgs),
    /// Ablation sweep over model switches (gen -> finetune -> eval per cell)
    Ablate(ablate::AblateArgs),
}

/// Model-shape switches, shared by the training subcommands. Values from
/// `--config FILE` (JSON) fill unset flags; explicit flags win.
#[derive(Args, Clone, Debug)]
struct ModelFlags {
    /// Model variant [default: tiny-test]
    #[arg(long, value_parser = ["T", "S", "B", "L", "tiny-test"])]
    variant: Option<String>,
    /// Attention fusion for queries/keys/values [default: q]
    #[arg(long, value_parser = ["none", "q", "qkv"])]
    q_fusion: Option<String>,
    /// Local-gate fusion manner [default: hadamard]
    #[arg(long, value_parser = ["hadamard", "add", "concat"])]
    lea_fusion: Option<String>,
    /// Depth/RGB channel ratio, e.g. 1/2 or 0.5 [default: variant's]
    #[arg(long)]
    channel_ratio: Option<String>,
    /// Attention query pooling size [default: 7]
    #[arg(long)]
    gaa_pool_k: Option<usize>,
    /// Local-gate depthwise kernel [default: 7]
    #[arg(long)]
    lea_kernel: Option<usize>,
    /// Base-module depthwise kernel [default: 7]
    #[arg(long)]
    base_kernel: Option<usize>,
    /// Depth stem input channels [default: 1]
    #[arg(long)]
    depth_in_channels: Option<usize>,
    /// Stochastic-depth max rate [default: variant's]
    #[arg(long)]
    drop_path: Option<f64>,
    /// Disable the matrix-factorization decoder context [default: enabled]
    #[arg(long)]
    no_ham: bool,
    /// Truncated-normal init std [default: 0.02]
    #[arg(long)]
    init_std: Option<f64>,
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelFlags {
    fn overrides(&self) -> Result<ModelOverrides> {
        let file = load_file_overrides(self.config.as_deref())?;
        let cli = ModelOverrides {
            variant: self.variant.clone(),
            q_fusion: self.q_fusion.clone(),
            lea_fusion: self.lea_fusion.clone(),
            channel_ratio: self.channel_ratio.clone(),
            gaa_pool_k: self.gaa_pool_k,
            lea_kernel: self.lea_kernel,
            base_kernel: self.base_kernel,
            depth_in_channels: self.depth_in_channels,
            drop_path: self.drop_path,
            no_ham: if self.no_ham { Some(true) } else { None },
            init_std: self.init_std,
        };
        Ok(cli.merge_over(&file))
    }
}

fn parse_precision(s: &Option<String>) -> Result<String> {
    let p = s.clone().unwrap_or_else(|| "f32".to_string());
    if p == "f32" || p == "f64" {
        Ok(p)
    } else {
        Err(Error::Config(format!(
            "unknown precision '{p}' (expected f32 or f64)"
        )))
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output dataset directory (required)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of samples [default: 64]
    #[arg(long)]
    n_samples: Option<usize>,
    /// Square image size, multiple of 32 [default: 64]
    #[arg(long)]
    size: Option<usize>,
    /// Dataset flavor [default: segment]
    #[arg(long, value_parser = ["classify", "segment"])]
    mode: Option<String>,
    /// Number of classes (includes background for segment) [default: 4]
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Serialize)]
struct GenEffective {
    command: &'static str,
    out: PathBuf,
    seed: u64,
    n_samples: usize,
    size: usize,
    mode: String,
    classes: usize,
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let out = config::out_path(&a.out, "--out")?;
    let eff = GenEffective {
        command: "gen-data",
        out: out.clone(),
        seed: a.seed.unwrap_or(0),
        n_samples: a.n_samples.unwrap_or(64),
        size: a.size.unwrap_or(64),
        mode: a.mode.unwrap_or_else(|| "segment".into()),
        classes: a.classes.unwrap_or(4),
    };
    let mode = GenMode::parse(&eff.mode)?;
    echo_config(&out, &eff)?;
    let manifest = gen_synthetic(eff.seed, eff.n_samples, eff.size, mode, eff.classes, &out)?;
    println!(
        "generated {} samples ({}x{}, {} classes) under {}",
        manifest.len(),
        eff.size,
        eff.size,
        eff.classes,
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Dataset directory from gen-data (required)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output run directory (required)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Compute precision [default: f32]
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// Training epochs [default: 30]
    #[arg(long)]
    epochs: Option<u64>,
    /// Batch size [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// Base learning rate [default: 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// Scale lr linearly by batch/1024 [default: true]
    #[arg(long)]
    scale_lr: Option<bool>,
    /// Linear warmup epochs [default: 5]
    #[arg(long)]
    warmup_epochs: Option<u64>,
    /// Weight decay [default: 0.05]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Label smoothing [default: 0.1]
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// Resume from a last.ckpt written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after N epochs while keeping the full schedule (for later resume)
    #[arg(long)]
    stop_after_epochs: Option<u64>,
    /// Depth-free pretraining: feed the RGB image to a 3-channel depth stem
    #[arg(long)]
    rgb_rgb: bool,
    /// Random horizontal flip augmentation [default: true]
    #[arg(long)]
    flip: Option<bool>,
}

#[derive(Serialize)]
struct PretrainEffective {
    command: &'static str,
    data: PathBuf,
    out: PathBuf,
    seed: u64,
    precision: String,
    epochs: u64,
    batch: usize,
    lr: f64,
    scale_lr: bool,
    warmup_epochs: u64,
    weight_decay: f64,
    label_smoothing: f64,
    rgb_rgb: bool,
    model: ModelOverrides,
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let data = config::out_path(&a.data, "--data")?;
    let out = config::out_path(&a.out, "--out")?;
    let overrides = a.model.overrides()?;
    let eff = PretrainEffective {
        command: "pretrain",
        data: data.clone(),
        out: out.clone(),
        seed: a.seed.unwrap_or(0),
        precision: parse_precision(&a.precision)?,
        epochs: a.epochs.unwrap_or(30),
        batch: a.batch.unwrap_or(16),
        lr: a.lr.unwrap_or(1e-3),
        scale_lr: a.scale_lr.unwrap_or(true),
        warmup_epochs: a.warmup_epochs.unwrap_or(5),
        weight_decay: a.weight_decay.unwrap_or(0.05),
        label_smoothing: a.label_smoothing.unwrap_or(0.1),
        rgb_rgb: a.rgb_rgb,
        model: overrides.clone(),
    };
    echo_config(&out, &eff)?;
    let cfg = overrides.resolve()?;
    let manifest = DatasetManifest::load(&data)?;
    let hyper = PretrainHyper {
        epochs: eff.epochs,
        batch: eff.batch,
        base_lr: eff.lr,
        scale_lr: eff.scale_lr,
        warmup_epochs: eff.warmup_epochs,
        weight_decay: eff.weight_decay,
        label_smoothing: eff.label_smoothing,
        seed: eff.seed,
        init_std: overrides.init_std(),
        drop_path_override: overrides.drop_path,
        depth_source: if eff.rgb_rgb {
            DepthSource::RgbCopy
        } else {
            DepthSource::Depth
        },
        stop_after_epochs: a.stop_after_epochs,
        top1_every: 1,
        flip_p: if a.flip.unwrap_or(true) { 0.5 } else { 0.0 },
    };
    let summary = match eff.precision.as_str() {
        "f64" => pretrain_run::<f64>(cfg, &manifest, &hyper, &out, a.resume.as_deref())?,
        _ => pretrain_run::<f32>(cfg, &manifest, &hyper, &out, a.resume.as_deref())?,
    };
    println!(
        "pretrain done: best top-1 {:.4}, final top-1 {:.4}, checkpoints under {}",
        summary.best_top1,
        summary.final_top1,
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Dataset directory from gen-data (required)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output run directory (required)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pretrained encoder checkpoint; omit for random init
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Compute precision [default: f32]
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// Optimizer steps [default: 200]
    #[arg(long)]
    steps: Option<u64>,
    /// Batch size [default: 8]
    #[arg(long)]
    batch: Option<usize>,
    /// Base learning rate (poly decay) [default: 6e-5]
    #[arg(long)]
    lr: Option<f64>,
    /// Weight decay [default: 1e-2]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Poly schedule power [default: 0.9]
    #[arg(long)]
    poly_power: Option<f64>,
    /// Random flip + scale/crop augmentation [default: true]
    #[arg(long)]
    augment: Option<bool>,
    /// Validation fraction of the dataset [default: 0.2]
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Validation cadence in steps; 0 = final only [default: 0]
    #[arg(long)]
    eval_every: Option<u64>,
    /// Train the decoder only
    #[arg(long)]
    freeze_encoder: bool,
    /// Multi-scale flip evaluation at the end [default: false]
    #[arg(long)]
    msflip: bool,
    /// Binary-saliency head and metrics instead of semantic classes
    #[arg(long)]
    saliency: bool,
}

#[derive(Serialize)]
struct FinetuneEffective {
    command: &'static str,
    data: PathBuf,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
    seed: u64,
    precision: String,
    steps: u64,
    batch: usize,
    lr: f64,
    weight_decay: f64,
    poly_power: f64,
    augment: bool,
    val_fraction: f64,
    eval_every: u64,
    freeze_encoder: bool,
    msflip: bool,
    saliency: bool,
    model: ModelOverrides,
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let data = config::out_path(&a.data, "--data")?;
    let out = config::out_path(&a.out, "--out")?;
    let overrides = a.model.overrides()?;
    let eff = FinetuneEffective {
        command: "finetune",
        data: data.clone(),
        out: out.clone(),
        checkpoint: a.checkpoint.clone(),
        seed: a.seed.unwrap_or(0),
        precision: parse_precision(&a.precision)?,
        steps: a.steps.unwrap_or(200),
        batch: a.batch.unwrap_or(8),
        lr: a.lr.unwrap_or(6e-5),
        weight_decay: a.weight_decay.unwrap_or(1e-2),
        poly_power: a.poly_power.unwrap_or(0.9),
        augment: a.augment.unwrap_or(true),
        val_fraction: a.val_fraction.unwrap_or(0.2),
        eval_every: a.eval_every.unwrap_or(0),
        freeze_encoder: a.freeze_encoder,
        msflip: a.msflip,
        saliency: a.saliency,
        model: overrides.clone(),
    };
    echo_config(&out, &eff)?;
    let cfg = overrides.resolve()?;
    let manifest = DatasetManifest::load(&data)?;
    let size = {
        let s = manifest.load_sample(0)?;
        s.hw().0
    };
    let hyper = FinetuneHyper {
        steps: eff.steps,
        batch: eff.batch,
        base_lr: eff.lr,
        weight_decay: eff.weight_decay,
        poly_power: eff.poly_power,
        seed: eff.seed,
        init_std: overrides.init_std(),
        augment: if eff.augment {
            Some(dformer_core::data::AugmentParams::finetune_default(size))
        } else {
            None
        },
        val_fraction: eff.val_fraction,
        eval_every: eff.eval_every,
        freeze_encoder: eff.freeze_encoder,
        msflip_final: eff.msflip,
        saliency: eff.saliency,
        drop_path_override: overrides.drop_path,
        eval_train: true,
    };
    let init = match &eff.checkpoint {
        Some(p) => InitFrom::Pretrained(p),
        None => InitFrom::Random,
    };
    fn run<E: Float>(
        cfg: dformer_core::encoder::VariantConfig,
        ham: dformer_core::segmentation::HamCfg,
        init: InitFrom<'_>,
        manifest: &DatasetManifest,
        hyper: &FinetuneHyper,
        out: &std::path::Path,
    ) -> Result<String> {
        let (_, report) = finetune_run::<E>(cfg, ham, init, manifest, hyper, Some(out))?;
        Ok(match report.saliency_mae_maxf {
            Some((mae, maxf)) => format!("finetune done: MAE {mae:.4}, max-F {maxf:.4}"),
            None => format!(
                "finetune done: val mIoU {:.4}{}, train mIoU {:.4}",
                report.val_miou_single,
                report
                    .val_miou_msflip
                    .map(|v| format!(", ms-flip {v:.4}"))
                    .unwrap_or_default(),
                report.train_miou
            ),
        })
    }
    let msg = match eff.precision.as_str() {
        "f64" => run::<f64>(cfg, overrides.ham(), init, &manifest, &hyper, &out)?,
        _ => run::<f32>(cfg, overrides.ham(), init, &manifest, &hyper, &out)?,
    };
    println!("{msg}; artifacts under {}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory (required)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Finetuned checkpoint to evaluate (required)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for the report (required)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also evaluate with multi-scale flip inference [default: false]
    #[arg(long)]
    msflip: bool,
    /// Compute precision [default: f32]
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
}

#[derive(Serialize)]
struct EvalEffective {
    command: &'static str,
    data: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
    msflip: bool,
    precision: String,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let data = config::out_path(&a.data, "--data")?;
    let ckpt = a
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("missing required flag --checkpoint".into()))?;
    let out = config::out_path(&a.out, "--out")?;
    let eff = EvalEffective {
        command: "eval",
        data: data.clone(),
        checkpoint: ckpt.clone(),
        out: out.clone(),
        msflip: a.msflip,
        precision: parse_precision(&a.precision)?,
    };
    echo_config(&out, &eff)?;
    let manifest = DatasetManifest::load(&data)?;

    fn run<E: Float>(
        ckpt: &std::path::Path,
        manifest: &DatasetManifest,
        msflip: bool,
    ) -> Result<(String, String)> {
        let model = SegModel::<E>::from_checkpoint(ckpt)?;
        let samples = manifest.load_all()?;
        let all: Vec<usize> = (0..samples.len()).collect();
        let cm = evaluate_miou(&model, &samples, &all, manifest.num_classes, None)?;
        let (single, per_class) = cm.miou()?;
        let ms = if msflip {
            let cm = evaluate_miou(
                &model,
                &samples,
                &all,
                manifest.num_classes,
                Some((&MS_SCALES, true)),
            )?;
            Some(cm.miou()?.0)
        } else {
            None
        };
        let params = model.store.trainable_scalars();
        let text = render_report(&model.cfg.name, params, single, ms, &per_class);
        let msg = format!(
            "eval: mIoU {single:.4}{}",
            ms.map(|v| format!(", ms-flip {v:.4}")).unwrap_or_default()
        );
        Ok((text, msg))
    }
    let (text, msg) = match eff.precision.as_str() {
        "f64" => run::<f64>(&ckpt, &manifest, eff.msflip)?,
        _ => run::<f32>(&ckpt, &manifest, eff.msflip)?,
    };
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("report.txt"), &text)?;
    println!("{msg}; report under {}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Compute precision; the finite-difference suite requires f64
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// Seed for shape/probe randomization [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let precision = a.precision.unwrap_or_else(|| "f64".to_string());
    if precision != "f64" {
        return Err(Error::Config(
            "gradcheck needs --precision f64 (finite differences are run in 64-bit)".into(),
        ));
    }
    let seed = a.seed.unwrap_or(0);
    let results = dformer_core::verify::full_suite(seed)?;
    let mut worst = 0.0f64;
    for r in &results {
        println!("{:<45} max rel err {:.3e}", r.name, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    println!("worst over suite: {worst:.3e} (threshold 1e-5)");
    if worst > 1e-5 {
        return Err(Error::InvalidArg(format!(
            "gradient check failed: {worst:.3e} > 1e-5"
        )));
    }
    Ok(())
}

#[derive(Args, Debug)]
struct ParamsArgs {
    /// Segmentation classes for the decoder head [default: 40]
    #[arg(long)]
    classes: Option<usize>,
    /// Count the encoder only (reference budgets include the decoder)
    #[arg(long)]
    no_decoder: bool,
    /// Input size for the compute proxy [default: 64]
    #[arg(long)]
    input_size: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let variant = a
        .model
        .variant
        .clone()
        .ok_or_else(|| Error::Config("missing required flag --variant".into()))?;
    let overrides = a.model.overrides()?;
    let cfg = overrides.resolve()?;
    let classes = a.classes.unwrap_or(40);
    let include_decoder = !a.no_decoder;
    let count = count_parameters(&cfg, include_decoder, classes)?;
    let size = a.input_size.unwrap_or(64);
    let flops = flops_proxy(&cfg, (size, size), include_decoder, classes);
    println!(
        "variant {} ({}): {} parameters, compute proxy {} MACs at {}x{}",
        variant,
        if include_decoder {
            format!("encoder+decoder, {classes} classes")
        } else {
            "encoder only".to_string()
        },
        count,
        flops,
        size,
        size
    );
    match reference_params(&variant) {
        Some(reference) if include_decoder => {
            let dev = (count as f64 - reference) / reference * 100.0;
            println!(
                "reference budget {:.1}M, deviation {:+.1}% (fusion-projection and norm choices account for the gap)",
                reference / 1e6,
                dev
            );
            println!("params={count} reference={reference} deviation_pct={dev:.2}");
        }
        _ => {
            println!("params={count}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Params(a) => cmd_params(a),
        Cmd::Ablate(a) => ablate::cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
