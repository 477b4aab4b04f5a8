//! Ablation sweeps: a Cartesian sweep over model switches where every cell
//! runs gen -> finetune -> eval under a shared seed and reports
//! (axis values, params, compute proxy, mIoU).

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use dformer_core::data::{gen_synthetic, synth::GenMode, DatasetManifest};
use dformer_core::encoder::{count_parameters, flops_proxy};
use dformer_core::segmentation::{finetune_run, FinetuneHyper, InitFrom};
use dformer_core::{Error, Result};

use crate::config::{echo_config, ModelOverrides};
use crate::ModelFlags;

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Sweep axis as name=v1,v2,... (repeatable). Supported names:
    /// q_fusion, lea_fusion, channel_ratio, gaa_pool_k, lea_kernel,
    /// base_kernel, no_ham
    #[arg(long = "axis", required = true)]
    pub axes: Vec<String>,
    /// Output directory (required)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Shared seed for every cell [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples per cell dataset [default: 16]
    #[arg(long)]
    pub cell_samples: Option<usize>,
    /// Image size per cell [default: 32]
    #[arg(long)]
    pub cell_size: Option<usize>,
    /// Classes per cell dataset [default: 4]
    #[arg(long)]
    pub cell_classes: Option<usize>,
    /// Finetune steps per cell [default: 25]
    #[arg(long)]
    pub cell_steps: Option<u64>,
    /// Finetune batch per cell [default: 4]
    #[arg(long)]
    pub cell_batch: Option<usize>,
    /// Finetune learning rate per cell [default: 1e-3]
    #[arg(long)]
    pub cell_lr: Option<f64>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Clone, Debug)]
struct Axis {
    name: String,
    values: Vec<String>,
}

const SUPPORTED: [&str; 7] = [
    "q_fusion",
    "lea_fusion",
    "channel_ratio",
    "gaa_pool_k",
    "lea_kernel",
    "base_kernel",
    "no_ham",
];

fn parse_axes(specs: &[String]) -> Result<Vec<Axis>> {
    let mut axes = Vec::new();
    for spec in specs {
        let (name, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad --axis '{spec}' (expected name=v1,v2)")))?;
        if !SUPPORTED.contains(&name) {
            return Err(Error::Config(format!(
                "unsupported axis '{name}' (supported: {})",
                SUPPORTED.join(", ")
            )));
        }
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if values.is_empty() || values.iter().any(|v| v.is_empty()) {
            return Err(Error::Config(format!("axis '{name}' has empty values")));
        }
        axes.push(Axis {
            name: name.to_string(),
            values,
        });
    }
    Ok(axes)
}

fn apply(overrides: &ModelOverrides, name: &str, value: &str) -> Result<ModelOverrides> {
    let mut o = overrides.clone();
    match name {
        "q_fusion" => o.q_fusion = Some(value.to_string()),
        "lea_fusion" => o.lea_fusion = Some(value.to_string()),
        "channel_ratio" => o.channel_ratio = Some(value.to_string()),
        "gaa_pool_k" => {
            o.gaa_pool_k = Some(value.parse().map_err(|_| {
                Error::Config(format!("gaa_pool_k value '{value}' is not an integer"))
            })?)
        }
        "lea_kernel" => {
            o.lea_kernel = Some(value.parse().map_err(|_| {
                Error::Config(format!("lea_kernel value '{value}' is not an integer"))
            })?)
        }
        "base_kernel" => {
            o.base_kernel = Some(value.parse().map_err(|_| {
                Error::Config(format!("base_kernel value '{value}' is not an integer"))
            })?)
        }
        "no_ham" => {
            o.no_ham = Some(value.parse().map_err(|_| {
                Error::Config(format!("no_ham value '{value}' is not a bool"))
            })?)
        }
        other => return Err(Error::Config(format!("unsupported axis '{other}'"))),
    }
    Ok(o)
}

#[derive(Serialize)]
struct AblateEffective {
    command: &'static str,
    out: PathBuf,
    seed: u64,
    axes: Vec<String>,
    cell_samples: usize,
    cell_size: usize,
    cell_classes: usize,
    cell_steps: u64,
    cell_batch: usize,
    cell_lr: f64,
    model: ModelOverrides,
}

#[derive(Clone, Debug, Serialize)]
pub struct CellResult {
    pub assignment: Vec<(String, String)>,
    pub params: usize,
    pub flops_proxy: u64,
    pub miou: f64,
}

/// Runs one sweep cell: data generation, finetune from random init, and
/// single-scale validation mIoU.
pub fn run_cell(
    overrides: &ModelOverrides,
    seed: u64,
    cell_dir: &std::path::Path,
    samples: usize,
    size: usize,
    classes: usize,
    steps: u64,
    batch: usize,
    lr: f64,
) -> Result<CellResult> {
    let cfg = overrides.resolve()?;
    let data_dir = cell_dir.join("data");
    gen_synthetic(seed, samples, size, GenMode::Segment, classes, &data_dir)?;
    let manifest = DatasetManifest::load(&data_dir)?;
    let hyper = FinetuneHyper {
        steps,
        batch,
        base_lr: lr,
        weight_decay: 1e-2,
        poly_power: 0.9,
        seed,
        init_std: overrides.init_std(),
        augment: None,
        val_fraction: 0.25,
        eval_every: 0,
        freeze_encoder: false,
        msflip_final: false,
        saliency: false,
        drop_path_override: overrides.drop_path,
        eval_train: false,
    };
    let (model, report) = finetune_run::<f32>(
        cfg.clone(),
        overrides.ham(),
        InitFrom::Random,
        &manifest,
        &hyper,
        Some(cell_dir),
    )?;
    let params = model.store.trainable_scalars();
    let flops = flops_proxy(&cfg, (size, size), true, classes);
    debug_assert_eq!(params, count_parameters(&cfg, true, classes)?);
    Ok(CellResult {
        assignment: Vec::new(),
        params,
        flops_proxy: flops,
        miou: report.val_miou_single,
    })
}

pub fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let out = crate::config::out_path(&a.out, "--out")?;
    let axes = parse_axes(&a.axes)?;
    let base = a.model.overrides()?;
    let eff = AblateEffective {
        command: "ablate",
        out: out.clone(),
        seed: a.seed.unwrap_or(0),
        axes: a.axes.clone(),
        cell_samples: a.cell_samples.unwrap_or(16),
        cell_size: a.cell_size.unwrap_or(32),
        cell_classes: a.cell_classes.unwrap_or(4),
        cell_steps: a.cell_steps.unwrap_or(25),
        cell_batch: a.cell_batch.unwrap_or(4),
        cell_lr: a.cell_lr.unwrap_or(1e-3),
        model: base.clone(),
    };
    echo_config(&out, &eff)?;

    // Cartesian product in axis order.
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in &axes {
        let mut next = Vec::new();
        for cell in &cells {
            for v in &axis.values {
                let mut c = cell.clone();
                c.push((axis.name.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }

    let mut results = Vec::new();
    let mut table = String::from("axis_values\tparams\tflops_proxy\tmiou\n");
    let mut curve = String::from("# params flops_proxy miou\n");
    for assignment in cells {
        let mut overrides = base.clone();
        let mut label_parts = Vec::new();
        for (name, value) in &assignment {
            overrides = apply(&overrides, name, value)?;
            label_parts.push(format!("{name}={value}"));
        }
        let label = label_parts.join(",");
        let cell_dir = out.join(format!(
            "cell_{}",
            label.replace(['=', ',', '/'], "_")
        ));
        let mut cell = run_cell(
            &overrides,
            eff.seed,
            &cell_dir,
            eff.cell_samples,
            eff.cell_size,
            eff.cell_classes,
            eff.cell_steps,
            eff.cell_batch,
            eff.cell_lr,
        )?;
        cell.assignment = assignment;
        println!(
            "{label}: params {} flops {} miou {:.4}",
            cell.params, cell.flops_proxy, cell.miou
        );
        writeln!(
            table,
            "{label}\t{}\t{}\t{}",
            cell.params, cell.flops_proxy, cell.miou
        )
        .unwrap();
        writeln!(curve, "{} {} {}", cell.params, cell.flops_proxy, cell.miou).unwrap();
        results.push(cell);
    }
    std::fs::write(out.join("results.tsv"), &table)?;
    std::fs::write(out.join("curve.dat"), &curve)?;
    println!("sweep complete: {} cells under {}", results.len(), out.display());
    Ok(())
}
