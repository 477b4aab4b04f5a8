//! Parameter accounting and an analytic multiply-accumulate proxy for
//! compute cost.

use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::segmentation::decoder::DecoderWeights;


use super::config::VariantConfig;
use super::weights::EncoderWeights;

/// Exact learnable-scalar count: encoder alone, or encoder plus the
/// segmentation decoder and classifier.
pub fn count_parameters(
    cfg: &VariantConfig,
    include_decoder: bool,
    num_classes: usize,
) -> Result<usize> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = Rng::new(0);
    EncoderWeights::init(&mut store, cfg, &mut rng, 0.02)?;
    if include_decoder {
        DecoderWeights::init(&mut store, cfg, num_classes, &mut rng, 0.02)?;
    }
    Ok(store.trainable_scalars())
}

/// Published reference parameter budgets (in scalars) for the named
/// variants with decoder, used for the deviation report.
pub fn reference_params(variant: &str) -> Option<f64> {
    match variant {
        "T" | "t" => Some(6.0e6),
        "S" | "s" => Some(18.7e6),
        "B" | "b" => Some(29.5e6),
        "L" | "l" => Some(39.0e6),
        _ => None,
    }
}

/// Forward multiply-accumulate count at the given input size. Pooling,
/// resizing and normalization are ignored; this is a compute proxy for
/// sweep reports, not a benchmark.
pub fn flops_proxy(
    cfg: &VariantConfig,
    input_hw: (usize, usize),
    include_decoder: bool,
    num_classes: usize,
) -> u64 {
    let (ih, iw) = input_hw;
    let conv = |cin: usize, cout: usize, k: usize, groups: usize, h: usize, w: usize| -> u64 {
        (cin / groups * cout * k * k * h * w) as u64
    };
    let mut total = 0u64;
    // stem at 1/2 then 1/4
    total += conv(3, cfg.stem_rgb, 3, 1, ih / 2, iw / 2);
    total += conv(cfg.stem_rgb, cfg.stem_rgb, 3, 1, ih / 4, iw / 4);
    total += conv(cfg.depth_in_channels, cfg.stem_depth, 3, 1, ih / 2, iw / 2);
    total += conv(cfg.stem_depth, cfg.stem_depth, 3, 1, ih / 4, iw / 4);
    let mut prev = (cfg.stem_rgb, cfg.stem_depth);
    for (si, s) in cfg.stages.iter().enumerate() {
        let div = 4usize << si;
        let (h, w) = (ih / div, iw / div);
        let (r, d, e) = (s.rgb_channels, s.depth_channels, s.expansion);
        total += conv(prev.0, r, 3, 1, h, w);
        total += conv(prev.1, d, 3, 1, h, w);
        prev = (r, d);
        let k2 = cfg.gaa_pool_k * cfg.gaa_pool_k;
        for _ in 0..s.blocks {
            if si > 0 {
                let q_in = match cfg.q_fusion {
                    super::config::QFusion::None => r,
                    _ => r + d,
                };
                let kv_in = match cfg.q_fusion {
                    super::config::QFusion::Qkv => r + d,
                    _ => r,
                };
                total += (q_in * d * k2) as u64; // query projection on pooled map
                total += 2 * conv(kv_in, d, 1, 1, h, w); // keys + values
                total += 2 * (k2 * h * w * d) as u64; // QK^T and AV
                total += conv(d, d, 1, 1, h, w); // output projection
            }
            // local gate
            total += conv(d, d, 1, 1, h, w);
            total += conv(d, d, cfg.lea_kernel, d, h, w);
            total += conv(r, d, 1, 1, h, w);
            if cfg.lea_fusion == super::config::LeaFusion::Concat {
                total += conv(2 * d, d, 1, 1, h, w);
            }
            // base
            total += 2 * conv(r, r, 1, 1, h, w);
            total += conv(r, r, cfg.base_kernel, r, h, w);
            // fusion
            let cat = if si == 0 { d + r } else { 2 * d + r };
            total += conv(cat, r, 1, 1, h, w) + conv(cat, d, 1, 1, h, w);
            // MLPs
            total += 2 * conv(r, e * r, 1, 1, h, w);
            total += 2 * conv(d, e * d, 1, 1, h, w);
        }
    }
    if include_decoder {
        let dd = cfg.decoder_dim;
        let (h8, w8) = (ih / 8, iw / 8);
        for (si, s) in cfg.stages.iter().enumerate().skip(1) {
            let div = 4usize << si;
            total += conv(s.rgb_channels, dd, 1, 1, ih / div, iw / div);
        }
        total += conv(dd, dd, 1, 1, h8, w8); // fusion conv
        total += conv(dd, num_classes, 1, 1, h8, w8);
    }
    total
}
