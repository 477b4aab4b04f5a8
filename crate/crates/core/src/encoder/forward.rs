//! Forward passes for the dual-branch encoder.

use crate::error::{Error, Result};
use crate::nn::{Forward, Mode};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

use super::config::{LeaFusion, QFusion, VariantConfig};
use super::weights::{
    BaseWeights, BlockWeights, DownW, EncoderWeights, GaaWeights, LeaWeights, StemWeights,
};

/// Paired RGB/depth features at one stage.
#[derive(Clone, Copy, Debug)]
pub struct DualVars {
    pub rgb: Var,
    pub depth: Var,
}

/// Two stride-2 conv+BN+GELU units per branch; output at 1/4 resolution.
pub fn stem_forward<E: Float>(
    ctx: &mut Forward<'_, E>,
    rgb: Var,
    depth: Var,
    w: &StemWeights,
) -> Result<DualVars> {
    let rd = ctx.tape.dims(rgb);
    let (h, wd) = (rd[2], rd[3]);
    if h % 32 != 0 || wd % 32 != 0 {
        return Err(Error::Shape(format!(
            "stem: input {h}x{wd} must be divisible by 32"
        )));
    }
    let unit = |ctx: &mut Forward<'_, E>, x: Var, cw: &crate::nn::ConvBnW| -> Result<Var> {
        let x = ctx.conv(x, &cw.conv, 2, 1, 1)?;
        let x = ctx.batch_norm(x, &cw.bn)?;
        ctx.tape.gelu(x)
    };
    let r = unit(ctx, rgb, &w.rgb1)?;
    let r = unit(ctx, r, &w.rgb2)?;
    let d = unit(ctx, depth, &w.depth1)?;
    let d = unit(ctx, d, &w.depth2)?;
    Ok(DualVars { rgb: r, depth: d })
}

/// Independent per-branch conv + BN; stride 2 between stages, stride 1 into
/// stage 1.
pub fn downsample_forward<E: Float>(
    ctx: &mut Forward<'_, E>,
    f: DualVars,
    w: &DownW,
) -> Result<DualVars> {
    let rd = ctx.tape.dims(f.rgb);
    if w.stride == 2 && (rd[2] % 2 != 0 || rd[3] % 2 != 0) {
        return Err(Error::Shape(format!(
            "downsample: spatial {}x{} must be even",
            rd[2], rd[3]
        )));
    }
    let r = ctx.conv(f.rgb, &w.rgb.conv, w.stride, 1, 1)?;
    let r = ctx.batch_norm(r, &w.rgb.bn)?;
    let d = ctx.conv(f.depth, &w.depth.conv, w.stride, 1, 1)?;
    let d = ctx.batch_norm(d, &w.depth.bn)?;
    Ok(DualVars { rgb: r, depth: d })
}

/// Reshape a feature map [B, C, h, w] into per-head token matrices
/// [B*heads, h*w, C/heads].
fn to_head_tokens<E: Float>(tape: &mut Tape<E>, x: Var, heads: usize) -> Result<Var> {
    let d = tape.dims(x).to_vec();
    let (b, c, hw) = (d[0], d[1], d[2] * d[3]);
    let dh = c / heads;
    let r = tape.reshape(x, vec![b, heads, dh, hw])?;
    let p = tape.permute(r, &[0, 1, 3, 2])?;
    tape.reshape(p, vec![b * heads, hw, dh])
}

/// Inverse of [`to_head_tokens`], back to [B, C, kh, kw].
fn from_head_tokens<E: Float>(
    tape: &mut Tape<E>,
    x: Var,
    b: usize,
    heads: usize,
    kh: usize,
    kw: usize,
) -> Result<Var> {
    let d = tape.dims(x).to_vec();
    let (hw, dh) = (d[1], d[2]);
    debug_assert_eq!(hw, kh * kw);
    let r = tape.reshape(x, vec![b, heads, hw, dh])?;
    let p = tape.permute(r, &[0, 1, 3, 2])?;
    tape.reshape(p, vec![b, heads * dh, kh, kw])
}

/// Global attention: pooled queries over full-resolution RGB-derived keys
/// and values, upsampled back. Returns (output map, attention probabilities
/// [B*heads, pool_k^2, h*w]).
pub fn gaa_forward<E: Float>(
    ctx: &mut Forward<'_, E>,
    rgb_n: Var,
    depth_n: Var,
    w: &GaaWeights,
    heads: usize,
    pool_k: usize,
    q_fusion: QFusion,
) -> Result<(Var, Var)> {
    let rd = ctx.tape.dims(rgb_n).to_vec();
    let (b, _cr, h, wd) = (rd[0], rd[1], rd[2], rd[3]);
    let cd = w.q.out_channels;
    let dh = cd / heads;

    let q_src = match q_fusion {
        QFusion::None => rgb_n,
        QFusion::QOnly | QFusion::Qkv => ctx.tape.concat_channels(&[rgb_n, depth_n])?,
    };
    let pooled = ctx.tape.adaptive_avg_pool2d(q_src, (pool_k, pool_k))?;
    let q_map = ctx.linear(pooled, &w.q)?;

    let kv_src = match q_fusion {
        QFusion::Qkv => ctx.tape.concat_channels(&[rgb_n, depth_n])?,
        _ => rgb_n,
    };
    let k_map = ctx.linear(kv_src, &w.k)?;
    let v_map = ctx.linear(kv_src, &w.v)?;

    let q_tok = to_head_tokens(ctx.tape, q_map, heads)?;
    let k_tok = to_head_tokens(ctx.tape, k_map, heads)?;
    let v_tok = to_head_tokens(ctx.tape, v_map, heads)?;

    let scale = E::from_f64(1.0 / (dh as f64).sqrt());
    let q_scaled = ctx.tape.scale(q_tok, scale)?;
    let logits = ctx.tape.bmm(q_scaled, k_tok, false, true)?; // [B*H, k^2, h*w]
    let attn = ctx.tape.softmax(logits, 2)?;
    let o_tok = ctx.tape.bmm(attn, v_tok, false, false)?; // [B*H, k^2, dh]

    let o_map = from_head_tokens(ctx.tape, o_tok, b, heads, pool_k, pool_k)?;
    let up = ctx.tape.bilinear_resize(o_map, (h, wd))?;
    let out = ctx.linear(up, &w.out)?;
    Ok((out, attn))
}

/// Local gate: large-kernel depthwise conv over projected depth features,
/// fused with projected RGB features.
pub fn lea_forward<E: Float>(
    ctx: &mut Forward<'_, E>,
    rgb_n: Var,
    depth_n: Var,
    w: &LeaWeights,
    kernel: usize,
    fusion: LeaFusion,
) -> Result<Var> {
    if kernel % 2 == 0 {
        return Err(Error::InvalidArg(format!("lea kernel {kernel} must be odd")));
    }
    let cd = w.depth_lin.out_channels;
    let d = ctx.linear(depth_n, &w.depth_lin)?;
    let d = ctx.conv(d, &w.dconv, 1, kernel / 2, cd)?;
    let r = ctx.linear(rgb_n, &w.rgb_lin)?;
    match fusion {
        LeaFusion::Hadamard => ctx.tape.hadamard(d, r),
        LeaFusion::Add => ctx.tape.add(d, r),
        LeaFusion::Concat => {
            let cat = ctx.tape.concat_channels(&[d, r])?;
            let proj = w
                .proj
                .as_ref()
                .ok_or_else(|| Error::Config("lea concat fusion requires proj weights".into()))?;
            ctx.linear(cat, proj)
        }
    }
}

/// RGB-only analog of the local gate, preserving appearance information.
pub fn base_forward<E: Float>(
    ctx: &mut Forward<'_, E>,
    rgb_n: Var,
    w: &BaseWeights,
    kernel: usize,
) -> Result<Var> {
    if kernel % 2 == 0 {
        return Err(Error::InvalidArg(format!("base kernel {kernel} must be odd")));
    }
    let cr = w.lin.out_channels;
    let a = ctx.linear(rgb_n, &w.lin)?;
    let a = ctx.conv(a, &w.dconv, 1, kernel / 2, cr)?;
    let g = ctx.linear(rgb_n, &w.gate)?;
    ctx.tape.hadamard(a, g)
}

/// One dual-branch block: pre-norm, attention sub-block (GAA in stages 2-4,
/// LEA, base), concat + two fused projections with residual/drop-path, then
/// per-branch pre-norm MLPs with residual/drop-path.
pub fn rgbd_block_forward<E: Float>(
    ctx: &mut Forward<'_, E>,
    f: DualVars,
    w: &BlockWeights,
    cfg: &VariantConfig,
    stage_index: usize,
) -> Result<DualVars> {
    if !(1..=4).contains(&stage_index) {
        return Err(Error::InvalidArg(format!(
            "stage_index {stage_index} out of 1..=4"
        )));
    }
    let heads = cfg.heads[stage_index - 1];
    let rgb_n = ctx.batch_norm(f.rgb, &w.norm_rgb)?;
    let depth_n = ctx.batch_norm(f.depth, &w.norm_depth)?;

    let mut parts = Vec::with_capacity(3);
    if let Some(gw) = &w.gaa {
        let (gaa, _attn) =
            gaa_forward(ctx, rgb_n, depth_n, gw, heads, cfg.gaa_pool_k, cfg.q_fusion)?;
        parts.push(gaa);
    }
    parts.push(lea_forward(
        ctx,
        rgb_n,
        depth_n,
        &w.lea,
        cfg.lea_kernel,
        cfg.lea_fusion,
    )?);
    parts.push(base_forward(ctx, rgb_n, &w.base, cfg.base_kernel)?);
    let cat = ctx.tape.concat_channels(&parts)?;

    let fr = ctx.linear(cat, &w.fuse_rgb)?;
    let fr = ctx.drop_path(fr, w.drop_path)?;
    let rgb = ctx.tape.add(f.rgb, fr)?;
    let fd = ctx.linear(cat, &w.fuse_depth)?;
    let fd = ctx.drop_path(fd, w.drop_path)?;
    let depth = ctx.tape.add(f.depth, fd)?;

    let mlp = |ctx: &mut Forward<'_, E>, x: Var, mw: &super::weights::MlpWeights| -> Result<Var> {
        let y = ctx.batch_norm(x, &mw.norm)?;
        let y = ctx.linear(y, &mw.fc1)?;
        let y = ctx.tape.gelu(y)?;
        let y = ctx.linear(y, &mw.fc2)?;
        let y = ctx.drop_path(y, w.drop_path)?;
        ctx.tape.add(x, y)
    };
    let rgb = mlp(ctx, rgb, &w.mlp_rgb)?;
    let depth = mlp(ctx, depth, &w.mlp_depth)?;
    Ok(DualVars { rgb, depth })
}

/// Full encoder: stem, stage transitions and blocks; returns the four
/// per-stage outputs at 1/4, 1/8, 1/16 and 1/32 resolution.
pub fn encoder_forward<E: Float>(
    ctx: &mut Forward<'_, E>,
    rgb: &Tensor<E>,
    depth: &Tensor<E>,
    w: &EncoderWeights,
    cfg: &VariantConfig,
) -> Result<Vec<DualVars>> {
    check_inputs(rgb, depth, cfg)?;
    let rgb_v = ctx.input(rgb);
    let depth_v = ctx.input(depth);
    let mut f = stem_forward(ctx, rgb_v, depth_v, &w.stem)?;
    let mut outs = Vec::with_capacity(4);
    for (si, stage) in w.stages.iter().enumerate() {
        f = downsample_forward(ctx, f, &stage.down)?;
        for b in &stage.blocks {
            f = rgbd_block_forward(ctx, f, b, cfg, si + 1)?;
        }
        outs.push(f);
    }
    Ok(outs)
}

/// The non-block plumbing only (stem + transitions), for the identity
/// reduction check.
pub fn stems_downsamples_forward<E: Float>(
    ctx: &mut Forward<'_, E>,
    rgb: &Tensor<E>,
    depth: &Tensor<E>,
    w: &EncoderWeights,
    cfg: &VariantConfig,
) -> Result<Vec<DualVars>> {
    check_inputs(rgb, depth, cfg)?;
    let rgb_v = ctx.input(rgb);
    let depth_v = ctx.input(depth);
    let mut f = stem_forward(ctx, rgb_v, depth_v, &w.stem)?;
    let mut outs = Vec::with_capacity(4);
    for stage in &w.stages {
        f = downsample_forward(ctx, f, &stage.down)?;
        outs.push(f);
    }
    Ok(outs)
}

fn check_inputs<E: Float>(rgb: &Tensor<E>, depth: &Tensor<E>, cfg: &VariantConfig) -> Result<()> {
    let (rd, dd) = (rgb.dims(), depth.dims());
    if rd.len() != 4 || dd.len() != 4 {
        return Err(Error::Shape("encoder: inputs must be [B,C,H,W]".into()));
    }
    if rd[1] != 3 {
        return Err(Error::Shape(format!("encoder: rgb has {} channels", rd[1])));
    }
    if dd[1] != cfg.depth_in_channels {
        return Err(Error::Shape(format!(
            "encoder: depth has {} channels, config expects {}",
            dd[1], cfg.depth_in_channels
        )));
    }
    if rd[0] != dd[0] || rd[2] != dd[2] || rd[3] != dd[3] {
        return Err(Error::Shape(format!(
            "encoder: rgb {:?} and depth {:?} misaligned",
            rd, dd
        )));
    }
    if rd[2] % 32 != 0 || rd[3] % 32 != 0 {
        return Err(Error::Shape(format!(
            "encoder: input {}x{} must be divisible by 32",
            rd[2], rd[3]
        )));
    }
    Ok(())
}

/// Convenience eval-mode forward returning plain tensors per stage.
pub fn encoder_eval<E: Float>(
    store: &mut ParamStore<E>,
    w: &EncoderWeights,
    cfg: &VariantConfig,
    rgb: &Tensor<E>,
    depth: &Tensor<E>,
) -> Result<Vec<(Tensor<E>, Tensor<E>)>> {
    let mut tape = Tape::new();
    let mut rng = Rng::new(0);
    let mut ctx = Forward::new(&mut tape, store, Mode::Eval, &mut rng);
    let outs = encoder_forward(&mut ctx, rgb, depth, w, cfg)?;
    Ok(outs
        .into_iter()
        .map(|f| (tape.value(f.rgb), tape.value(f.depth)))
        .collect())
}
