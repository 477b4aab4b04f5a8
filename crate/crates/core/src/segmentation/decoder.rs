//! Lightweight decoder over the RGB features of the last three encoder
//! stages: per-stage projection to a shared width, resize-and-sum at 1/8
//! resolution, an optional matrix-factorization context, fusion conv and a
//! classifier, resized to the input resolution.

use crate::encoder::{DualVars, VariantConfig};
use crate::error::{Error, Result};
use crate::nn::{conv_bn_w, linear_w, ConvBnW, ConvW, Forward};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::{Float, Tensor};

/// Non-negative matrix-factorization context settings. The reconstruction
/// enriches the fused features but is treated as a constant at backward
/// time; gradients flow through the residual path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HamCfg {
    pub enabled: bool,
    pub rank: usize,
    pub iters: usize,
}

impl Default for HamCfg {
    fn default() -> Self {
        HamCfg {
            enabled: true,
            rank: 64,
            iters: 6,
        }
    }
}

impl HamCfg {
    pub fn disabled() -> Self {
        HamCfg {
            enabled: false,
            rank: 64,
            iters: 6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderWeights {
    pub proj: [ConvW; 3],
    pub fuse: ConvBnW,
    pub classifier: ConvW,
    pub num_classes: usize,
}

impl DecoderWeights {
    /// `num_classes` = 1 selects the binary-saliency head.
    pub fn init<E: Float>(
        store: &mut ParamStore<E>,
        cfg: &VariantConfig,
        num_classes: usize,
        rng: &mut Rng,
        init_std: f64,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("decoder needs num_classes >= 1".into()));
        }
        let dd = cfg.decoder_dim;
        let proj = [
            linear_w(store, rng, "decoder.proj2", cfg.stages[1].rgb_channels, dd, init_std)?,
            linear_w(store, rng, "decoder.proj3", cfg.stages[2].rgb_channels, dd, init_std)?,
            linear_w(store, rng, "decoder.proj4", cfg.stages[3].rgb_channels, dd, init_std)?,
        ];
        Ok(DecoderWeights {
            proj,
            fuse: conv_bn_w(store, rng, "decoder.fuse", dd, dd, 1, init_std)?,
            classifier: linear_w(store, rng, "decoder.classifier", dd, num_classes, init_std)?,
            num_classes,
        })
    }
}

/// Multiplicative-update NMF reconstruction of the softplus-rectified
/// features, per sample. Deterministic: factor init comes from a fixed rng
/// stream.
fn nmf_context<E: Float>(z: &Tensor<E>, rank: usize, iters: usize) -> Tensor<E> {
    let d = z.dims();
    let (b, c, hw) = (d[0], d[1], d[2] * d[3]);
    let r = rank.min(c).min(hw);
    if r == 0 {
        return Tensor::zeros(d);
    }
    let eps = 1e-6f64;
    let mut out = vec![E::ZERO; z.numel()];
    for s in 0..b {
        // V = softplus(z_s), shape [c, hw]
        let v: Vec<f64> = z.data()[s * c * hw..(s + 1) * c * hw]
            .iter()
            .map(|x| {
                let x = x.to_f64();
                x.max(0.0) + (1.0 + (-x.abs()).exp()).ln()
            })
            .collect();
        let mut rng = Rng::stream(0x4841_4D21, s as u64);
        let mut wf: Vec<f64> = (0..c * r).map(|_| rng.uniform(0.1, 1.0)).collect();
        let mut hf: Vec<f64> = (0..r * hw).map(|_| rng.uniform(0.1, 1.0)).collect();
        for _ in 0..iters {
            // H <- H * (W^T V) / (W^T W H + eps)
            let mut wtv = vec![0.0f64; r * hw];
            for i in 0..c {
                for j in 0..r {
                    let wij = wf[i * r + j];
                    if wij == 0.0 {
                        continue;
                    }
                    for t in 0..hw {
                        wtv[j * hw + t] += wij * v[i * hw + t];
                    }
                }
            }
            let mut wtw = vec![0.0f64; r * r];
            for i in 0..c {
                for j in 0..r {
                    let wij = wf[i * r + j];
                    for j2 in 0..r {
                        wtw[j * r + j2] += wij * wf[i * r + j2];
                    }
                }
            }
            let mut wtwh = vec![0.0f64; r * hw];
            for j in 0..r {
                for j2 in 0..r {
                    let m = wtw[j * r + j2];
                    if m == 0.0 {
                        continue;
                    }
                    for t in 0..hw {
                        wtwh[j * hw + t] += m * hf[j2 * hw + t];
                    }
                }
            }
            for i in 0..r * hw {
                hf[i] *= wtv[i] / (wtwh[i] + eps);
            }
            // W <- W * (V H^T) / (W H H^T + eps)
            let mut vht = vec![0.0f64; c * r];
            for i in 0..c {
                for t in 0..hw {
                    let vi = v[i * hw + t];
                    if vi == 0.0 {
                        continue;
                    }
                    for j in 0..r {
                        vht[i * r + j] += vi * hf[j * hw + t];
                    }
                }
            }
            let mut hht = vec![0.0f64; r * r];
            for j in 0..r {
                for j2 in 0..r {
                    let mut acc = 0.0;
                    for t in 0..hw {
                        acc += hf[j * hw + t] * hf[j2 * hw + t];
                    }
                    hht[j * r + j2] = acc;
                }
            }
            let mut whht = vec![0.0f64; c * r];
            for i in 0..c {
                for j2 in 0..r {
                    let w2 = wf[i * r + j2];
                    if w2 == 0.0 {
                        continue;
                    }
                    for j in 0..r {
                        whht[i * r + j] += w2 * hht[j2 * r + j];
                    }
                }
            }
            for i in 0..c * r {
                wf[i] *= vht[i] / (whht[i] + eps);
            }
        }
        // recon = W H
        for i in 0..c {
            for j in 0..r {
                let wij = wf[i * r + j];
                if wij == 0.0 {
                    continue;
                }
                let dst = &mut out[s * c * hw + i * hw..s * c * hw + (i + 1) * hw];
                for (t, o) in dst.iter_mut().enumerate() {
                    *o = E::from_f64(o.to_f64() + wij * hf[j * hw + t]);
                }
            }
        }
    }
    Tensor::new(d.to_vec(), out).expect("nmf dims consistent")
}

/// Decoder forward over the last three stage outputs (RGB branch only).
pub fn decoder_forward<E: Float>(
    ctx: &mut Forward<'_, E>,
    stages: &[DualVars],
    w: &DecoderWeights,
    ham: &HamCfg,
    out_hw: (usize, usize),
) -> Result<Var> {
    if stages.len() != 4 {
        return Err(Error::Shape(format!(
            "decoder: expected 4 stage outputs, got {}",
            stages.len()
        )));
    }
    let target = {
        let d = ctx.tape.dims(stages[1].rgb);
        (d[2], d[3])
    };
    let mut sum: Option<Var> = None;
    for (i, stage) in stages.iter().enumerate().skip(1) {
        let p = ctx.linear(stage.rgb, &w.proj[i - 1])?;
        let p = ctx.tape.bilinear_resize(p, target)?;
        sum = Some(match sum {
            None => p,
            Some(acc) => ctx.tape.add(acc, p)?,
        });
    }
    let mut z = sum.expect("three stages summed");
    if ham.enabled && ham.rank > 0 && ham.iters > 0 {
        let recon = nmf_context(&ctx.tape.value(z), ham.rank, ham.iters);
        let recon_v = ctx.tape.constant(&recon);
        z = ctx.tape.add(z, recon_v)?;
    }
    let f = ctx.linear(z, &w.fuse.conv)?;
    let f = ctx.batch_norm(f, &w.fuse.bn)?;
    let f = ctx.tape.gelu(f)?;
    let logits = ctx.linear(f, &w.classifier)?;
    ctx.tape.bilinear_resize(logits, out_hw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmf_rank_zero_is_passthrough_zero() {
        let z = Tensor::<f32>::from_fn(&[1, 4, 2, 2], |i| i as f32 * 0.1 - 0.5);
        let r = nmf_context(&z, 0, 6);
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nmf_reconstruction_approaches_nonneg_features() {
        // With rank == min(c, hw) the factorization can fit the rectified
        // features closely after a few updates.
        let z = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| (i as f64 * 0.37).sin());
        let r = nmf_context(&z, 3, 200);
        let v: Vec<f64> = z
            .data()
            .iter()
            .map(|x| x.max(0.0) + (1.0 + (-x.abs()).exp()).ln())
            .collect();
        let err: f64 = v
            .iter()
            .zip(r.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.05, "max reconstruction error {err}");
    }
}
