//! Learnable parameters of the dual-branch encoder, registered in the
//! parameter store under `stage{i}.block{j}.{submodule}.{param}` names
//! (stems under `stem.*`, stage transitions under `down{i}.*`).

use crate::error::Result;
use crate::nn::{bn_w, conv_bn_w, conv_w, linear_w, BnW, ConvBnW, ConvW};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Float;

use super::config::{LeaFusion, QFusion, VariantConfig};

#[derive(Clone, Debug)]
pub struct StemWeights {
    pub rgb1: ConvBnW,
    pub rgb2: ConvBnW,
    pub depth1: ConvBnW,
    pub depth2: ConvBnW,
}

/// Per-branch stage transition: stride 1 into stage 1 (channel lift after
/// the stem), stride 2 between consecutive stages.
#[derive(Clone, Debug)]
pub struct DownW {
    pub rgb: ConvBnW,
    pub depth: ConvBnW,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct GaaWeights {
    pub q: ConvW,
    pub k: ConvW,
    pub v: ConvW,
    pub out: ConvW,
}

#[derive(Clone, Debug)]
pub struct LeaWeights {
    pub depth_lin: ConvW,
    pub dconv: ConvW,
    pub rgb_lin: ConvW,
    /// Present only in concat fusion mode (2*Cd -> Cd).
    pub proj: Option<ConvW>,
}

#[derive(Clone, Debug)]
pub struct BaseWeights {
    pub lin: ConvW,
    pub dconv: ConvW,
    pub gate: ConvW,
}

#[derive(Clone, Debug)]
pub struct MlpWeights {
    pub norm: BnW,
    pub fc1: ConvW,
    pub fc2: ConvW,
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub norm_rgb: BnW,
    pub norm_depth: BnW,
    /// Absent in stage 1.
    pub gaa: Option<GaaWeights>,
    pub lea: LeaWeights,
    pub base: BaseWeights,
    pub fuse_rgb: ConvW,
    pub fuse_depth: ConvW,
    pub mlp_rgb: MlpWeights,
    pub mlp_depth: MlpWeights,
    pub drop_path: f64,
}

#[derive(Clone, Debug)]
pub struct StageWeights {
    pub down: DownW,
    pub blocks: Vec<BlockWeights>,
}

#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub stem: StemWeights,
    pub stages: Vec<StageWeights>,
}

impl EncoderWeights {
    pub fn init<E: Float>(
        store: &mut ParamStore<E>,
        cfg: &VariantConfig,
        rng: &mut Rng,
        init_std: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let stem = StemWeights {
            rgb1: conv_bn_w(store, rng, "stem.rgb1", 3, cfg.stem_rgb, 3, init_std)?,
            rgb2: conv_bn_w(store, rng, "stem.rgb2", cfg.stem_rgb, cfg.stem_rgb, 3, init_std)?,
            depth1: conv_bn_w(
                store,
                rng,
                "stem.depth1",
                cfg.depth_in_channels,
                cfg.stem_depth,
                3,
                init_std,
            )?,
            depth2: conv_bn_w(
                store,
                rng,
                "stem.depth2",
                cfg.stem_depth,
                cfg.stem_depth,
                3,
                init_std,
            )?,
        };
        let mut stages = Vec::with_capacity(4);
        let mut global_block = 0usize;
        for (si, sc) in cfg.stages.iter().enumerate() {
            let stage_no = si + 1;
            let (prev_r, prev_d) = if si == 0 {
                (cfg.stem_rgb, cfg.stem_depth)
            } else {
                (
                    cfg.stages[si - 1].rgb_channels,
                    cfg.stages[si - 1].depth_channels,
                )
            };
            let down = DownW {
                rgb: conv_bn_w(
                    store,
                    rng,
                    &format!("down{stage_no}.rgb"),
                    prev_r,
                    sc.rgb_channels,
                    3,
                    init_std,
                )?,
                depth: conv_bn_w(
                    store,
                    rng,
                    &format!("down{stage_no}.depth"),
                    prev_d,
                    sc.depth_channels,
                    3,
                    init_std,
                )?,
                stride: if si == 0 { 1 } else { 2 },
            };
            let mut blocks = Vec::with_capacity(sc.blocks);
            for bi in 0..sc.blocks {
                let p = format!("stage{stage_no}.block{bi}");
                let (r, d, e) = (sc.rgb_channels, sc.depth_channels, sc.expansion);
                let gaa = if si == 0 {
                    None
                } else {
                    let q_in = match cfg.q_fusion {
                        QFusion::None => r,
                        QFusion::QOnly | QFusion::Qkv => r + d,
                    };
                    let kv_in = match cfg.q_fusion {
                        QFusion::Qkv => r + d,
                        _ => r,
                    };
                    Some(GaaWeights {
                        q: linear_w(store, rng, &format!("{p}.gaa.q"), q_in, d, init_std)?,
                        k: linear_w(store, rng, &format!("{p}.gaa.k"), kv_in, d, init_std)?,
                        v: linear_w(store, rng, &format!("{p}.gaa.v"), kv_in, d, init_std)?,
                        out: linear_w(store, rng, &format!("{p}.gaa.out"), d, d, init_std)?,
                    })
                };
                let lea = LeaWeights {
                    depth_lin: linear_w(store, rng, &format!("{p}.lea.depth_lin"), d, d, init_std)?,
                    dconv: conv_w(
                        store,
                        rng,
                        &format!("{p}.lea.dconv"),
                        d,
                        d,
                        cfg.lea_kernel,
                        d,
                        init_std,
                    )?,
                    rgb_lin: linear_w(store, rng, &format!("{p}.lea.rgb_lin"), r, d, init_std)?,
                    proj: match cfg.lea_fusion {
                        LeaFusion::Concat => Some(linear_w(
                            store,
                            rng,
                            &format!("{p}.lea.proj"),
                            2 * d,
                            d,
                            init_std,
                        )?),
                        _ => None,
                    },
                };
                let base = BaseWeights {
                    lin: linear_w(store, rng, &format!("{p}.base.lin"), r, r, init_std)?,
                    dconv: conv_w(
                        store,
                        rng,
                        &format!("{p}.base.dconv"),
                        r,
                        r,
                        cfg.base_kernel,
                        r,
                        init_std,
                    )?,
                    gate: linear_w(store, rng, &format!("{p}.base.gate"), r, r, init_std)?,
                };
                let cat = if si == 0 { d + r } else { d + d + r };
                let block = BlockWeights {
                    norm_rgb: bn_w(store, &format!("{p}.norm_rgb"), r),
                    norm_depth: bn_w(store, &format!("{p}.norm_depth"), d),
                    gaa,
                    lea,
                    base,
                    fuse_rgb: linear_w(store, rng, &format!("{p}.fuse_rgb"), cat, r, init_std)?,
                    fuse_depth: linear_w(store, rng, &format!("{p}.fuse_depth"), cat, d, init_std)?,
                    mlp_rgb: MlpWeights {
                        norm: bn_w(store, &format!("{p}.mlp_rgb.norm"), r),
                        fc1: linear_w(store, rng, &format!("{p}.mlp_rgb.fc1"), r, e * r, init_std)?,
                        fc2: linear_w(store, rng, &format!("{p}.mlp_rgb.fc2"), e * r, r, init_std)?,
                    },
                    mlp_depth: MlpWeights {
                        norm: bn_w(store, &format!("{p}.mlp_depth.norm"), d),
                        fc1: linear_w(store, rng, &format!("{p}.mlp_depth.fc1"), d, e * d, init_std)?,
                        fc2: linear_w(store, rng, &format!("{p}.mlp_depth.fc2"), e * d, d, init_std)?,
                    },
                    drop_path: cfg.drop_path_rate(global_block),
                };
                global_block += 1;
                blocks.push(block);
            }
            stages.push(StageWeights { down, blocks });
        }
        Ok(EncoderWeights { stem, stages })
    }

    /// Zeroes every block's fused output projections and MLP second layers,
    /// reducing each block to the identity map (residual with zero branch).
    pub fn zero_block_outputs<E: Float>(&self, store: &mut ParamStore<E>) {
        let mut zero = |w: &ConvW| {
            for id in [w.weight, w.bias] {
                for v in store.tensor_mut(id).data_mut() {
                    *v = E::ZERO;
                }
            }
        };
        for stage in &self.stages {
            for b in &stage.blocks {
                zero(&b.fuse_rgb);
                zero(&b.fuse_depth);
                zero(&b.mlp_rgb.fc2);
                zero(&b.mlp_depth.fc2);
            }
        }
    }
}
