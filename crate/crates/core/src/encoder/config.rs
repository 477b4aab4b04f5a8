//! Encoder variant configurations: per-stage channel counts, block counts,
//! MLP expansion ratios and the ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which attention inputs the depth features are fused into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QFusion {
    /// Queries from RGB only.
    None,
    /// Queries from concat(RGB, depth); keys/values from RGB.
    #[serde(rename = "q")]
    QOnly,
    /// Queries, keys and values all from concat(RGB, depth).
    Qkv,
}

/// How the depth gate combines with the RGB values in the local module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeaFusion {
    Hadamard,
    Add,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub rgb_channels: usize,
    pub depth_channels: usize,
    pub blocks: usize,
    pub expansion: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    /// Intermediate stem channels (RGB, depth); the stem ends at these widths
    /// and a stride-1 transition conv lifts them to the stage-1 widths.
    pub stem_rgb: usize,
    pub stem_depth: usize,
    pub stages: [StageSpec; 4],
    pub decoder_dim: usize,
    pub gaa_pool_k: usize,
    pub lea_kernel: usize,
    pub base_kernel: usize,
    pub heads: [usize; 4],
    pub drop_path_max: f64,
    pub depth_in_channels: usize,
    pub q_fusion: QFusion,
    pub lea_fusion: LeaFusion,
}

fn stages(c: [(usize, usize); 4], n: [usize; 4], e: [usize; 4]) -> [StageSpec; 4] {
    [0, 1, 2, 3].map(|i| StageSpec {
        rgb_channels: c[i].0,
        depth_channels: c[i].1,
        blocks: n[i],
        expansion: e[i],
    })
}

/// Largest head count <= max(1, cd/16) dividing cd.
pub fn default_heads(cd: usize) -> usize {
    let mut h = (cd / 16).max(1);
    while cd % h != 0 {
        h -= 1;
    }
    h
}

impl VariantConfig {
    fn named(
        name: &str,
        stem: (usize, usize),
        c: [(usize, usize); 4],
        n: [usize; 4],
        drop_path_max: f64,
    ) -> Self {
        let e = [8, 8, 4, 4];
        VariantConfig {
            name: name.to_string(),
            stem_rgb: stem.0,
            stem_depth: stem.1,
            stages: stages(c, n, e),
            decoder_dim: 512,
            gaa_pool_k: 7,
            lea_kernel: 7,
            base_kernel: 7,
            heads: c.map(|(_, cd)| default_heads(cd)),
            drop_path_max,
            depth_in_channels: 1,
            q_fusion: QFusion::QOnly,
            lea_fusion: LeaFusion::Hadamard,
        }
    }

    pub fn t() -> Self {
        Self::named(
            "T",
            (16, 8),
            [(32, 16), (64, 32), (128, 64), (256, 128)],
            [3, 3, 5, 2],
            0.1,
        )
    }

    pub fn s() -> Self {
        Self::named(
            "S",
            (32, 16),
            [(64, 32), (128, 64), (256, 128), (512, 256)],
            [2, 2, 4, 2],
            0.1,
        )
    }

    pub fn b() -> Self {
        Self::named(
            "B",
            (32, 16),
            [(64, 32), (128, 64), (256, 128), (512, 256)],
            [3, 3, 12, 2],
            0.15,
        )
    }

    pub fn l() -> Self {
        Self::named(
            "L",
            (48, 24),
            [(96, 48), (192, 96), (288, 144), (576, 288)],
            [3, 3, 12, 3],
            0.2,
        )
    }

    /// One block per stage at toy widths; used by the gradient checker and
    /// the fast training smoke tests.
    pub fn tiny_test() -> Self {
        let mut cfg = VariantConfig {
            name: "tiny-test".to_string(),
            stem_rgb: 8,
            stem_depth: 4,
            stages: stages(
                [(8, 4), (16, 8), (32, 16), (64, 32)],
                [1, 1, 1, 1],
                [4, 4, 4, 4],
            ),
            decoder_dim: 32,
            gaa_pool_k: 7,
            lea_kernel: 7,
            base_kernel: 7,
            heads: [1, 1, 1, 2],
            drop_path_max: 0.1,
            depth_in_channels: 1,
            q_fusion: QFusion::QOnly,
            lea_fusion: LeaFusion::Hadamard,
        };
        cfg.heads = cfg.stages.map(|s| default_heads(s.depth_channels));
        cfg
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "T" | "t" => Ok(Self::t()),
            "S" | "s" => Ok(Self::s()),
            "B" | "b" => Ok(Self::b()),
            "L" | "l" => Ok(Self::l()),
            "tiny-test" | "tiny" => Ok(Self::tiny_test()),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected T, S, B, L or tiny-test)"
            ))),
        }
    }

    /// Adjusts the depth-branch widths to `ratio * rgb` at fixed RGB widths
    /// (the channel-ratio ablation axis). Head counts are re-derived.
    pub fn with_channel_ratio(mut self, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 4.0) {
            return Err(Error::Config(format!("channel ratio {ratio} out of range")));
        }
        self.stem_depth = ((self.stem_rgb as f64 * ratio).round() as usize).max(1);
        for s in self.stages.iter_mut() {
            s.depth_channels = ((s.rgb_channels as f64 * ratio).round() as usize).max(1);
        }
        self.heads = self.stages.map(|s| default_heads(s.depth_channels));
        self.name = format!("{}-ratio{:.4}", self.name, ratio);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 {
                return Err(Error::Config(format!("stage {} has zero blocks", i + 1)));
            }
            if !(s.expansion == 4 || s.expansion == 8) {
                return Err(Error::Config(format!(
                    "stage {} expansion {} not in {{4, 8}}",
                    i + 1,
                    s.expansion
                )));
            }
            if self.heads[i] == 0 || s.depth_channels % self.heads[i] != 0 {
                return Err(Error::Config(format!(
                    "stage {}: heads {} must divide depth channels {}",
                    i + 1,
                    self.heads[i],
                    s.depth_channels
                )));
            }
        }
        if self.gaa_pool_k == 0 {
            return Err(Error::Config("gaa_pool_k must be >= 1".into()));
        }
        if self.lea_kernel % 2 == 0 || self.base_kernel % 2 == 0 {
            return Err(Error::Config("lea/base kernels must be odd".into()));
        }
        if self.depth_in_channels == 0 {
            return Err(Error::Config("depth_in_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// Linear stochastic-depth ramp over the whole block sequence.
    pub fn drop_path_rate(&self, global_block: usize) -> f64 {
        let total = self.total_blocks();
        if total <= 1 {
            return 0.0;
        }
        self.drop_path_max * global_block as f64 / (total - 1) as f64
    }
}
