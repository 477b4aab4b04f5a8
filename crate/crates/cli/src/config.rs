//! Run configuration: JSON config file merged with command-line overrides
//! (CLI wins). The resolved config is echoed verbatim into the output
//! directory of every run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dformer_core::encoder::{default_heads, LeaFusion, QFusion, VariantConfig};
use dformer_core::segmentation::HamCfg;
use dformer_core::{Error, Result};

/// Model-shape switches shared by every training subcommand.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ModelOverrides {
    pub variant: Option<String>,
    pub q_fusion: Option<String>,
    pub lea_fusion: Option<String>,
    pub channel_ratio: Option<String>,
    pub gaa_pool_k: Option<usize>,
    pub lea_kernel: Option<usize>,
    pub base_kernel: Option<usize>,
    pub depth_in_channels: Option<usize>,
    pub drop_path: Option<f64>,
    pub no_ham: Option<bool>,
    pub init_std: Option<f64>,
}

impl ModelOverrides {
    pub fn merge_over(&self, file: &ModelOverrides) -> ModelOverrides {
        ModelOverrides {
            variant: self.variant.clone().or_else(|| file.variant.clone()),
            q_fusion: self.q_fusion.clone().or_else(|| file.q_fusion.clone()),
            lea_fusion: self.lea_fusion.clone().or_else(|| file.lea_fusion.clone()),
            channel_ratio: self
                .channel_ratio
                .clone()
                .or_else(|| file.channel_ratio.clone()),
            gaa_pool_k: self.gaa_pool_k.or(file.gaa_pool_k),
            lea_kernel: self.lea_kernel.or(file.lea_kernel),
            base_kernel: self.base_kernel.or(file.base_kernel),
            depth_in_channels: self.depth_in_channels.or(file.depth_in_channels),
            drop_path: self.drop_path.or(file.drop_path),
            no_ham: self.no_ham.or(file.no_ham),
            init_std: self.init_std.or(file.init_std),
        }
    }

    /// Builds the concrete variant config with all switches applied.
    pub fn resolve(&self) -> Result<VariantConfig> {
        let name = self.variant.clone().unwrap_or_else(|| "tiny-test".into());
        let mut cfg = VariantConfig::by_name(&name)?;
        if let Some(q) = &self.q_fusion {
            cfg.q_fusion = parse_q_fusion(q)?;
        }
        if let Some(l) = &self.lea_fusion {
            cfg.lea_fusion = parse_lea_fusion(l)?;
        }
        if let Some(r) = &self.channel_ratio {
            cfg = cfg.with_channel_ratio(parse_ratio(r)?)?;
        }
        if let Some(k) = self.gaa_pool_k {
            cfg.gaa_pool_k = k;
        }
        if let Some(k) = self.lea_kernel {
            cfg.lea_kernel = k;
        }
        if let Some(k) = self.base_kernel {
            cfg.base_kernel = k;
        }
        if let Some(c) = self.depth_in_channels {
            cfg.depth_in_channels = c;
        }
        if let Some(d) = self.drop_path {
            cfg.drop_path_max = d;
        }
        cfg.heads = cfg.stages.map(|s| default_heads(s.depth_channels));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ham(&self) -> HamCfg {
        if self.no_ham.unwrap_or(false) {
            HamCfg::disabled()
        } else {
            HamCfg::default()
        }
    }

    pub fn init_std(&self) -> f64 {
        self.init_std.unwrap_or(0.02)
    }
}

pub fn parse_q_fusion(s: &str) -> Result<QFusion> {
    match s {
        "none" => Ok(QFusion::None),
        "q" => Ok(QFusion::QOnly),
        "qkv" => Ok(QFusion::Qkv),
        other => Err(Error::Config(format!(
            "unknown q-fusion '{other}' (expected none, q or qkv)"
        ))),
    }
}

pub fn parse_lea_fusion(s: &str) -> Result<LeaFusion> {
    match s {
        "hadamard" => Ok(LeaFusion::Hadamard),
        "add" => Ok(LeaFusion::Add),
        "concat" => Ok(LeaFusion::Concat),
        other => Err(Error::Config(format!(
            "unknown lea-fusion '{other}' (expected hadamard, add or concat)"
        ))),
    }
}

/// Accepts "1/8" fractions or plain decimals.
pub fn parse_ratio(s: &str) -> Result<f64> {
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio '{s}'")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio '{s}'")))?;
        if d == 0.0 {
            return Err(Error::Config(format!("bad ratio '{s}'")));
        }
        Ok(n / d)
    } else {
        s.trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio '{s}'")))
    }
}

/// Reads model overrides out of a JSON config file, if given.
pub fn load_file_overrides(path: Option<&Path>) -> Result<ModelOverrides> {
    match path {
        None => Ok(ModelOverrides::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("cannot parse {}: {e}", p.display())))
        }
    }
}

/// Writes the resolved effective configuration into the run directory.
pub fn echo_config<T: Serialize>(out_dir: &Path, effective: &T) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let text = serde_json::to_string_pretty(effective)
        .map_err(|e| Error::Config(format!("config echo: {e}")))?;
    std::fs::write(out_dir.join("config.json"), text + "\n")?;
    Ok(())
}

pub fn out_path(out: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    out.clone()
        .ok_or_else(|| Error::Config(format!("missing required flag {flag}")))
}
