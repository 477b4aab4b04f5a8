//! Segmentation model bundle and inference, including multi-scale flip
//! prediction.

use std::path::Path;

use crate::encoder::checkpoint::{load_matching, read_checkpoint, ENCODER_PREFIXES};
use crate::encoder::{encoder_forward, EncoderWeights, VariantConfig};
use crate::error::{Error, Result};
use crate::image::resize_bilinear_hw;
use crate::nn::{Forward, Mode};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::{Float, Tensor};

use super::decoder::{decoder_forward, DecoderWeights, HamCfg};

pub struct SegModel<E: Float> {
    pub store: ParamStore<E>,
    pub enc: EncoderWeights,
    pub dec: DecoderWeights,
    pub cfg: VariantConfig,
    pub ham: HamCfg,
}

impl<E: Float> SegModel<E> {
    pub fn clone_model(&self) -> SegModel<E> {
        SegModel {
            store: self.store.clone_store(),
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            cfg: self.cfg.clone(),
            ham: self.ham,
        }
    }

    /// Writes weights plus the embedded config/metadata entries.
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg_json = serde_json::to_vec(&self.cfg)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        let extras = vec![
            (
                "__config".to_string(),
                crate::rdt::RdtTensor::U8 {
                    dims: vec![cfg_json.len()],
                    data: cfg_json,
                },
            ),
            (
                "__meta.seg".to_string(),
                crate::rdt::RdtTensor::I32 {
                    dims: vec![4],
                    data: vec![
                        self.dec.num_classes as i32,
                        i32::from(self.ham.enabled),
                        self.ham.rank as i32,
                        self.ham.iters as i32,
                    ],
                },
            ),
        ];
        crate::encoder::checkpoint::save_checkpoint(path, &self.store, &extras)
    }

    /// Rebuilds a model from a checkpoint written by [`SegModel::save`].
    pub fn from_checkpoint(path: &Path) -> Result<SegModel<E>> {
        let entries = read_checkpoint(path)?;
        let cfg = config_from_entries(&entries)?;
        let meta = crate::encoder::checkpoint::find_entry(&entries, "__meta.seg")
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks __meta.seg".into()))?;
        let meta = match meta {
            crate::rdt::RdtTensor::I32 { data, .. } if data.len() == 4 => data.clone(),
            _ => return Err(Error::Checkpoint("__meta.seg has wrong layout".into())),
        };
        let ham = HamCfg {
            enabled: meta[1] != 0,
            rank: meta[2] as usize,
            iters: meta[3] as usize,
        };
        let mut model = SegModel::new(cfg, meta[0] as usize, ham, 0, 0.02)?;
        load_matching(&mut model.store, &entries, &ENCODER_PREFIXES)?;
        Ok(model)
    }
    pub fn new(
        cfg: VariantConfig,
        num_classes: usize,
        ham: HamCfg,
        seed: u64,
        init_std: f64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(seed, 0x5745_4947);
        let enc = EncoderWeights::init(&mut store, &cfg, &mut rng, init_std)?;
        let dec = DecoderWeights::init(&mut store, &cfg, num_classes, &mut rng, init_std)?;
        Ok(SegModel {
            store,
            enc,
            dec,
            cfg,
            ham,
        })
    }

    /// Loads encoder weights from a pretraining checkpoint; the decoder
    /// stays randomly initialized.
    pub fn load_encoder_from(&mut self, path: &Path) -> Result<usize> {
        let entries = read_checkpoint(path)?;
        load_matching(&mut self.store, &entries, &ENCODER_PREFIXES)
    }

    /// Loads all model weights (encoder + decoder) from a checkpoint.
    pub fn load_all_from(&mut self, path: &Path) -> Result<usize> {
        let entries = read_checkpoint(path)?;
        let n = load_matching(&mut self.store, &entries, &ENCODER_PREFIXES)?;
        for name in ["decoder.fuse.conv.weight", "decoder.classifier.weight"] {
            if !entries.iter().any(|(n2, _)| n2 == name) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint lacks decoder weights ('{name}' missing)"
                )));
            }
        }
        Ok(n)
    }

    /// Duplicates single-channel depth to the configured stem width.
    pub fn adapt_depth(&self, depth: &Tensor<E>) -> Tensor<E> {
        adapt_depth_channels(depth, self.cfg.depth_in_channels)
    }

    /// Eval-mode forward: raw class logits at input resolution.
    pub fn predict_logits(&mut self, rgb: &Tensor<E>, depth: &Tensor<E>) -> Result<Tensor<E>> {
        let (h, w) = (rgb.dims()[2], rgb.dims()[3]);
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let mut ctx = Forward::new(&mut tape, &mut self.store, Mode::Eval, &mut rng);
        let stages = encoder_forward(&mut ctx, rgb, depth, &self.enc, &self.cfg)?;
        let logits = decoder_forward(&mut ctx, &stages, &self.dec, &self.ham, (h, w))?;
        Ok(tape.value(logits))
    }

    /// Eval-mode forward returning per-pixel class probabilities.
    pub fn predict_probs(&mut self, rgb: &Tensor<E>, depth: &Tensor<E>) -> Result<Tensor<E>> {
        let (h, w) = (rgb.dims()[2], rgb.dims()[3]);
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let mut ctx = Forward::new(&mut tape, &mut self.store, Mode::Eval, &mut rng);
        let stages = encoder_forward(&mut ctx, rgb, depth, &self.enc, &self.cfg)?;
        let logits = decoder_forward(&mut ctx, &stages, &self.dec, &self.ham, (h, w))?;
        let probs = tape.softmax(logits, 1)?;
        Ok(tape.value(probs))
    }

    /// Multi-scale flip inference: average of class-probability maps over
    /// the given scales (sizes rounded to multiples of 32) and, optionally,
    /// horizontal mirrors. scales = [1.0] without flip is bitwise equal to
    /// a single forward.
    pub fn msflip_predict(
        &mut self,
        rgb: &Tensor<E>,
        depth: &Tensor<E>,
        scales: &[f64],
        flip: bool,
    ) -> Result<Tensor<E>> {
        if scales.is_empty() {
            return Err(Error::InvalidArg("msflip: no scales given".into()));
        }
        let (h, w) = (rgb.dims()[2], rgb.dims()[3]);
        let mut acc: Option<Tensor<E>> = None;
        let mut runs = 0usize;
        for &s in scales {
            let sh = round32(h as f64 * s)?;
            let sw = round32(w as f64 * s)?;
            let rgb_s = resize_bilinear_hw(rgb, sh, sw);
            let depth_s = resize_bilinear_hw(depth, sh, sw);
            for &mirrored in if flip { &[false, true][..] } else { &[false][..] } {
                let (r_in, d_in) = if mirrored {
                    (rgb_s.flip_last_axis(), depth_s.flip_last_axis())
                } else {
                    (rgb_s.clone(), depth_s.clone())
                };
                let probs = self.predict_probs(&r_in, &d_in)?;
                let probs = if mirrored { probs.flip_last_axis() } else { probs };
                let probs = resize_bilinear_hw(&probs, h, w);
                acc = Some(match acc {
                    None => probs,
                    Some(a) => {
                        let data = a
                            .data()
                            .iter()
                            .zip(probs.data().iter())
                            .map(|(&x, &y)| E::from_f64(x.to_f64() + y.to_f64()))
                            .collect();
                        Tensor::new(a.dims().to_vec(), data)?
                    }
                });
                runs += 1;
            }
        }
        let a = acc.expect("at least one run");
        let inv = E::from_f64(1.0 / runs as f64);
        Ok(a.map(|v| E::from_f64(v.to_f64() * inv.to_f64())))
    }
}

/// Reads the embedded variant config out of a checkpoint.
pub fn config_from_entries(
    entries: &[(String, crate::rdt::RdtTensor)],
) -> Result<VariantConfig> {
    let blob = crate::encoder::checkpoint::find_entry(entries, "__config")
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks __config".into()))?;
    let bytes = match blob {
        crate::rdt::RdtTensor::U8 { data, .. } => data,
        _ => return Err(Error::Checkpoint("__config is not a byte blob".into())),
    };
    serde_json::from_slice(bytes)
        .map_err(|e| Error::Checkpoint(format!("config deserialization: {e}")))
}

fn round32(v: f64) -> Result<usize> {
    let r = ((v / 32.0).round() as usize) * 32;
    if r < 32 {
        return Err(Error::InvalidArg(format!(
            "msflip: scaled size {v:.1} rounds below 32"
        )));
    }
    Ok(r)
}

pub use crate::data::adapt_depth_channels;
